"""Adapter for out-of-process models speaking line-delimited JSON.

Requests and responses, one object per line, answered strictly in order::

    {"op": "root"}                              -> {"state": 0}
    {"op": "dist", "state": 0, "top_k": 5}      -> {"tokens": [{"id": 7, "text": "what", "logp": -1.2}, ...]}
    {"op": "extend", "state": 0, "token": 7}    -> {"state": 1}
    {"op": "free", "state": 1}                  -> {"ok": true}
    anything failing                            -> {"error": "..."}

The transport is a TCP connection (``tcp://host:port``) or the standard
streams of a spawned process (``cmd:<command line>``). ``serve_stream`` and
``ProtocolServer`` expose any in-process model over the same protocol.
"""

from __future__ import annotations

import json
import logging
import math
import shlex
import socket
import socketserver
import subprocess
import sys
import threading
from typing import Sequence

from .base import ModelError, ModelSpec, ModelState, TokenDistribution, TokenModel

log = logging.getLogger(__name__)


class ModelConnectionError(ModelError, ConnectionError):
    pass


class _Channel:
    def __init__(self, address: str, timeout: float):
        self.address = address
        self.proc = None
        self.sock = None
        try:
            if address.startswith("tcp://"):
                host, _, port = address[len("tcp://") :].rpartition(":")
                self.sock = socket.create_connection((host, int(port)), timeout=timeout)
                self.rfile = self.sock.makefile("rb")
                self.wfile = self.sock.makefile("wb")
            elif address.startswith("cmd:"):
                self.proc = subprocess.Popen(
                    shlex.split(address[len("cmd:") :]),
                    stdin=subprocess.PIPE,
                    stdout=subprocess.PIPE,
                )
                self.rfile, self.wfile = self.proc.stdout, self.proc.stdin
            else:
                raise ValueError(f"unsupported model address {address!r} (use tcp://host:port or cmd:...)")
        except OSError as exc:
            raise ModelConnectionError(f"cannot reach model at {address}: {exc}") from exc

    def send(self, requests: Sequence[dict]) -> list[dict]:
        try:
            self.wfile.write(b"".join(json.dumps(r).encode() + b"\n" for r in requests))
            self.wfile.flush()
            replies = []
            for _ in requests:
                line = self.rfile.readline()
                if not line:
                    raise ModelConnectionError(f"model at {self.address} closed the connection")
                replies.append(json.loads(line))
        except OSError as exc:
            raise ModelConnectionError(f"model at {self.address} failed: {exc}") from exc
        for reply in replies:
            if "error" in reply:
                raise ModelError(f"remote model error: {reply['error']}")
        return replies

    def close(self):
        for f in (self.wfile, self.rfile):
            try:
                f.close()
            except OSError:
                pass
        if self.sock is not None:
            self.sock.close()
        if self.proc is not None:
            self.proc.wait(timeout=5)


class ExternalModel(TokenModel):
    """Remote model behind the wire protocol; one connection per handle."""

    kind = "external"

    def __init__(self, spec: ModelSpec, address: str, batch_size: int = 256, timeout: float = 30.0,
                 bytes_per_token: int = 256):
        super().__init__(spec, bytes_per_token)
        self.address = address
        self.batch_size = batch_size
        self.timeout = timeout
        self._chan = _Channel(address, timeout)
        self._chan_lock = threading.Lock()
        self._text: dict[int, str] = {}
        self._ids: dict[str, int] = {}
        self.round_trips = 0

    def _call(self, requests):
        with self._chan_lock:
            self.round_trips += 1
            return self._chan.send(requests)

    def _root_handle(self):
        return self._call([{"op": "root"}])[0]["state"]

    def _extend_handle(self, state, token_id):
        return self._call([{"op": "extend", "state": state.handle, "token": int(token_id)}])[0]["state"]

    def _release_handle(self, state):
        self._call([{"op": "free", "state": state.handle}])

    def _parse(self, reply, min_prob) -> TokenDistribution:
        pairs = []
        for tok in reply["tokens"]:
            tid = int(tok["id"])
            if "text" in tok and tid not in self._text:
                self._text[tid] = tok["text"]
                self._ids.setdefault(tok["text"], tid)
            p = math.exp(float(tok["logp"]))
            if p >= min_prob and p > 0.0:
                pairs.append((tid, p))
        return TokenDistribution.from_pairs(pairs)

    def _distribution(self, state, top_k, min_prob):
        k = top_k if top_k is not None else self.spec.vocab_size + 1
        reply = self._call([{"op": "dist", "state": state.handle, "top_k": int(k)}])[0]
        return self._parse(reply, min_prob)

    def distributions(self, states, top_k=None, min_prob=0.0):
        if isinstance(min_prob, (int, float)):
            min_prob = [float(min_prob)] * len(states)
        for s in states:
            self._check_live(s)
        k = top_k if top_k is not None else self.spec.vocab_size + 1
        out = []
        for lo in range(0, len(states), self.batch_size):
            chunk = states[lo : lo + self.batch_size]
            replies = self._call([{"op": "dist", "state": s.handle, "top_k": int(k)} for s in chunk])
            self.model_calls += len(chunk)
            out.extend(self._parse(r, m) for r, m in zip(replies, min_prob[lo : lo + self.batch_size]))
        return out

    def is_token(self, token_id):
        # the remote side validates ids
        return token_id >= 0 and token_id != self.spec.bos_id

    def token_text(self, token_id):
        if token_id == self.spec.eos_id:
            return "<eos>"
        return self._text.get(token_id, f"<{token_id}>")

    def encode(self, text):
        try:
            return [self._ids[w] for w in text.split()]
        except KeyError:
            return None

    def describe(self):
        return f"external:{self.address}:{self.spec}"

    def clone(self):
        twin = ExternalModel(self.spec, self.address, self.batch_size, self.timeout, self.bytes_per_token)
        twin._text, twin._ids = dict(self._text), dict(self._ids)
        return twin

    def close(self):
        self._chan.close()


# -- server side ---------------------------------------------------------

class _Session:
    """Per-connection state table over a local model handle."""

    def __init__(self, model: TokenModel):
        self.model = model.clone()
        self.states: dict[int, ModelState] = {}

    def handle(self, req: dict) -> dict:
        try:
            op = req.get("op")
            m = self.model
            if op == "root":
                s = m.root_state()
            elif op == "extend":
                s = m.extend(self.states[int(req["state"])], int(req["token"]))
            elif op == "dist":
                top_k = req.get("top_k")
                d = m.distribution(self.states[int(req["state"])], int(top_k) if top_k else None)
                return {"tokens": [{"id": t, "text": m.token_text(t), "logp": math.log(p)} for t, p in d]}
            elif op == "free":
                m.release(self.states.pop(int(req["state"])))
                return {"ok": True}
            else:
                return {"error": f"unknown op {op!r}"}
            self.states[s.state_id] = s
            return {"state": s.state_id}
        except KeyError as exc:
            return {"error": f"unknown or missing field {exc}"}
        except Exception as exc:  # protocol boundary: every failure becomes an error reply
            return {"error": str(exc)}


def serve_stream(model: TokenModel, rfile, wfile) -> None:
    session = _Session(model)
    for line in rfile:
        if not line.strip():
            continue
        try:
            reply = session.handle(json.loads(line))
        except ValueError as exc:
            reply = {"error": f"bad request: {exc}"}
        wfile.write(json.dumps(reply).encode() + b"\n")
        wfile.flush()


class ProtocolServer(socketserver.ThreadingTCPServer):
    """TCP server for the wire protocol; ``address`` gives the tcp:// URL."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, model: TokenModel, host: str = "127.0.0.1", port: int = 0):
        self.model = model

        class Handler(socketserver.StreamRequestHandler):
            def handle(inner):
                serve_stream(self.model, inner.rfile, inner.wfile)

        super().__init__((host, port), Handler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"tcp://{host}:{port}"

    def start(self) -> "ProtocolServer":
        threading.Thread(target=self.serve_forever, daemon=True).start()
        return self


def main(argv=None) -> int:
    """``python -m instcache.model --model SPEC [--port N]`` (stdio when no port)."""
    import argparse

    from .factory import model_from_string

    ap = argparse.ArgumentParser(description="serve a local model over the wire protocol")
    ap.add_argument("--model", required=True)
    ap.add_argument("--port", type=int)
    ap.add_argument("--host", default="127.0.0.1")
    args = ap.parse_args(argv)
    model = model_from_string(args.model)
    if args.port is None:
        serve_stream(model, sys.stdin.buffer, sys.stdout.buffer)
        return 0
    server = ProtocolServer(model, args.host, args.port)
    log.info("serving %s on %s", model.describe(), server.address)
    server.serve_forever()
    return 0


if __name__ == "__main__":
    sys.exit(main())
