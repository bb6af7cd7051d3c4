"""Construct models from a kind name or a compact ``kind:key=value,...`` string.

Examples::

    uniform:v=3
    powerlaw:v=1000,alpha=1.5,eos_rank=1
    ngram:path=model.ndjson
    external:addr=tcp://127.0.0.1:9000,v=8193,bos=0,eos=1,unk=2
    external:v=12,bos=12,eos=0,addr=cmd:python3 -m instcache.model --model powerlaw:v=12,alpha=1.2

A ``cmd:`` address swallows everything after it, so put it last.
"""

from __future__ import annotations

from .base import ModelSpec, TokenModel
from .external import ExternalModel
from .ngram import NgramModel
from .synthetic import PowerLawModel, UniformModel

KINDS = ("uniform", "powerlaw", "ngram", "external")


def parse_model_string(text: str) -> tuple[str, dict[str, str]]:
    kind, _, rest = text.partition(":")
    params = {}
    if rest:
        # a cmd: address is a command line that may hold commas, so it takes the rest of the string
        head, sep, addr = rest.partition("addr=cmd:")
        if sep and (not head or head.endswith(",")):
            addr = "cmd:" + addr
            params["addr"] = addr.strip()
            rest = head.rstrip(",")
        for item in filter(None, rest.split(",")):
            key, eq, value = item.partition("=")
            if not eq:
                raise ValueError(f"bad model parameter {item!r} in {text!r}")
            params[key.strip()] = value.strip()
    return kind.strip(), params


def model_init(kind: str, max_len: int = 16, spec: ModelSpec | None = None, **params) -> TokenModel:
    """Build a model. ``spec`` is required for ``external`` unless v/eos/bos are given."""
    bpt = int(params.pop("bytes_per_token", 256))
    max_len = int(params.pop("max_len", max_len))
    if kind == "uniform":
        v = int(params.pop("v", params.pop("vocab_size", 0)))
        eos = params.pop("eos", None)
        model = UniformModel(v, None if eos is None else int(eos), max_len, bpt)
    elif kind == "powerlaw":
        v = int(params.pop("v", params.pop("vocab_size", 0)))
        alpha = float(params.pop("alpha"))
        model = PowerLawModel(v, alpha, int(params.pop("eos_rank", 1)), max_len, bpt)
    elif kind == "ngram":
        model = NgramModel.from_path(params.pop("path"), max_len, bpt)
    elif kind == "external":
        addr = params.pop("addr")
        if spec is None:
            unk = params.pop("unk", None)
            spec = ModelSpec(
                int(params.pop("v")),
                max_len,
                bos_id=int(params.pop("bos")),
                eos_id=int(params.pop("eos")),
                unk_id=None if unk is None else int(unk),
            )
        model = ExternalModel(spec, addr, int(params.pop("batch", 256)), float(params.pop("timeout", 30.0)), bpt)
    else:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")
    if params:
        raise ValueError(f"unknown parameters for {kind} model: {sorted(params)}")
    return model


def model_from_string(text: str, max_len: int = 16) -> TokenModel:
    kind, params = parse_model_string(text)
    try:
        return model_init(kind, max_len=max_len, **params)
    except KeyError as exc:
        raise ValueError(f"model {text!r} is missing parameter {exc}") from None
