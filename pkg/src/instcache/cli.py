"""``instcache`` command line.

Each subcommand maps to one library operation. Settings come from the TOML
config (``--config`` or $INSTCACHE_CONFIG) and flags override them. Results
are printed as JSON on stdout; failures print ``{"error": ..., "message": ...}``
on stderr and exit 1. Usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import timedelta

from . import __version__

log = logging.getLogger("instcache")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _pick(flag, default):
    return default if flag is None else flag


def _out(args, name: str) -> str:
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# -- subcommands -------------------------------------------------------------------

def cmd_synth(args, cfg):
    from .dataset import write_corpus
    from .synth import synthetic_corpus

    n = _pick(args.n, cfg.dataset.synthetic_n)
    drift = _pick(args.drift_at, cfg.dataset.synthetic_drift_at)
    records = synthetic_corpus(n, seed=args.seed, drift_at=drift if drift is not None and drift >= 0 else None)
    path = args.output or _out(args, "corpus.ndjson")
    write_corpus(path, records)
    _emit({"records": len(records), "output": path})


def cmd_ingest(args, cfg):
    from .dataset import IngestReport, ingest, write_corpus

    report = IngestReport()
    records = ingest(args.input, report=report)
    path = args.output or _out(args, "ingested.ndjson")
    write_corpus(path, records, {"source": os.path.abspath(args.input)})
    _emit({"lines": report.lines, "records": report.records, "malformed": report.malformed, "output": path})


def cmd_filter(args, cfg):
    from .dataset import dedup, filter_pipeline, ingest, pii_scrubber, write_corpus

    ds = cfg.dataset
    records = ingest(args.input)
    scrub = pii_scrubber() if _pick(args.pii, ds.pii_filter) else None
    kept = filter_pipeline(
        records,
        _pick(args.max_instr_tokens, ds.max_instr_tokens),
        _pick(args.min_resp_tokens, ds.min_resp_tokens),
        not args.all_turns and ds.first_turn_only,
        scrub,
    )
    mode = _pick(args.dedup, ds.dedup)
    if mode != "none":
        kept = dedup(kept, mode)
    path = args.output or _out(args, "filtered.ndjson")
    write_corpus(path, kept)
    _emit({"input": len(records), "kept": len(kept), "output": path})


def cmd_split(args, cfg):
    from .dataset import SplitSpec, ingest, split, write_corpus

    ds = cfg.dataset
    spec = SplitSpec(
        _pick(args.train_frac, ds.train_frac),
        _pick(args.valid_frac, ds.valid_frac),
        _pick(args.test_frac, ds.test_frac),
        args.seed,
        _pick(args.mode, ds.split_mode),
    )
    parts = split(ingest(args.input), spec)
    out = {}
    for name, part in zip(("train", "valid", "test"), parts):
        path = _out(args, f"{name}.ndjson")
        write_corpus(path, part, {"split": name, "seed": args.seed})
        out[name] = {"records": len(part), "output": path}
    _emit(out)


def cmd_train_ngram(args, cfg):
    from .dataset import ingest
    from .model import train_ngram_texts

    m = cfg.model
    art = train_ngram_texts(
        (r.instruction for r in ingest(args.input)),
        _pick(args.order, m.order),
        _pick(args.smoothing_alpha, m.smoothing_alpha),
        _pick(args.vocab_cap, m.vocab_cap),
    )
    path = args.output or _out(args, "model.ndjson")
    art.dump(path)
    _emit({"order": art.order, "vocab_size": art.vocab_size, "digest": art.digest(), "output": path})


def cmd_fit_powerlaw(args, cfg):
    from .analytics import fit_power_law, rank_samples_from_model
    from .model import model_from_string

    if args.samples:
        samples = []
        with open(args.samples, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    samples.append((int(row["rank"]), float(row["prob"])))
        source = args.samples
    elif args.model:
        model = model_from_string(args.model)
        samples = rank_samples_from_model(model, [()], args.top_k)
        source = args.model
    else:
        raise ValueError("fit-powerlaw needs --samples or --model")
    fit = fit_power_law(samples, source)
    _emit({"alpha": fit.alpha, "beta": fit.beta, "fit_r2": fit.fit_r2, "ranks": fit.ranks, "source": fit.source})


def cmd_estimate(args, cfg):
    from .analytics import empirical_cdf, estimate_count, predict_hit_rate
    from .dataset import ingest
    from .model import model_from_string

    sigmas = args.sigma or [cfg.prepop.sigma]
    dist = None
    if args.valid:
        if not args.model:
            raise ValueError("--valid needs --model to score the validation set")
        model = model_from_string(args.model, _pick(args.max_len, cfg.prepop.max_len))
        dist = empirical_cdf(model, [r.instruction for r in ingest(args.valid)], model.spec.max_len)
    lengths = [args.length] if args.length else list(range(2, _pick(args.max_len, cfg.prepop.max_len) + 1))
    for s in sigmas:
        row = {"sigma": s, "alpha": args.alpha, "beta": args.beta, "lengths": lengths}
        ests = [estimate_count(args.alpha, args.beta, s, L) for L in lengths]
        row["n_simplified"] = sum(e.n_simplified for e in ests)
        row["n_full"] = sum(e.n_full for e in ests)
        if dist is not None:
            row["predicted_hit_rate"] = predict_hit_rate(dist, s)
        _emit(row)


def _prepop_config(args, cfg, sigma=None):
    from .prepopulate import PrepopConfig

    p = cfg.prepop
    return PrepopConfig(
        sigma=_pick(sigma, _pick(args.sigma, p.sigma)),
        max_len=_pick(args.max_len, p.max_len),
        min_len=_pick(args.min_len, p.min_len),
        batch_size=_pick(args.batch_size, p.batch_size),
        workers=_pick(args.workers, p.workers),
        split_depth=_pick(args.split_depth, p.split_depth),
        max_live_states=args.max_live_states,
        strategy=_pick(args.strategy, p.strategy),
        executor=_pick(args.executor, p.executor),
    )


def cmd_prepopulate(args, cfg):
    from .model import model_from_string
    from .prepopulate import prepopulate, write_prepop

    pc = _prepop_config(args, cfg)
    model = model_from_string(args.model, pc.max_len)
    res = prepopulate(model, pc)
    extra = {"config": cfg.provenance(), "model": args.model, "min_len": pc.min_len}
    write_prepop(args.output, res, model.digest(), extra)
    st = res.stats
    log.info("%d instructions, %d nodes expanded, high water %d bytes, %.3fs",
             len(res.instructions), st.nodes_expanded, st.retained_state_high_water_bytes, st.wall_time)
    if args.output != "-":
        _emit({"instructions": len(res.instructions), "nodes_expanded": st.nodes_expanded,
               "nodes_pruned": st.nodes_pruned, "high_water_bytes": st.retained_state_high_water_bytes,
               "wall_time_s": st.wall_time, "output": args.output})


def cmd_fill_responses(args, cfg):
    from .cache import CorpusEchoResponder, HttpResponder, bulk_load, template_responder
    from .dataset import ingest

    kind = _pick(args.responder, cfg.cache.responder)
    if kind == "template":
        responder = template_responder
    elif kind == "corpus-echo":
        if not args.corpus:
            raise ValueError("corpus-echo responder needs --corpus")
        responder = CorpusEchoResponder((r.instruction, r.response) for r in ingest(args.corpus))
    else:
        endpoint = args.endpoint or cfg.cache.responder_endpoint
        if not endpoint:
            raise ValueError("http responder needs --endpoint")
        responder = HttpResponder(endpoint)
    store, stats = bulk_load(args.prepop, responder, cfg.cache.trim, cfg.cache.nfc)
    path = args.output or _out(args, "store.ndjson")
    store.persist(path, {"config": cfg.provenance(), "prepop": os.path.abspath(args.prepop)})
    _emit({"entries": stats.entries, "estimated_bytes": stats.estimated_bytes, "output": path})


def cmd_evaluate(args, cfg):
    from .cache import load_snapshot
    from .dataset import evaluate_hit_rate, ingest

    store = load_snapshot(args.store, cfg.cache.trim, cfg.cache.nfc)
    rep = evaluate_hit_rate(store, ingest(args.test))
    path = args.output or _out(args, "evaluation.ndjson")
    header = {"format": "instcache-evaluation", "version": 1, "store": os.path.abspath(args.store),
              "test": os.path.abspath(args.test), "sigma": store.sigma, "config": cfg.provenance()}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        fh.write(json.dumps({"hit_rate": rep.rate, "hits": len(rep.hits), "total": rep.total}, sort_keys=True) + "\n")
    _emit({"hit_rate": rep.rate, "hits": len(rep.hits), "total": rep.total, "output": path})


def cmd_baseline(args, cfg):
    from .dataset import ingest, repetition_baseline

    _emit({"repetition_baseline": repetition_baseline(ingest(args.train), ingest(args.test))})


def cmd_timeslice(args, cfg):
    from .cache import load_snapshot
    from .dataset import ingest, timeslice_eval

    store = load_snapshot(args.store, cfg.cache.trim, cfg.cache.nfc)
    window = timedelta(minutes=args.window_minutes) if args.window_minutes else args.windows
    rows = timeslice_eval(store, ingest(args.records), window)
    for row in rows:
        _emit(row)


def _upstream_config(args, cfg):
    from .serving import UpstreamConfig

    sv = cfg.serving
    mode = _pick(args.upstream, sv.upstream)
    return UpstreamConfig(
        mode,
        args.endpoint or sv.endpoint or None,
        _pick(args.per_token_ms, sv.per_token_latency_ms),
        _pick(args.startup_ms, sv.startup_latency_ms),
        _pick(args.response_tokens, sv.response_tokens),
        _pick(args.timeout_ms, sv.timeout_ms),
    )


def cmd_serve(args, cfg):
    from .cache import CacheStore, load_snapshot
    from .serving import CacheFirstProxy, HttpService, make_upstream

    store = load_snapshot(args.store, cfg.cache.trim, cfg.cache.nfc) if args.store else CacheStore()
    service = HttpService(
        CacheFirstProxy(store, make_upstream(_upstream_config(args, cfg))),
        _pick(args.host, cfg.serving.host),
        _pick(args.port, cfg.serving.port),
    )
    _emit({"url": service.url, "entries": len(store)})
    try:
        service.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        service.httpd.server_close()


def cmd_serve_upstream(args, cfg):
    from .serving import HttpService, SimulatedUpstream, UpstreamApp

    sim = SimulatedUpstream.from_config(_upstream_config(args, cfg))
    service = HttpService(UpstreamApp(sim), _pick(args.host, cfg.serving.host), _pick(args.port, cfg.serving.port))
    _emit({"url": service.url})
    try:
        service.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        service.httpd.server_close()


def cmd_loadgen(args, cfg):
    from .serving import LoadProfile, load_source, metrics_report, sweep

    sv = cfg.serving
    rates = args.rate or sv.rates
    n = None if args.duration else _pick(args.n_requests, sv.n_requests)
    base = LoadProfile(rates[0], args.duration, n, args.seed, load_source(args.source),
                       _pick(args.concurrency, sv.concurrency))
    rows = sweep(rates, base, args.target)
    metrics_report(rows, args.output or _out(args, "loadgen.ndjson"), args.csv)
    for row in rows:
        _emit(row)


def cmd_profile(args, cfg):
    from .model import model_from_string
    from .prepopulate import linear_fit_r2, profile_prepopulation

    pc = _prepop_config(args, cfg, sigma=0.0)
    model = model_from_string(args.model, pc.max_len)
    rows = profile_prepopulation(model, args.sigmas or cfg.prepop.sigmas, pc, args.repeats)
    _, slope, r2 = linear_fit_r2([r["instructions"] for r in rows], [r["wall_time_s"] for r in rows])
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"format": "instcache-profile", "version": 1, "model": args.model,
                                 "config": cfg.provenance()}, sort_keys=True) + "\n")
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    for row in rows:
        _emit(row)
    _emit({"seconds_per_instruction": slope, "linear_r2": r2})


def cmd_run(args, cfg):
    from .pipeline import end_to_end

    result = end_to_end(cfg)
    for row in result["rows"]:
        _emit(row)
    _emit({"repetition_baseline": result["baseline"], "digests": result["digests"], "out_dir": result["out_dir"]})
    for row in result.get("serving", []):
        _emit(row)


# -- parser -----------------------------------------------------------------------------

def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="TOML run config (default: $INSTCACHE_CONFIG)")
    p.add_argument("--seed", type=int, default=d, help="seed for every random choice (default: config seed)")
    p.add_argument("--out-dir", default=d, help="artifact directory (default: config out_dir)")
    p.add_argument("--log-level", default=argparse.SUPPRESS if suppress else "WARNING",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _prepop_flags(p):
    p.add_argument("--sigma", type=float)
    p.add_argument("--max-len", type=int)
    p.add_argument("--min-len", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--split-depth", type=int)
    p.add_argument("--max-live-states", type=int)
    p.add_argument("--strategy", choices=["dfs", "bfs"])
    p.add_argument("--executor", choices=["thread", "process", "serial"])


def _upstream_flags(p):
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--upstream", choices=["simulated", "http"])
    p.add_argument("--endpoint")
    p.add_argument("--per-token-ms", type=float)
    p.add_argument("--startup-ms", type=float)
    p.add_argument("--response-tokens", type=int)
    p.add_argument("--timeout-ms", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="instcache", description="Predictive instruction cache toolkit")
    parser.add_argument("--version", action="version", version=f"instcache {__version__}")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a seeded synthetic corpus")
    p.add_argument("--n", type=int)
    p.add_argument("--drift-at", type=float)
    p.add_argument("--output")

    p = add("ingest", cmd_ingest, "normalise a corpus file into flat turn records")
    p.add_argument("--input", required=True)
    p.add_argument("--output")

    p = add("filter", cmd_filter, "first-turn, length, PII and dedup filters")
    p.add_argument("--input", required=True)
    p.add_argument("--output")
    p.add_argument("--max-instr-tokens", type=int)
    p.add_argument("--min-resp-tokens", type=int)
    p.add_argument("--all-turns", action="store_true")
    p.add_argument("--pii", action="store_true", default=None)
    p.add_argument("--dedup", choices=["none", "global", "per_ip"])

    p = add("split", cmd_split, "seeded train/valid/test split")
    p.add_argument("--input", required=True)
    p.add_argument("--train-frac", type=float)
    p.add_argument("--valid-frac", type=float)
    p.add_argument("--test-frac", type=float)
    p.add_argument("--mode", choices=["random", "time-ordered"])

    p = add("train-ngram", cmd_train_ngram, "train the n-gram token model")
    p.add_argument("--input", required=True)
    p.add_argument("--output")
    p.add_argument("--order", type=int)
    p.add_argument("--smoothing-alpha", type=float)
    p.add_argument("--vocab-cap", type=int)

    p = add("fit-powerlaw", cmd_fit_powerlaw, "fit p = beta * rank^-alpha")
    p.add_argument("--samples", help='NDJSON of {"rank": int, "prob": float}')
    p.add_argument("--model", help="model string; fits its root distribution")
    p.add_argument("--top-k", type=int)

    p = add("estimate", cmd_estimate, "analytic cache size (and hit rate with --valid)")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--sigma", type=float, action="append")
    p.add_argument("--length", type=int, help="single length; default sums lengths 2..max-len")
    p.add_argument("--max-len", type=int)
    p.add_argument("--valid", help="validation corpus for the hit-rate prediction")
    p.add_argument("--model")

    p = add("prepopulate", cmd_prepopulate, "enumerate instructions with NLL <= sigma")
    p.add_argument("--model", required=True, help="e.g. uniform:v=3, powerlaw:v=50,alpha=1.5, ngram:path=m.ndjson")
    p.add_argument("--output", default="-", help="NDJSON path ('-' = stdout)")
    _prepop_flags(p)

    p = add("fill-responses", cmd_fill_responses, "build a cache snapshot from a pre-population file")
    p.add_argument("--prepop", required=True)
    p.add_argument("--responder", choices=["template", "corpus-echo", "http"])
    p.add_argument("--corpus")
    p.add_argument("--endpoint")
    p.add_argument("--output")

    p = add("evaluate", cmd_evaluate, "hit rate of a store on a test set")
    p.add_argument("--store", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--output")

    p = add("baseline", cmd_baseline, "exact-repeat hit rate of train on test")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)

    p = add("timeslice", cmd_timeslice, "hit rate per time window")
    p.add_argument("--store", required=True)
    p.add_argument("--records", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--windows", type=int, default=10)
    g.add_argument("--window-minutes", type=float)

    p = add("serve", cmd_serve, "run the cache-first proxy")
    p.add_argument("--store")
    _upstream_flags(p)

    p = add("serve-upstream", cmd_serve_upstream, "run a simulated upstream over HTTP")
    _upstream_flags(p)

    p = add("loadgen", cmd_loadgen, "Poisson load against a running proxy")
    p.add_argument("--target", required=True, help="proxy base URL")
    p.add_argument("--source", required=True, help="test-set NDJSON or plain text, one instruction per line")
    p.add_argument("--rate", type=float, action="append")
    p.add_argument("--n-requests", type=int)
    p.add_argument("--duration", type=float)
    p.add_argument("--concurrency", type=int)
    p.add_argument("--output")
    p.add_argument("--csv")

    p = add("profile", cmd_profile, "pre-population time and memory across sigmas")
    p.add_argument("--model", required=True)
    p.add_argument("--sigmas", type=_floats)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--output")
    _prepop_flags(p)

    add("run", cmd_run, "end-to-end pipeline from the config")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    from .config import ConfigError, apply_overrides, load_config

    try:
        cfg = load_config(args.config)
        cfg = apply_overrides(cfg, {"seed": args.seed, "out_dir": args.out_dir})
    except ConfigError as exc:
        sys.stderr.write(json.dumps({"error": "config", "message": str(exc)}) + "\n")
        return 2
    args.seed, args.out_dir = cfg.seed, cfg.out_dir
    try:
        args.func(args, cfg)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        stage = getattr(exc, "stage", None)
        if stage:
            err["stage"] = stage
        log.debug("command failed", exc_info=True)
        sys.stderr.write(json.dumps(err) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
