"""End-to-end desk-scale run: split, train, sigma-ladder caches, predicted vs actual hit rate.

Artifacts under ``out_dir``::

    data/{train,valid,test}.ndjson   corpus splits
    model.ndjson                     n-gram artifact
    prepop/sigma_<s>.ndjson          pre-populated instructions per sigma
    cache/sigma_<s>.ndjson           store snapshots per sigma
    report.ndjson / report.csv       one row per sigma
    timings.ndjson                   wall times (not part of the digests)
    serving.ndjson                   only when serving.launch is set

Every header carries the effective config and the input digests, so a rerun
with the same seed and config reproduces every digest-checked file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass

from .analytics import empirical_cdf, fit_power_law, predict_report, rank_samples_from_model, write_csv
from .cache import CorpusEchoResponder, HttpResponder, build_store, template_responder
from .config import RunConfig
from .dataset import (
    SplitSpec,
    dedup,
    evaluate_hit_rate,
    filter_pipeline,
    ingest,
    pii_scrubber,
    repetition_baseline,
    split,
    write_corpus,
)
from .model import NgramModel, model_from_string, train_ngram_texts
from .prepopulate import PrepopConfig, prepopulate, write_prepop

log = logging.getLogger(__name__)

REPORT_FORMAT = "instcache-report"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sigma_tag(sigma: float) -> str:
    return f"{sigma:g}".replace(".", "p")


@dataclass
class _Stage:
    name: str

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def load_records(cfg: RunConfig):
    ds = cfg.dataset
    if ds.corpus:
        return ingest(ds.corpus), file_digest(ds.corpus)
    from .synth import synthetic_corpus

    drift = ds.synthetic_drift_at if ds.synthetic_drift_at >= 0 else None
    records = synthetic_corpus(ds.synthetic_n, seed=cfg.seed, drift_at=drift)
    h = hashlib.sha256()
    for r in records:
        h.update(json.dumps(r.to_json(), sort_keys=True).encode())
    return records, h.hexdigest()


def prepare_splits(cfg: RunConfig, records):
    ds = cfg.dataset
    scrub = pii_scrubber() if ds.pii_filter else None
    kept = filter_pipeline(records, ds.max_instr_tokens, ds.min_resp_tokens, ds.first_turn_only, scrub)
    if ds.dedup != "none":
        kept = dedup(kept, ds.dedup)
    spec = SplitSpec(ds.train_frac, ds.valid_frac, ds.test_frac, cfg.seed, ds.split_mode)
    return split(kept, spec)


def make_responder(cfg: RunConfig, train):
    kind = cfg.cache.responder
    if kind == "template":
        return template_responder
    if kind == "http":
        if not cfg.cache.responder_endpoint:
            raise ValueError("cache.responder_endpoint is required for the http responder")
        return HttpResponder(cfg.cache.responder_endpoint)
    return CorpusEchoResponder(((r.instruction, r.response) for r in train), cfg.cache.trim, cfg.cache.nfc)


def _fit_prefixes(model, texts, limit=200):
    prefixes = {()}
    for text in texts[:limit]:
        toks = model.encode(text)
        if toks is None:
            continue
        for j in range(1, min(len(toks), model.spec.max_len - 1)):
            prefixes.add(tuple(toks[:j]))
    return sorted(prefixes)


def end_to_end(cfg: RunConfig) -> dict:
    """Run the pipeline; any failure is raised as ``StageError`` naming the stage."""
    out = cfg.out_dir
    for sub in ("data", "prepop", "cache"):
        os.makedirs(os.path.join(out, sub), exist_ok=True)
    provenance = cfg.provenance()

    with _Stage("dataset"):
        records, corpus_digest = load_records(cfg)
        train, valid, test = prepare_splits(cfg, records)
        if not (train and valid and test):
            raise ValueError(f"empty split: train={len(train)} valid={len(valid)} test={len(test)}")
        inputs = {"corpus_digest": corpus_digest}
        header = {"config": provenance, "inputs": inputs}
        for name, part in (("train", train), ("valid", valid), ("test", test)):
            write_corpus(os.path.join(out, "data", f"{name}.ndjson"), part, {**header, "split": name})

    with _Stage("train"):
        if cfg.model.kind == "ngram":
            art = train_ngram_texts(
                (r.instruction for r in train), cfg.model.order, cfg.model.smoothing_alpha, cfg.model.vocab_cap
            )
            model_path = os.path.join(out, "model.ndjson")
            art.dump(model_path)
            model = NgramModel(art, cfg.prepop.max_len)
        else:
            model = model_from_string(cfg.model.kind, cfg.prepop.max_len)
        inputs["model_digest"] = model.digest()

    with _Stage("validate"):
        dist = empirical_cdf(model, [r.instruction for r in valid], cfg.prepop.max_len)
        samples = rank_samples_from_model(model, _fit_prefixes(model, [r.instruction for r in valid]), top_k=1000)
        fit = fit_power_law(samples, source="model")
        sigmas = sorted(set(cfg.prepop.sigmas))
        predicted = predict_report(dist, sigmas, fit, cfg.prepop.max_len, cfg.prepop.min_len)

    responder = make_responder(cfg, train)
    rows, timings, digests = [], [], {}
    for pred in predicted:
        sigma = pred["sigma"]
        tag = sigma_tag(sigma)
        with _Stage(f"prepopulate[sigma={sigma:g}]"):
            pc = PrepopConfig(
                sigma=sigma,
                max_len=cfg.prepop.max_len,
                min_len=cfg.prepop.min_len,
                batch_size=cfg.prepop.batch_size,
                workers=cfg.prepop.workers,
                split_depth=cfg.prepop.split_depth,
                strategy=cfg.prepop.strategy,
                executor=cfg.prepop.executor,
            )
            res = prepopulate(model, pc)
            prepop_path = os.path.join(out, "prepop", f"sigma_{tag}.ndjson")
            write_prepop(prepop_path, res, inputs["model_digest"], {"config": provenance, "inputs": inputs})
        with _Stage(f"fill-responses[sigma={sigma:g}]"):
            store = build_store(res.instructions, responder, sigma, cfg.cache.trim, cfg.cache.nfc)
            snap_path = os.path.join(out, "cache", f"sigma_{tag}.ndjson")
            store.persist(snap_path, {"config": provenance, "inputs": inputs})
            digests[f"cache/sigma_{tag}.ndjson"] = file_digest(snap_path)
        with _Stage(f"evaluate[sigma={sigma:g}]"):
            hit = evaluate_hit_rate(store, test)
        rows.append(
            {
                "sigma": sigma,
                "predicted_hit_rate": pred["predicted_hit_rate"],
                "actual_hit_rate": hit.rate,
                "instructions": len(res.instructions),
                "predicted_count_full": pred["predicted_count_full"],
                "predicted_count_simplified": pred["predicted_count_simplified"],
                "estimated_bytes": store.stats().estimated_bytes,
            }
        )
        timings.append({"sigma": sigma, "prepop_wall_s": res.stats.wall_time, "nodes_expanded": res.stats.nodes_expanded})

    with _Stage("report"):
        baseline = repetition_baseline(train, test)
        report_header = {
            "format": REPORT_FORMAT,
            "version": 1,
            "config": provenance,
            "inputs": inputs,
            "power_law": {"alpha": fit.alpha, "beta": fit.beta, "fit_r2": fit.fit_r2},
            "repetition_baseline": baseline,
            "splits": {"train": len(train), "valid": len(valid), "test": len(test)},
            "notes": "estimated_bytes is an estimate (key + instruction + response bytes + 64 per entry)",
        }
        report_path = os.path.join(out, "report.ndjson")
        with open(report_path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(report_header, sort_keys=True) + "\n")
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        write_csv(os.path.join(out, "report.csv"), rows)
        digests["report.ndjson"] = file_digest(report_path)
        with open(os.path.join(out, "timings.ndjson"), "w", encoding="utf-8") as fh:
            for t in timings:
                fh.write(json.dumps(t, sort_keys=True) + "\n")

    result = {"rows": rows, "baseline": baseline, "digests": digests, "out_dir": out, "power_law": report_header["power_law"]}

    if cfg.serving.launch:
        with _Stage("serving"):
            result["serving"] = _serve_and_load(cfg, store, test)
    return result


def _serve_and_load(cfg: RunConfig, store, test) -> list[dict]:
    from .serving import LoadProfile, UpstreamConfig, metrics_report, serve, sweep

    sv = cfg.serving
    up = UpstreamConfig(sv.upstream, sv.endpoint or None, sv.per_token_latency_ms, sv.startup_latency_ms,
                        sv.response_tokens, sv.timeout_ms)
    service = serve(store, up, sv.host, 0)
    try:
        base = LoadProfile(sv.rates[0], n_requests=sv.n_requests, seed=cfg.seed,
                           source=[r.instruction for r in test], concurrency=sv.concurrency)
        rows = sweep(sv.rates, base, service.url)
    finally:
        service.close()
    return metrics_report(rows, ndjson_path=os.path.join(cfg.out_dir, "serving.ndjson"))
