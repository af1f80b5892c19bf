"""Pipeline stages over a work directory, plus sweeps and cost accounting.

Work directory layout::

    config.json          resolved config (with schema version)
    corpus/              synthetic corpus (see dataio.corpus)
    matcher.ckpt         contrastively trained matching model
    backbone.ckpt        yes/no model used for refinement
    index.cidx           target index over the validation pool
    retrieval.jsonl      first-stage rankings of every validation query
    raugrep.bin          steering vectors, one per layer
    rerank.jsonl         refined rankings with s_m, s_r, s
    metrics.json         first-stage and refined metrics
    timings.json         wall-clock seconds per stage (not part of any report)
    sweep_<param>.csv    one row per grid point
    projection.csv       2-D projection of q, q+c and q+n representations
    cost.json            stage timings arranged by training paradigm

Every report carries the config fingerprint.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..backbone import BackboneConfig, ImageStore, backbone_config, pretrain, prompt_parts
from ..dataio.corpus import Corpus, generate_corpus, load_corpus, save_corpus
from ..dataio.prompts import build_vocabulary, noise_text, synth_reasoning_path
from ..encoder import Encoder, EncoderConfig, load_checkpoint, save_checkpoint
from ..errors import DataError, PipelineError
from ..matcher import (Index, RetrievalResult, TrainConfig, encode_batch, query_parts, read_results,
                       retrieve_all, train, write_results)
from ..optim import AdamW
from ..refine import RerankResult, read_rerank, refinement_scores, rerank, write_rerank
from ..repe import InjectionConfig, RAugRep, layer_reps, project_reps, projection_csv, raugrep_from_samples
from ..tensor import log_softmax, mean, pick, scale
from ..text import Vocabulary, join_parts
from .config import PipelineConfig
from .metrics import MetricsReport, evaluate

log = logging.getLogger(__name__)


class Workspace:
    def __init__(self, root, cfg: PipelineConfig):
        self.root = Path(root)
        self.cfg = cfg
        self.fp = cfg.fingerprint()
        self.vocab: Vocabulary = build_vocabulary()
        self._corpus: Optional[Corpus] = None
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.root / name

    @property
    def corpus(self) -> Corpus:
        if self._corpus is None:
            if not self.path("corpus/manifest.json").exists():
                raise DataError(f"{self.root}: no corpus yet, run gen-data first")
            self._corpus = load_corpus(self.path("corpus"))
        return self._corpus

    def load_model(self, name: str) -> Encoder:
        p = self.path(name)
        if not p.exists():
            raise DataError(f"{p} not found; run the stage that produces it first")
        model, _ = load_checkpoint(p)
        return model

    @contextmanager
    def timed(self, stage: str):
        t0 = time.perf_counter()
        yield
        self.record_time(stage, time.perf_counter() - t0)

    def record_time(self, stage: str, seconds: float) -> None:
        p = self.path("timings.json")
        data = json.loads(p.read_text()) if p.exists() else {}
        data[stage] = seconds
        p.write_text(json.dumps(data, sort_keys=True, indent=1) + "\n")

    def timings(self) -> dict:
        p = self.path("timings.json")
        return json.loads(p.read_text()) if p.exists() else {}

    def write_config(self) -> None:
        self.path("config.json").write_text(self.cfg.to_json())


# ---------------------------------------------------------------- configs

def matcher_config(cfg: PipelineConfig, vocab: Vocabulary, image_shape, M: Optional[int] = None) -> EncoderConfig:
    m = cfg.model
    return EncoderConfig(vocab_size=len(vocab), yes_id=vocab.id("yes"), no_id=vocab.id("no"),
                         pad_id=vocab.pad_id, sep_id=vocab.sep_id, n_layers=m.n_layers, D=m.D,
                         n_heads=m.n_heads, max_seq_len=m.max_seq_len, P=m.P, M=m.M if M is None else M,
                         image_shape=tuple(image_shape), dtype=m.dtype)


def train_config(cfg: PipelineConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(tau=t.tau, batch_size=t.batch_size, lr=t.lr, epochs=t.epochs, seed=cfg.seed,
                       weight_decay=t.weight_decay, clip_norm=t.clip_norm)


def injection_config(cfg: PipelineConfig, alpha: Optional[float] = None,
                     layers: Optional[str] = None) -> InjectionConfig:
    return InjectionConfig(cfg.refine.alpha if alpha is None else alpha,
                           cfg.refine.layers if layers is None else layers)


# ---------------------------------------------------------------- stages

def gen_data(ws: Workspace) -> Corpus:
    d = ws.cfg.data
    with ws.timed("gen_data"):
        corpus = generate_corpus(ws.cfg.seed, d.n_triplets, grid=d.grid, pool_size=d.pool_size,
                                 n_val=d.n_val, subset_k=d.subset_k, fill=d.fill)
        save_corpus(corpus, ws.path("corpus"), fingerprint=ws.fp)
    ws.write_config()
    ws._corpus = None
    return corpus


def train_matcher(ws: Workspace, M: Optional[int] = None, checkpoint: Optional[str] = "matcher.ckpt") -> Encoder:
    corpus = ws.corpus
    mcfg = matcher_config(ws.cfg, ws.vocab, corpus.image_shape, M)
    with ws.timed("matcher_training"):
        model, _ = train(corpus.train, corpus.image, mcfg, train_config(ws.cfg), ws.vocab)
    if checkpoint:
        save_checkpoint(ws.path(checkpoint), model, meta={"role": "matcher", "config_fingerprint": ws.fp})
    return model


def pretrain_backbone(ws: Workspace) -> Encoder:
    corpus = ws.corpus
    b = ws.cfg.backbone
    base = matcher_config(ws.cfg, ws.vocab, corpus.image_shape)
    bcfg = backbone_config(ws.vocab, base, n_layers=b.n_layers, max_seq_len=256)
    tcfg = BackboneConfig(epochs=b.epochs, groups_per_batch=b.groups_per_batch, lr=b.lr,
                          random_negatives=b.random_negatives, listwise_weight=b.listwise_weight,
                          path_fraction=b.path_fraction, seed=ws.cfg.seed)
    with ws.timed("backbone_pretraining"):
        model, _ = pretrain(corpus, ws.vocab, bcfg, tcfg)
    save_checkpoint(ws.path("backbone.ckpt"), model, meta={"role": "backbone", "config_fingerprint": ws.fp})
    return model


def first_stage(ws: Workspace, model: Optional[Encoder] = None, write: bool = True) -> list[RetrievalResult]:
    """Index the validation pool and rank it in full for every validation query."""
    corpus = ws.corpus
    model = model or ws.load_model("matcher.ckpt")
    with ws.timed("first_stage_retrieval"):
        index = Index.build(model, corpus.pool, corpus.image)
        q = encode_batch(model, [query_parts(t.text, t.ref_id, ws.vocab) for t in corpus.val], corpus.image)
        results = retrieve_all(q, index, len(index), [t.query_id for t in corpus.val])
    if write:
        index.save(ws.path("index.cidx"), fingerprint=ws.fp)
        write_results(ws.path("retrieval.jsonl"), results, fingerprint=ws.fp)
    return results


def rep_samples(ws: Workspace, limit: int = 0):
    """Training questions and their reasoning paths as token parts."""
    corpus, vocab = ws.corpus, ws.vocab
    triplets = [t for t in corpus.train if t.edit is not None]
    if limit:
        triplets = triplets[:limit]
    qs = [prompt_parts(t.ref_id, t.target_id, t.text, vocab) for t in triplets]
    paths = [synth_reasoning_path(corpus.scenes[t.ref_id], t.edit) for t in triplets]
    return qs, paths


def extract_rep(ws: Workspace) -> RAugRep:
    source = ws.cfg.rep.source
    if source not in ("backbone", "matcher"):
        raise PipelineError(f"rep.source must be backbone or matcher, got {source!r}")
    model = ws.load_model(f"{source}.ckpt")
    qs, paths = rep_samples(ws, ws.cfg.rep.max_samples)
    cs = [[ws.vocab.encode_words(p)] for p in paths]
    with ws.timed("rep_extraction"):
        rep = raugrep_from_samples(qs, cs, model, ws.corpus.image, fingerprint=ws.fp)
    rep.save(ws.path("raugrep.bin"))
    return rep


def load_results(ws: Workspace) -> list[RetrievalResult]:
    p = ws.path("retrieval.jsonl")
    if not p.exists():
        raise DataError(f"{p} not found; run the index stage first")
    return read_results(p)


def load_rep(ws: Workspace) -> RAugRep:
    p = ws.path("raugrep.bin")
    if not p.exists():
        raise DataError(f"{p} not found; run extract-rep first")
    return RAugRep.load(p)


def score_candidates(ws: Workspace, results: Sequence[RetrievalResult], backbone: Encoder,
                     rep: Optional[RAugRep], inj: InjectionConfig, top_n: int) -> list[np.ndarray]:
    corpus = ws.corpus
    by_id = {t.query_id: t for t in corpus.val}
    out = []
    for r in results:
        t = by_id[r.query_id]
        out.append(refinement_scores(backbone, ws.vocab, t.ref_id, t.text, r.ids[:top_n], corpus.image,
                                     rep, inj, renormalize=ws.cfg.refine.renormalize_yes_no))
    return out


def refine_stage(ws: Workspace, write: bool = True) -> list[RerankResult]:
    r = ws.cfg.refine
    results = load_results(ws)
    backbone = ws.load_model("backbone.ckpt")
    rep = load_rep(ws)
    with ws.timed("refinement_inference"):
        scores = score_candidates(ws, results, backbone, rep, injection_config(ws.cfg), r.top_n)
    reranked = [rerank(res, s, r.lam, r.normalize) for res, s in zip(results, scores)]
    if write:
        write_rerank(ws.path("rerank.jsonl"), reranked, fingerprint=ws.fp)
    return reranked


def metrics_for(ws: Workspace, rankings: Sequence[Sequence[str]]) -> MetricsReport:
    corpus = ws.corpus
    targets = [t.target_id for t in corpus.val]
    subsets = [corpus.subsets[t.query_id] for t in corpus.val]
    return evaluate(rankings, targets, subsets, ws.cfg.eval.ks, ws.cfg.eval.subset_ks)


def eval_stage(ws: Workspace) -> dict:
    report = {"config_fingerprint": ws.fp,
              "first_stage": metrics_for(ws, [r.ids for r in load_results(ws)]).to_dict()}
    if ws.path("rerank.jsonl").exists():
        report["refined"] = metrics_for(ws, [r.ids for r in read_rerank(ws.path("rerank.jsonl"))]).to_dict()
    ws.path("metrics.json").write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    return report


def run_all(ws: Workspace) -> dict:
    gen_data(ws)
    matcher = train_matcher(ws)
    pretrain_backbone(ws)
    first_stage(ws, matcher)
    extract_rep(ws)
    refine_stage(ws)
    return eval_stage(ws)


# ---------------------------------------------------------------- sweeps

SWEEP_PARAMS = ("alpha", "lam", "M", "inject_position")


@dataclass
class SweepRow:
    param: str
    value: object
    status: str
    metrics: Optional[MetricsReport] = None


def _guard(param, value, fn) -> SweepRow:
    try:
        return SweepRow(param, value, "ok", fn())
    except PipelineError as exc:
        log.warning("sweep %s=%s failed: %s", param, value, exc)
        return SweepRow(param, value, f"failed:{type(exc).__name__}")


def sweep(ws: Workspace, param: str, grid: Optional[Sequence] = None) -> list[SweepRow]:
    """Evaluate one grid point per value of ``param``, holding everything else at the config."""
    if param not in SWEEP_PARAMS:
        raise PipelineError(f"cannot sweep {param!r}; choose from {SWEEP_PARAMS}")
    grid = list(getattr(ws.cfg.sweep, param) if grid is None else grid)
    r = ws.cfg.refine
    rows = []
    if param == "M":
        for m in grid:
            def point(m=m):
                return metrics_for(ws, [x.ids for x in first_stage(ws, train_matcher(ws, M=int(m), checkpoint=None),
                                                                   write=False)])
            rows.append(_guard(param, m, point))
        return rows
    results = load_results(ws)
    backbone = ws.load_model("backbone.ckpt")
    rep = load_rep(ws)

    def refined(scores, lam):
        return metrics_for(ws, [rerank(res, s, lam, r.normalize).ids for res, s in zip(results, scores)])

    if param == "lam":
        cache = {}

        def point(lam):
            if "s" not in cache:
                cache["s"] = score_candidates(ws, results, backbone, rep, injection_config(ws.cfg), r.top_n)
            return refined(cache["s"], float(lam))
        rows = [_guard(param, lam, lambda lam=lam: point(lam)) for lam in grid]
    elif param == "alpha":
        for a in grid:
            rows.append(_guard(param, a, lambda a=a: refined(
                score_candidates(ws, results, backbone, rep, injection_config(ws.cfg, alpha=float(a)), r.top_n),
                r.lam)))
    else:
        for pos in grid:
            rows.append(_guard(param, pos, lambda pos=pos: refined(
                score_candidates(ws, results, backbone, rep, injection_config(ws.cfg, layers=str(pos)), r.top_n),
                r.lam)))
    return rows


def sweep_csv(rows: Sequence[SweepRow], cfg: PipelineConfig, fingerprint: str) -> str:
    cols = [f"R@{k}" for k in sorted(cfg.eval.ks)] + [f"Rs@{k}" for k in sorted(cfg.eval.subset_ks)] + ["R_mean"]
    buf = io.StringIO()
    buf.write(f"# config_fingerprint: {fingerprint}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["param", "value", "status"] + cols)
    for row in rows:
        vals = row.metrics.columns() if row.metrics else {}
        w.writerow([row.param, row.value, row.status] + [repr(vals[c]) if c in vals else "" for c in cols])
    return buf.getvalue()


def run_sweep(ws: Workspace, param: str, grid: Optional[Sequence] = None) -> Path:
    rows = sweep(ws, param, grid)
    out = ws.path(f"sweep_{param}.csv")
    out.write_text(sweep_csv(rows, ws.cfg, ws.fp))
    return out


# ---------------------------------------------------------------- projection

def projection(ws: Workspace, n_samples: int = 100, layer: int = -1) -> tuple[list, np.ndarray]:
    """Joint PCA of last-token states for q, q+c (reasoning path) and q+n (length-matched noise)."""
    model = ws.load_model(f"{ws.cfg.rep.source}.ckpt")
    qs, paths = rep_samples(ws, n_samples)
    rng = np.random.default_rng(ws.cfg.seed)
    sep = ws.vocab.sep_id
    with_c = [join_parts(q, [ws.vocab.encode_words(p)], sep_id=sep) for q, p in zip(qs, paths)]
    noise = [noise_text(len(ws.vocab.encode_words(p)), ws.vocab, rng) for p in paths]
    with_n = [join_parts(q, [ws.vocab.encode_words(z)], sep_id=sep) for q, z in zip(qs, noise)]
    groups = {name: layer_reps(model, items, ws.corpus.image)[:, layer, :]
              for name, items in (("q", qs), ("q+c", with_c), ("q+n", with_n))}
    return project_reps(groups)


def write_projection(ws: Workspace, n_samples: int = 100, layer: int = -1) -> Path:
    labels, coords = projection(ws, n_samples, layer)
    out = ws.path("projection.csv")
    out.write_text(f"# config_fingerprint: {ws.fp}\n" + projection_csv(labels, coords))
    return out


# ---------------------------------------------------------------- cost accounting

def ranker_epoch_seconds(ws: Workspace, n_queries: int = 20, top_k: int = 10) -> float:
    """Time one yes/no fine-tuning pass of the backbone over top-k pairs of ``n_queries``
    training queries, extrapolated to the whole training split.  Cost stub only: the
    updated weights are discarded."""
    corpus = ws.corpus
    matcher = ws.load_model("matcher.ckpt")
    backbone = ws.load_model("backbone.ckpt")
    train_q = corpus.train[:n_queries]
    if not train_q:
        raise DataError("no training queries to time")
    targets = sorted({t.target_id for t in corpus.train})
    yes, no = ws.vocab.id("yes"), ws.vocab.id("no")
    t0 = time.perf_counter()
    index = Index.build(matcher, targets, corpus.image)
    q = encode_batch(matcher, [query_parts(t.text, t.ref_id, ws.vocab) for t in train_q], corpus.image)
    results = retrieve_all(q, index, min(top_k, len(index)), [t.query_id for t in train_q])
    opt = AdamW(backbone.parameters(), lr=1e-4)
    for t, r in zip(train_q, results):
        items = [prompt_parts(t.ref_id, c, t.text, ws.vocab) for c in r.ids]
        labels = np.array([yes if c == t.target_id else no for c in r.ids])
        opt.zero_grad()
        _, logits = backbone.run(items, corpus.image)
        loss = scale(mean(pick(log_softmax(logits), labels)), -1.0)
        loss.backward()
        opt.step()
    return (time.perf_counter() - t0) * len(corpus.train) / len(train_q)


def refinement_seconds(ws: Workspace, top_n: int, n_queries: int = 10) -> float:
    """Wall-clock seconds to rescore ``top_n`` candidates for ``n_queries`` queries."""
    results = load_results(ws)[:n_queries]
    backbone = ws.load_model("backbone.ckpt")
    rep = load_rep(ws)
    t0 = time.perf_counter()
    score_candidates(ws, results, backbone, rep, injection_config(ws.cfg), top_n)
    return time.perf_counter() - t0


def cost_report(ws: Workspace, tr_queries: int = 20, scaling: Sequence[int] = ()) -> dict:
    """Stage times arranged as training-based ranking (TR) versus training-free refinement (TFR)."""
    t = ws.timings()
    needed = ("matcher_training", "rep_extraction", "refinement_inference")
    missing = [k for k in needed if k not in t]
    if missing:
        raise DataError(f"no timing recorded for {missing}; run those stages first")
    inference = t["refinement_inference"]
    tr_epoch = ranker_epoch_seconds(ws, tr_queries)
    report = {
        "config_fingerprint": ws.fp,
        "stages": t,
        "paradigms": [
            {"name": "TR", "training_seconds": tr_epoch, "inference_seconds": inference,
             "total_seconds": tr_epoch + inference, "note": "one ranker epoch, extrapolated"},
            {"name": "TFR", "training_seconds": 0.0, "extraction_seconds": t["rep_extraction"],
             "inference_seconds": inference, "total_seconds": t["rep_extraction"] + inference},
        ],
    }
    if scaling:
        report["scaling"] = [{"top_n": int(n), "seconds": refinement_seconds(ws, int(n))} for n in scaling]
    ws.path("cost.json").write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    return report
