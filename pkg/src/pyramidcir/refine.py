"""Training-free refinement: YES-probability rescoring of the top candidates and score fusion."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .backbone import prompt_parts
from .encoder import Encoder, yes_probability
from .errors import ConfigError, DataError, InputError, ParameterError
from .matcher import RetrievalResult
from .repe import InjectionConfig, RAugRep, make_hooks
from .tensor import no_grad
from .text import Vocabulary

NORMALIZATIONS = ("none", "minmax", "affine")


@dataclass(frozen=True)
class RefineConfig:
    lam: float = 0.06
    injection: InjectionConfig = field(default_factory=InjectionConfig)
    top_n: int = 100
    normalize: str = "minmax"
    batch_size: int = 50

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ParameterError(f"refinement strength must lie in [0, 1], got {self.lam}")
        if self.top_n < 1:
            raise ConfigError("top_n must be >= 1")
        if self.normalize not in NORMALIZATIONS:
            raise ConfigError(f"normalize must be one of {NORMALIZATIONS}, got {self.normalize!r}")


@dataclass
class ScoredCandidate:
    candidate_id: str
    s_m: float  # matching score on the fusion scale
    s_r: float
    s: float
    s_m_raw: float = 0.0  # cosine before normalization


def normalize_scores(s_m: np.ndarray, mode: str = "minmax") -> np.ndarray:
    s = np.asarray(s_m, dtype=np.float64)
    if mode == "none":
        return s.copy()
    if mode == "affine":
        return (s + 1.0) / 2.0
    if mode == "minmax":
        lo, hi = s.min(), s.max()
        return (s - lo) / (hi - lo) if hi > lo else np.zeros_like(s)
    raise ConfigError(f"unknown normalization {mode!r}")


def fuse(s_r, s_m, lam: float):
    """lam * s_r + (1 - lam) * s_m."""
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"refinement strength must lie in [0, 1], got {lam}")
    return lam * np.asarray(s_r, dtype=np.float64) + (1.0 - lam) * np.asarray(s_m, dtype=np.float64)


def refinement_scores(model: Encoder, vocab: Vocabulary, ref_id: str, text: str,
                      candidates: Sequence[str], image_lookup, rep: Optional[RAugRep] = None,
                      injection: Optional[InjectionConfig] = None, batch_size: int = 50,
                      renormalize: Optional[bool] = None) -> np.ndarray:
    """YES-probability for each (reference + text, candidate) prompt, with optional injection."""
    hooks = None
    if rep is not None:
        hooks = make_hooks(rep, injection or InjectionConfig(), model.cfg.n_layers)
    out = []
    with no_grad():
        for s in range(0, len(candidates), batch_size):
            items = [prompt_parts(ref_id, c, text, vocab) for c in candidates[s:s + batch_size]]
            _, logits = model.run(items, image_lookup, hooks=hooks)
            out.append(yes_probability(logits, model.cfg, renormalize))
    return np.concatenate(out) if out else np.zeros(0)


def refinement_score(model: Encoder, vocab: Vocabulary, ref_id: str, text: str, candidate: str,
                     image_lookup, rep: Optional[RAugRep] = None,
                     injection: Optional[InjectionConfig] = None) -> float:
    return float(refinement_scores(model, vocab, ref_id, text, [candidate], image_lookup, rep, injection)[0])


@dataclass
class RerankResult:
    query_id: str
    ids: list  # full ranking: re-sorted top block, then the untouched tail
    scored: list  # ScoredCandidate for the top block, in new order

    def to_dict(self) -> dict:
        return {"query_id": self.query_id, "ids": list(self.ids),
                "s_m": [c.s_m for c in self.scored], "s_r": [c.s_r for c in self.scored],
                "s": [c.s for c in self.scored], "s_m_raw": [c.s_m_raw for c in self.scored]}


def rerank(result: RetrievalResult, s_r: Sequence[float], lam: float,
           normalize: str = "minmax") -> RerankResult:
    """Re-sort the first ``len(s_r)`` candidates by fused score.

    Sort key is descending fused score, then descending s_r, then descending raw
    s_m, then ascending id.  With ``lam == 0`` the input order is kept as is.
    """
    s_r = np.asarray(s_r, dtype=np.float64)
    n = len(s_r)
    if n == 0 or n > len(result.ids) or n > len(result.scores):
        raise InputError(f"{result.query_id}: {n} refinement scores for {len(result.ids)} candidates")
    if not np.all((s_r >= 0) & (s_r <= 1)):
        raise InputError(f"{result.query_id}: refinement scores must lie in [0, 1]")
    raw = np.asarray(result.scores[:n], dtype=np.float64)
    s_m = normalize_scores(raw, normalize)
    s = fuse(s_r, s_m, lam)
    ids = list(result.ids[:n])
    if lam == 0:
        order = np.arange(n)
    else:
        order = sorted(range(n), key=lambda i: (-s[i], -s_r[i], -raw[i], ids[i]))
    scored = [ScoredCandidate(ids[i], float(s_m[i]), float(s_r[i]), float(s[i]), float(raw[i])) for i in order]
    return RerankResult(result.query_id, [c.candidate_id for c in scored] + list(result.ids[n:]), scored)


def write_rerank(path, results: Sequence[RerankResult], fingerprint: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": "cir-rerank", "version": 1, "config_fingerprint": fingerprint},
                            sort_keys=True) + "\n")
        for r in results:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_rerank(path) -> list[RerankResult]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or json.loads(lines[0]).get("format") != "cir-rerank":
        raise DataError(f"{path}: not a rerank report")
    out = []
    for line in lines[1:]:
        d = json.loads(line)
        scored = [ScoredCandidate(i, a, b, c, r) for i, a, b, c, r in
                  zip(d["ids"], d["s_m"], d["s_r"], d["s"], d["s_m_raw"])]
        out.append(RerankResult(d["query_id"], d["ids"], scored))
    return out
