"""Reasoning-augmented representations: extraction, averaging, injection, projection.

For a training sample with question ``q`` and reasoning path ``c`` the model is
run on ``q`` and on ``q <sep> c``; the per-layer difference of last-token
states, averaged over the training set, is the steering vector p_L.  At
inference the token-0 state of each selected layer is nudged along p_L and
rescaled back to its original norm.
"""

from __future__ import annotations

import csv
import hashlib
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .encoder import Encoder
from .errors import (ConfigError, DataError, DegenerateInputError, DimensionError, InputError,
                     LengthError, NumericError, ParameterError)
from .tensor import no_grad
from .text import Part, join_parts

REP_MAGIC = b"RAUG"
REP_VERSION = 1


@dataclass(frozen=True)
class InjectionConfig:
    alpha: float = 0.6
    layers: str = "all"  # first | middle | last | all, or a layer id

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ParameterError(f"injection strength must be a finite value >= 0, got {self.alpha}")

    def layer_ids(self, n_layers: int) -> list[int]:
        sel = self.layers
        if isinstance(sel, str) and sel.lstrip("-").isdigit():
            sel = int(sel)
        if isinstance(sel, int):
            if not 0 <= sel < n_layers:
                raise ConfigError(f"layer {sel} outside [0, {n_layers})")
            return [sel]
        table = {"first": [0], "middle": [n_layers // 2], "last": [n_layers - 1], "all": list(range(n_layers))}
        try:
            return table[sel.lower()]
        except KeyError:
            raise ConfigError(f"unknown layer selection {sel!r}") from None


@dataclass(frozen=True)
class RAugRep:
    vectors: np.ndarray  # (n_layers, D)
    sample_count: int
    fingerprint: str = ""

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2:
            raise DimensionError(f"expected (n_layers, D) vectors, got shape {v.shape}")
        if self.sample_count < 1:
            raise InputError("a representation needs at least one sample")
        if not np.isfinite(v).all():
            raise NumericError("representation contains non-finite values")
        object.__setattr__(self, "vectors", v)

    @property
    def n_layers(self) -> int:
        return self.vectors.shape[0]

    @property
    def D(self) -> int:
        return self.vectors.shape[1]

    def layer(self, l: int) -> np.ndarray:
        return self.vectors[l]

    # "RAUG" | u32 version | u32 n_layers | u32 D | u32 sample_count | u32 fp_len | fingerprint
    # | f64 little-endian vectors, layer-major
    def save(self, path) -> None:
        fp = self.fingerprint.encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(REP_MAGIC + struct.pack("<IIIII", REP_VERSION, self.n_layers, self.D,
                                             self.sample_count, len(fp)))
            fh.write(fp)
            fh.write(self.vectors.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "RAugRep":
        raw = Path(path).read_bytes()
        if raw[:4] != REP_MAGIC:
            raise DataError(f"{path}: not a representation file")
        version, n, d, count, fplen = struct.unpack("<IIIII", raw[4:24])
        if version != REP_VERSION:
            raise DataError(f"{path}: unsupported representation version {version}")
        fp = raw[24:24 + fplen].decode("utf-8")
        body = raw[24 + fplen:]
        if len(body) != 8 * n * d:
            raise DataError(f"{path}: truncated representation body")
        return cls(np.frombuffer(body, dtype="<f8").reshape(n, d).copy(), count, fp)


def layer_reps(model: Encoder, items: Sequence[Sequence[Part]], image_lookup,
               batch_size: int = 32) -> np.ndarray:
    """Last-token states of every layer, shape (len(items), n_layers, D), in float64."""
    out = []
    with no_grad():
        for s in range(0, len(items), batch_size):
            chunk = items[s:s + batch_size]
            try:
                states, _ = model.run(chunk, image_lookup)
            except LengthError as exc:
                raise LengthError(f"samples {s}..{s + len(chunk) - 1}: {exc}") from None
            rows = np.arange(len(chunk))
            last = states.lengths - 1
            out.append(np.stack([h.data[rows, last, :] for h in states.hidden], axis=1).astype(np.float64))
    return np.concatenate(out, axis=0)


def extract_pair_reps(question: Sequence[Part], path: Sequence[Part], model: Encoder,
                      image_lookup) -> tuple[np.ndarray, np.ndarray]:
    """(R^q, R^c), each (n_layers, D), for one question and its reasoning path."""
    rq, rc = extract_many([question], [path], model, image_lookup)
    return rq[0], rc[0]


def extract_many(questions: Sequence[Sequence[Part]], paths: Sequence[Sequence[Part]], model: Encoder,
                 image_lookup, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    if len(questions) != len(paths):
        raise InputError("every question needs exactly one reasoning path")
    sep = model.cfg.sep_id
    joined = [join_parts(q, c, sep_id=sep) for q, c in zip(questions, paths)]
    rq = layer_reps(model, list(questions), image_lookup, batch_size)
    rc = layer_reps(model, joined, image_lookup, batch_size)
    return rq, rc


def build_raugrep(diffs: np.ndarray, fingerprint: str = "") -> RAugRep:
    """Average per-sample differences (n_samples, n_layers, D) into one vector per layer."""
    d = np.asarray(diffs, dtype=np.float64)
    if d.ndim != 3:
        raise DimensionError(f"expected (samples, layers, D) differences, got shape {d.shape}")
    if d.shape[0] == 0:
        raise InputError("cannot build a representation from zero samples")
    if d.shape[0] == 1:
        return RAugRep(d[0].copy(), 1, fingerprint)
    return RAugRep(_pairwise_sum(d) / d.shape[0], d.shape[0], fingerprint)


def _pairwise_sum(d: np.ndarray) -> np.ndarray:
    # fixed-shape tree reduction so the result does not depend on chunking
    while d.shape[0] > 1:
        if d.shape[0] % 2:
            d = np.concatenate([d[:-2], (d[-2] + d[-1])[None]], axis=0)
        else:
            d = d[0::2] + d[1::2]
    return d[0]


def raugrep_from_samples(questions, paths, model: Encoder, image_lookup, fingerprint: str = "") -> RAugRep:
    if not questions:
        raise InputError("cannot build a representation from zero samples")
    rq, rc = extract_many(questions, paths, model, image_lookup)
    return build_raugrep(rc - rq, fingerprint)


def inject(h: np.ndarray, p: np.ndarray, alpha: float) -> np.ndarray:
    """Add ``alpha * p`` to ``h`` and restore the original L2 norm.

    Works on a single vector or a batch of row vectors.
    """
    h = np.asarray(h)
    p = np.asarray(p)
    if h.shape[-1] != p.shape[-1]:
        raise DimensionError(f"state dim {h.shape[-1]} != steering dim {p.shape[-1]}")
    if not (np.isfinite(h).all() and np.isfinite(p).all() and np.isfinite(alpha)):
        raise NumericError("inject: non-finite input")
    norm = _norm(h)
    if (norm == 0).any():
        raise DegenerateInputError("inject: hidden state has zero norm")
    if alpha == 0:
        return h.copy()  # exact no-op, including the sign of zeros
    shifted = h + alpha * p
    new_norm = _norm(shifted)
    if (new_norm == 0).any():
        raise DegenerateInputError("inject: steering cancels the hidden state exactly")
    return shifted * (norm / new_norm)


def _norm(x: np.ndarray) -> np.ndarray:
    # scale by the largest entry first so tiny or huge vectors do not under/overflow
    m = np.abs(x).max(axis=-1, keepdims=True)
    safe = np.where(m > 0, m, 1.0)
    return m * np.linalg.norm(x / safe, axis=-1, keepdims=True)


def make_hooks(rep: RAugRep, cfg: InjectionConfig, n_layers: int) -> dict[int, Callable]:
    """Per-layer forward hooks that inject ``rep`` at token 0."""
    if rep.n_layers != n_layers:
        raise DimensionError(f"representation has {rep.n_layers} layers, model has {n_layers}")
    hooks = {}
    for l in cfg.layer_ids(n_layers):
        vec = rep.layer(l)
        hooks[l] = lambda h, vec=vec: inject(h, vec.astype(h.dtype), cfg.alpha)
    return hooks


# ---------------------------------------------------------------- projection

def pca_2d(points: np.ndarray) -> np.ndarray:
    """Deterministic 2-D PCA: centre, SVD, flip each axis so its largest loading is positive."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise InputError("projection needs at least three points")
    x = x - x.mean(axis=0)
    if not np.any(x):
        return np.zeros((x.shape[0], 2))
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    axes = vt[:2]
    for a in axes:
        if a[np.argmax(np.abs(a))] < 0:
            a *= -1
    coords = x @ axes.T
    if coords.shape[1] < 2:
        coords = np.pad(coords, ((0, 0), (0, 2 - coords.shape[1])))
    return coords


def project_reps(groups: Mapping[str, np.ndarray]) -> tuple[list[str], np.ndarray]:
    """Project labelled point sets jointly; returns per-point labels and (n, 2) coordinates."""
    labels, blocks = [], []
    for name, pts in groups.items():
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        labels += [name] * pts.shape[0]
        blocks.append(pts)
    return labels, pca_2d(np.concatenate(blocks, axis=0))


def projection_csv(labels: Sequence[str], coords: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "x", "y"])
    for lab, (x, y) in zip(labels, coords):
        w.writerow([lab, repr(float(x)), repr(float(y))])
    return buf.getvalue()


def separation(coords: np.ndarray, labels: Sequence[str], a: str, b: str) -> tuple[float, float]:
    """Centroid distance between groups ``a`` and ``b`` and their mean within-group spread."""
    lab = np.asarray(labels)
    pa, pb = coords[lab == a], coords[lab == b]
    if not len(pa) or not len(pb):
        raise InputError(f"groups {a!r} and {b!r} must both be non-empty")
    ca, cb = pa.mean(axis=0), pb.mean(axis=0)
    spread = np.concatenate([np.linalg.norm(pa - ca, axis=1), np.linalg.norm(pb - cb, axis=1)]).mean()
    return float(np.linalg.norm(ca - cb)), float(spread)


def fingerprint_of(*chunks: str) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(c.encode("utf-8"))
        h.update(b"\0")
    return h.hexdigest()[:16]
