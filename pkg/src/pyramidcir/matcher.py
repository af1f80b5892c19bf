"""Contrastive matching model and exact first-stage retrieval."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .encoder import Encoder, EncoderConfig, Representation, save_checkpoint
from .errors import ConfigError, DataError, DimensionError, InputError, NumericError, ParameterError
from .optim import AdamW
from .tensor import Tensor, l2_normalize, log_softmax, matmul, mean, no_grad, pick, scale, take_rows, transpose
from .text import ImageRef, Part, Vocabulary

log = logging.getLogger(__name__)

INDEX_MAGIC = b"CIDX"
INDEX_VERSION = 1


@dataclass
class TrainConfig:
    tau: float = 0.005
    batch_size: int = 32
    lr: float = 4e-5
    epochs: int = 2
    seed: int = 0
    weight_decay: float = 0.01
    clip_norm: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ParameterError(f"temperature must be positive, got {self.tau}")
        if self.batch_size < 2:
            raise ConfigError("in-batch negatives need batch_size >= 2")
        if self.lr < 0 or self.epochs < 0:
            raise ConfigError("lr and epochs must be non-negative")


def query_parts(text: str, ref_id: str, vocab: Vocabulary) -> list[Part]:
    """Composed query input: reference image, separator, modification text."""
    return [ImageRef(ref_id), [vocab.sep_id] + vocab.encode_words(text)]


def target_parts(image_id: str) -> list[Part]:
    return [ImageRef(image_id)]


def _reps(model: Encoder, items, image_lookup) -> Tensor:
    states, _ = model.run(items, image_lookup)
    return l2_normalize(states.last_token(model.cfg.n_layers - 1))


def encode_batch(model: Encoder, items: Sequence[Sequence[Part]], image_lookup, batch_size: int = 256) -> np.ndarray:
    """Unit-norm last-layer last-token vectors for many inputs, without gradients."""
    out = []
    with no_grad():
        for i in range(0, len(items), batch_size):
            out.append(_reps(model, items[i:i + batch_size], image_lookup).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.cfg.D))


def encode_query(triplet, model: Encoder, vocab: Vocabulary, image_lookup) -> Representation:
    vec = encode_batch(model, [query_parts(triplet.text, triplet.ref_id, vocab)], image_lookup)[0]
    return Representation(vec, "query", model.cfg.n_layers - 1)


def encode_target(image_id: str, model: Encoder, image_lookup) -> Representation:
    vec = encode_batch(model, [target_parts(image_id)], image_lookup)[0]
    return Representation(vec, "target", model.cfg.n_layers - 1)


def info_nce(queries, targets, tau: float) -> Tensor:
    """Mean over i of -log softmax_j(q_i . t_j / tau)[i]."""
    q = queries if isinstance(queries, Tensor) else Tensor(queries)
    t = targets if isinstance(targets, Tensor) else Tensor(targets)
    if q.ndim != 2 or q.shape != t.shape:
        raise DimensionError(f"info_nce: query batch {list(q.shape)} vs target batch {list(t.shape)}")
    n = q.shape[0]
    if n < 2:
        raise ConfigError("info_nce needs at least two pairs for in-batch negatives")
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    for name, x in (("query", q), ("target", t)):
        norms = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=1))
        if np.abs(norms - 1.0).max() > 1e-5:
            raise InputError(f"info_nce: {name} rows must be unit-norm")
    logp = log_softmax(matmul(q, transpose(t)), temperature=tau)
    return scale(mean(pick(logp, np.arange(n))), -1.0)


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)  # (epoch, step, loss)
    epochs: list = field(default_factory=list)  # mean loss per epoch

    def to_dict(self) -> dict:
        return {"steps": self.steps, "epochs": self.epochs}


def train(triplets: Sequence, image_lookup: Callable[[str], np.ndarray], model_cfg: EncoderConfig,
          cfg: TrainConfig, vocab: Vocabulary, model: Optional[Encoder] = None,
          checkpoint: str | Path | None = None) -> tuple[Encoder, TrainLog]:
    """InfoNCE training over (composed query, target image) pairs with in-batch negatives."""
    if not triplets:
        raise InputError("cannot train on an empty corpus")
    if len(triplets) < 2:
        raise ConfigError("need at least two triplets for in-batch negatives")
    model = model or Encoder(model_cfg, seed=cfg.seed)
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
    rng = np.random.default_rng(cfg.seed)
    bs = min(cfg.batch_size, len(triplets))
    tlog = TrainLog()
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(triplets))
        losses = []
        for s in range(0, len(order) - bs + 1, bs):
            batch = [triplets[i] for i in order[s:s + bs]]
            items = [query_parts(t.text, t.ref_id, vocab) for t in batch] + [target_parts(t.target_id) for t in batch]
            opt.zero_grad()
            reps = _reps(model, items, image_lookup)
            loss = info_nce(take_rows(reps, np.arange(bs)), take_rows(reps, np.arange(bs, 2 * bs)), cfg.tau)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"training diverged at epoch {epoch} step {step}: loss={value}")
            loss.backward()
            opt.step()
            losses.append(value)
            tlog.steps.append((epoch, step, value))
            step += 1
        tlog.epochs.append(float(np.mean(losses)))
        log.info("epoch %d mean loss %.4f", epoch, tlog.epochs[-1])
    if checkpoint is not None:
        save_checkpoint(checkpoint, model, meta={"role": "matcher", "vocab": vocab.itos,
                                                 "train": cfg.__dict__, "log": tlog.to_dict()})
    return model, tlog


# ---------------------------------------------------------------- index and retrieval

@dataclass
class Index:
    ids: list
    vectors: np.ndarray  # (count, D), unit rows

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or len(self.ids) != self.vectors.shape[0]:
            raise DimensionError("index ids and vectors disagree")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("index ids must be unique")
        # rank of each id in ascending order, for tie-breaking
        self._id_rank = np.empty(len(self.ids), dtype=np.int64)
        self._id_rank[np.argsort(np.asarray(self.ids, dtype=object), kind="stable")] = np.arange(len(self.ids))

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def build(cls, model: Encoder, ids: Sequence[str], image_lookup) -> "Index":
        return cls(list(ids), encode_batch(model, [target_parts(i) for i in ids], image_lookup))

    # "CIDX" | u32 version | u32 count | u32 D | u32 fp_len | fingerprint | f64 vectors | ids
    # where each id is u16 length + utf-8 bytes.
    def save(self, path, fingerprint: str = "") -> None:
        fp = fingerprint.encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(INDEX_MAGIC + struct.pack("<IIII", INDEX_VERSION, len(self), self.vectors.shape[1], len(fp)))
            fh.write(fp)
            fh.write(self.vectors.astype("<f8").tobytes())
            for i in self.ids:
                b = i.encode("utf-8")
                fh.write(struct.pack("<H", len(b)) + b)

    @classmethod
    def load(cls, path) -> "Index":
        raw = Path(path).read_bytes()
        if raw[:4] != INDEX_MAGIC:
            raise DataError(f"{path}: not an index file")
        version, count, D, fplen = struct.unpack("<IIII", raw[4:20])
        if version != INDEX_VERSION:
            raise DataError(f"{path}: unsupported index version {version}")
        off = 20 + fplen
        vecs = np.frombuffer(raw[off:off + 8 * count * D], dtype="<f8").reshape(count, D).copy()
        off += 8 * count * D
        ids = []
        for _ in range(count):
            (n,) = struct.unpack("<H", raw[off:off + 2])
            ids.append(raw[off + 2:off + 2 + n].decode("utf-8"))
            off += 2 + n
        return cls(ids, vecs)


@dataclass
class RetrievalResult:
    query_id: str
    ids: list
    scores: list
    top_n: int

    def to_dict(self) -> dict:
        return {"query_id": self.query_id, "ids": list(self.ids), "scores": [float(s) for s in self.scores],
                "top_n": self.top_n}


def rank_scores(scores: np.ndarray, id_rank: np.ndarray) -> np.ndarray:
    """Order by descending score, ties by ascending id."""
    return np.lexsort((id_rank, -scores))


def retrieve(query, index: Index, top_n: int, query_id: str = "") -> RetrievalResult:
    """Exact dot-product ranking of every indexed candidate; keeps the first ``top_n``."""
    if len(index) == 0:
        raise InputError("cannot retrieve from an empty index")
    if not 1 <= top_n <= len(index):
        raise ParameterError(f"top_n must be in [1, {len(index)}], got {top_n}")
    q = np.asarray(query.vector if isinstance(query, Representation) else query, dtype=np.float64)
    if q.shape != (index.vectors.shape[1],):
        raise DimensionError(f"query dim {q.shape} does not match index dim {index.vectors.shape[1]}")
    scores = index.vectors @ q
    order = rank_scores(scores, index._id_rank)[:top_n]
    return RetrievalResult(query_id, [index.ids[i] for i in order], scores[order].tolist(), top_n)


def retrieve_all(queries: np.ndarray, index: Index, top_n: int, query_ids: Sequence[str]) -> list[RetrievalResult]:
    return [retrieve(q, index, top_n, qid) for q, qid in zip(queries, query_ids)]


def write_results(path, results: Sequence[RetrievalResult], fingerprint: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": "cir-retrieval", "version": 1, "config_fingerprint": fingerprint},
                            sort_keys=True) + "\n")
        for r in results:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_results(path) -> list[RetrievalResult]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    if header.get("format") != "cir-retrieval":
        raise DataError(f"{path}: not a retrieval result file")
    out = []
    for line in lines[1:]:
        d = json.loads(line)
        out.append(RetrievalResult(d["query_id"], d["ids"], d["scores"], d["top_n"]))
    return out
