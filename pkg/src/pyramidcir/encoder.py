"""Toy causal vision-language transformer.

A sequence is a list of parts (text id runs and image references).  Images go
through the pyramid patch embedding, text through a token table; the two are
interleaved, given a learned position embedding, and run through pre-norm
transformer blocks.  The head (final norm + unembedding) produces next-token
logits at the last real position of every item.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, DimensionError, InputError, LengthError
from .patcher import PatchEmbedding, PyramidConfig
from .tensor import (Tensor, add, concat, gelu, layer_norm, matmul, replace_first_token,
                     reshape, row_softmax, scale, take_rows, transpose)
from .text import ImageRef, Part

CKPT_MAGIC = b"PCKP"
CKPT_VERSION = 1
_MASK_VALUE = -1e9

Hook = Callable[[np.ndarray], Optional[np.ndarray]]


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    yes_id: int
    no_id: int
    pad_id: int
    sep_id: int
    n_layers: int = 2
    D: int = 64
    n_heads: int = 4
    max_seq_len: int = 256
    mlp_ratio: int = 4
    P: int = 4
    M: int = 2
    image_shape: tuple = (16, 16, 3)
    renormalize_yes_no: bool = False
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(self.image_shape))
        if self.D % self.n_heads:
            raise ConfigError(f"D={self.D} is not divisible by n_heads={self.n_heads}")
        if self.yes_id == self.no_id:
            raise ConfigError("YES and NO token ids must differ")
        for name in ("yes_id", "no_id", "pad_id", "sep_id"):
            if not 0 <= getattr(self, name) < self.vocab_size:
                raise ConfigError(f"{name} outside vocabulary")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        self.pyramid.validate(*self.image_shape[:2])

    @property
    def pyramid(self) -> PyramidConfig:
        return PyramidConfig(self.P, self.M, self.D)

    def layer_index(self, which: str | int) -> list[int]:
        """Map First/Middle/Last/All (or an int) to layer ids."""
        if isinstance(which, int):
            if not 0 <= which < self.n_layers:
                raise ConfigError(f"layer {which} outside [0, {self.n_layers})")
            return [which]
        key = which.lower()
        if key == "first":
            return [0]
        if key == "middle":
            return [self.n_layers // 2]
        if key == "last":
            return [self.n_layers - 1]
        if key == "all":
            return list(range(self.n_layers))
        raise ConfigError(f"unknown layer selection {which!r}")


@dataclass
class LayerStates:
    hidden: list  # per layer, Tensor (B, T, D), block outputs
    final: Tensor  # final-norm states (B, T, D)
    lengths: np.ndarray  # real token count per item

    def last_token(self, layer: int) -> Tensor:
        """Differentiable (B, D) gather of the last real token at ``layer``."""
        h = self.hidden[layer]
        B, T, D = h.shape
        rows = np.arange(B) * T + (self.lengths - 1)
        return take_rows(reshape(h, (B * T, D)), rows)


@dataclass
class Representation:
    vector: np.ndarray
    source: str = "query"
    layer: int = -1


@dataclass
class PackedBatch:
    index: np.ndarray  # (B, T) rows into [visual rows ; token table]
    lengths: np.ndarray
    images: np.ndarray  # (n_images, H, W, C)
    image_ids: list = field(default_factory=list)


class Encoder:
    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype).type
        rng = np.random.default_rng(seed)
        D, V, F = cfg.D, cfg.vocab_size, cfg.D * cfg.mlp_ratio
        self.patch = PatchEmbedding(cfg.pyramid, *cfg.image_shape, rng=rng, dtype=dtype)

        def p(name, arr):
            return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True, name=name)

        params = {
            "tok_emb": p("tok_emb", rng.normal(0, 0.02, (V, D))),
            "pos_emb": p("pos_emb", rng.normal(0, 0.02, (cfg.max_seq_len, D))),
        }
        std = 1 / np.sqrt(D)
        for l in range(cfg.n_layers):
            pre = f"blocks.{l}."
            for n in ("ln1", "ln2"):
                params[pre + n + ".g"] = p(pre + n + ".g", np.ones(D))
                params[pre + n + ".b"] = p(pre + n + ".b", np.zeros(D))
            for n in ("wq", "wk", "wv", "wo"):
                params[pre + n] = p(pre + n, rng.normal(0, std, (D, D)))
            for n in ("bq", "bk", "bv", "bo"):
                params[pre + n] = p(pre + n, np.zeros(D))
            params[pre + "w1"] = p(pre + "w1", rng.normal(0, std, (D, F)))
            params[pre + "b1"] = p(pre + "b1", np.zeros(F))
            params[pre + "w2"] = p(pre + "w2", rng.normal(0, 1 / np.sqrt(F), (F, D)))
            params[pre + "b2"] = p(pre + "b2", np.zeros(D))
        params["ln_f.g"] = p("ln_f.g", np.ones(D))
        params["ln_f.b"] = p("ln_f.b", np.zeros(D))
        params["head.w"] = p("head.w", rng.normal(0, std, (D, V)))
        params["head.b"] = p("head.b", np.zeros(V))
        params.update(self.patch.named_parameters())
        self.params: dict[str, Tensor] = dict(sorted(params.items()))

    # -------------------------------------------------------------- parameters
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ConfigError("parameter names do not match the model configuration")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ConfigError(f"parameter {k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.params[k].data.dtype)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    @property
    def tokens_per_image(self) -> int:
        return self.patch.tokens_per_image

    # -------------------------------------------------------------- input packing
    def pack(self, items: Sequence[Sequence[Part]], image_lookup: Callable[[str], np.ndarray]) -> PackedBatch:
        if not items:
            raise InputError("empty batch")
        T_img = self.tokens_per_image
        image_ids: list[str] = []
        slot: dict[str, int] = {}
        rows_per_item = []
        lengths = []
        for n, parts in enumerate(items):
            rows = []
            for part in parts:
                if isinstance(part, ImageRef):
                    if part.image_id not in slot:
                        slot[part.image_id] = len(image_ids)
                        image_ids.append(part.image_id)
                    base = slot[part.image_id] * T_img
                    rows.extend(range(base, base + T_img))
                else:
                    rows.extend(-1 - int(t) for t in part)  # text ids resolved below
            if not rows:
                raise InputError(f"batch item {n} is empty")
            if len(rows) > self.cfg.max_seq_len:
                raise LengthError(f"batch item {n}: {len(rows)} tokens exceed max_seq_len {self.cfg.max_seq_len}")
            rows_per_item.append(rows)
            lengths.append(len(rows))
        n_vis = len(image_ids) * T_img
        T = max(lengths)
        index = np.full((len(items), T), n_vis + self.cfg.pad_id, dtype=np.int64)
        for n, rows in enumerate(rows_per_item):
            r = np.asarray(rows, dtype=np.int64)
            text = r < 0
            r[text] = n_vis + (-1 - r[text])
            index[n, :len(r)] = r
        if (index >= n_vis + self.cfg.vocab_size).any():
            raise DataError("token id outside vocabulary")
        if image_ids:
            images = np.stack([np.asarray(image_lookup(i)) for i in image_ids])
        else:
            images = np.zeros((0,) + tuple(self.cfg.image_shape))
        return PackedBatch(index, np.asarray(lengths, dtype=np.int64), images, image_ids)

    # -------------------------------------------------------------- forward
    def _embed(self, batch: PackedBatch) -> Tensor:
        tok = self.params["tok_emb"]
        if len(batch.image_ids):
            vis = self.patch.embed_batch(batch.images)
            n, t, d = vis.shape
            table = concat([reshape(vis, (n * t, d)), tok], axis=0)
        else:
            table = tok
        x = take_rows(table, batch.index)
        T = batch.index.shape[1]
        pos = take_rows(self.params["pos_emb"], np.broadcast_to(np.arange(T), batch.index.shape))
        return add(x, pos)

    def _block(self, x: Tensor, l: int, mask: np.ndarray) -> Tensor:
        P = self.params
        pre = f"blocks.{l}."
        B, T, D = x.shape
        H = self.cfg.n_heads
        dh = D // H
        h = layer_norm(x, P[pre + "ln1.g"], P[pre + "ln1.b"])

        def heads(w, b, axes=(0, 2, 1, 3)):
            y = add(matmul(h, P[pre + w]), P[pre + b])
            return transpose(reshape(y, (B, T, H, dh)), axes)

        q = scale(heads("wq", "bq"), 1.0 / np.sqrt(dh))
        k, v = heads("wk", "bk", (0, 2, 3, 1)), heads("wv", "bv")
        att = row_softmax(matmul(q, k), mask=mask)
        ctx = reshape(transpose(matmul(att, v), (0, 2, 1, 3)), (B, T, D))
        x = add(x, add(matmul(ctx, P[pre + "wo"]), P[pre + "bo"]))
        h = layer_norm(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
        m = gelu(add(matmul(h, P[pre + "w1"]), P[pre + "b1"]))
        return add(x, add(matmul(m, P[pre + "w2"]), P[pre + "b2"]))

    def forward(self, batch: PackedBatch, hooks: Optional[Mapping[int, Hook]] = None,
                all_logits: bool = False) -> tuple[LayerStates, Tensor]:
        """Run the model.

        ``hooks`` maps a layer id to a callable that receives the (B, D) token-0
        states after that layer's block and may edit them in place or return a
        replacement.  Returns the layer states and next-token logits, (B, V) at
        each item's last real position, or (B, T, V) with ``all_logits``.
        """
        x = self._embed(batch)
        B, T, D = x.shape
        mask = np.triu(np.full((T, T), _MASK_VALUE, dtype=x.data.dtype), k=1)
        hidden = []
        for l in range(self.cfg.n_layers):
            x = self._block(x, l, mask)
            if hooks and l in hooks:
                row0 = x.data[:, 0, :].copy()
                new = hooks[l](row0)
                x = replace_first_token(x, row0 if new is None else np.asarray(new, dtype=x.data.dtype))
            hidden.append(x)
        final = layer_norm(x, self.params["ln_f.g"], self.params["ln_f.b"])
        states = LayerStates(hidden, final, batch.lengths)
        if all_logits:
            src = final
        else:
            rows = np.arange(B) * T + (batch.lengths - 1)
            src = take_rows(reshape(final, (B * T, D)), rows)
        logits = add(matmul(src, self.params["head.w"]), self.params["head.b"])
        return states, logits

    def run(self, items, image_lookup, hooks=None, all_logits=False):
        return self.forward(self.pack(items, image_lookup), hooks=hooks, all_logits=all_logits)


# ---------------------------------------------------------------- read-outs

def last_token_rep(states: LayerStates, layer: int, item: int = 0, source: str = "query") -> Representation:
    if not -len(states.hidden) <= layer < len(states.hidden):
        raise InputError(f"layer {layer} outside the model's {len(states.hidden)} layers")
    n = int(states.lengths[item])
    if n < 1:
        raise InputError("empty sequence has no last token")
    vec = states.hidden[layer].data[item, n - 1, :].copy()
    return Representation(vec, source, layer % len(states.hidden))


def yes_probability(logits, cfg: EncoderConfig, renormalize: bool | None = None) -> np.ndarray:
    """Probability of the YES token at the final position.

    Full-vocabulary softmax by default; with ``renormalize`` only YES and NO compete.
    """
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    squeeze = z.ndim == 1
    z = np.atleast_2d(z)
    if z.shape[-1] != cfg.vocab_size:
        raise DimensionError(f"expected {cfg.vocab_size} logits, got {z.shape[-1]}")
    renorm = cfg.renormalize_yes_no if renormalize is None else renormalize
    if renorm:
        d = z[:, cfg.no_id] - z[:, cfg.yes_id]
        p = 1.0 / (1.0 + np.exp(d))
    else:
        m = z.max(axis=-1, keepdims=True)
        e = np.exp(z - m)
        p = e[:, cfg.yes_id] / e.sum(axis=-1)
    return p[0] if squeeze else p


# ---------------------------------------------------------------- checkpoint format
#
#   "PCKP" | u32 version | u32 header_len | header JSON (utf-8) | raw tensors
#
# The header holds the config, optional metadata and, per parameter in sorted
# name order, its shape and dtype; tensors follow contiguously, little-endian.

def save_checkpoint(path, model: Encoder, meta: dict | None = None) -> None:
    names = sorted(model.params)
    header = {
        "config": asdict(model.cfg),
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(model.params[n].shape),
                     "dtype": model.params[n].data.dtype.str} for n in names],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hbytes)) + hbytes)
        for n in names:
            arr = model.params[n].data
            fh.write(np.ascontiguousarray(arr.astype(arr.dtype.newbyteorder("<"))).tobytes())


def load_checkpoint(path) -> tuple[Encoder, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    cfg = EncoderConfig(**header["config"])
    model = Encoder(cfg)
    off = 12 + hlen
    state = {}
    for t in header["tensors"]:
        dt = np.dtype(t["dtype"])
        n = int(np.prod(t["shape"])) * dt.itemsize
        state[t["name"]] = np.frombuffer(raw[off:off + n], dtype=dt).reshape(t["shape"]).copy()
        off += n
    model.load_state_dict(state)
    return model, header["meta"]


def checkpoint_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
