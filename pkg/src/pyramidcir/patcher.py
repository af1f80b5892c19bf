"""Multi-scale pyramid patch tokenization.

Level ``i`` tiles the image with non-overlapping squares of side ``2**i * P``
in raster order.  Each level has its own linear embedding and position table,
and the embedded levels are concatenated finest-first.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .tensor import Tensor, add, matmul, reshape, take_rows, concat

IMAGE_MAGIC = b"CIMG"
IMAGE_VERSION = 1


@dataclass(frozen=True)
class PyramidConfig:
    P: int = 4
    M: int = 2
    D: int = 64
    # alternate reading of the level-size rule (rectangular 2^i*P x P patches); not implemented
    rectangular_levels: bool = False

    def __post_init__(self):
        if self.P < 1:
            raise ConfigError(f"patch size P must be >= 1, got {self.P}")
        if self.M < 1:
            raise ConfigError(f"pyramid depth M must be >= 1, got {self.M}")
        if self.D < 1:
            raise ConfigError(f"embedding dim D must be >= 1, got {self.D}")
        if self.rectangular_levels:
            raise NotImplementedError("rectangular pyramid levels are not supported")

    def side(self, level: int) -> int:
        return (2 ** level) * self.P

    def validate(self, H: int, W: int) -> None:
        for i in range(self.M):
            s = self.side(i)
            if H % s or W % s:
                raise ConfigError(
                    f"pyramid level {i}: patch side {s} does not divide image {H}x{W}")

    def patch_dim(self, level: int, C: int) -> int:
        return self.side(level) ** 2 * C


@dataclass
class Image:
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3:
            raise DataError(f"image must be H x W x C, got shape {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise DataError("pixel values must lie in [0, 1]")
        self.pixels = px

    @property
    def H(self) -> int:
        return self.pixels.shape[0]

    @property
    def W(self) -> int:
        return self.pixels.shape[1]

    @property
    def C(self) -> int:
        return self.pixels.shape[2]


@dataclass
class PatchLevel:
    level: int
    side: int
    patches: np.ndarray  # (count, side*side*C), raster order

    @property
    def count(self) -> int:
        return self.patches.shape[0]


@dataclass
class PatchSet:
    levels: list[PatchLevel]
    image_shape: tuple

    @property
    def total(self) -> int:
        return sum(lv.count for lv in self.levels)


@dataclass
class TokenMeta:
    source: str  # "visual" | "text"
    pyramid_level: int | None
    position: int


@dataclass
class TokenSequence:
    tokens: Tensor  # (n, D)
    meta: list[TokenMeta] = field(default_factory=list)

    def __len__(self) -> int:
        return self.tokens.shape[0]


def _as_pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, Image) else np.asarray(img)


def _patchify(px: np.ndarray, side: int) -> np.ndarray:
    """(..., H, W, C) -> (..., H/side * W/side, side*side*C) in raster order, channel-last."""
    *lead, H, W, C = px.shape
    gh, gw = H // side, W // side
    x = px.reshape(*lead, gh, side, gw, side, C)
    n = len(lead)
    x = np.moveaxis(x, n + 2, n + 1)  # (..., gh, gw, side, side, C)
    return x.reshape(*lead, gh * gw, side * side * C)


def _unpatchify(patches: np.ndarray, side: int, H: int, W: int, C: int) -> np.ndarray:
    gh, gw = H // side, W // side
    x = patches.reshape(gh, gw, side, side, C)
    x = np.moveaxis(x, 2, 1)
    return x.reshape(H, W, C)


def flatten_patches(img, cfg: PyramidConfig) -> PatchSet:
    px = _as_pixels(img)
    H, W, C = px.shape
    cfg.validate(H, W)
    levels = [PatchLevel(i, cfg.side(i), _patchify(px, cfg.side(i))) for i in range(cfg.M)]
    return PatchSet(levels, (H, W, C))


def unflatten_level(ps: PatchSet, level: int) -> np.ndarray:
    H, W, C = ps.image_shape
    lv = ps.levels[level]
    return _unpatchify(lv.patches, lv.side, H, W, C)


def token_count(cfg: PyramidConfig, H: int, W: int) -> int:
    cfg.validate(H, W)
    return sum((H * W) // cfg.side(i) ** 2 for i in range(cfg.M))


class PatchEmbedding:
    """Per-level linear maps ``W_i, b_i`` and position tables ``pos_i``."""

    def __init__(self, cfg: PyramidConfig, H: int, W: int, C: int, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        cfg.validate(H, W)
        self.cfg = cfg
        self.image_shape = (H, W, C)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        self.positions: list[Tensor] = []
        rng = rng or np.random.default_rng(0)
        for i in range(cfg.M):
            k = cfg.patch_dim(i, C)
            n = (H * W) // cfg.side(i) ** 2
            self.weights.append(Tensor(rng.normal(0, 1 / np.sqrt(k), (k, cfg.D)).astype(dtype), True,
                                       name=f"patch.w{i}"))
            self.biases.append(Tensor(np.zeros(cfg.D, dtype), True, name=f"patch.b{i}"))
            self.positions.append(Tensor(rng.normal(0, 0.02, (n, cfg.D)).astype(dtype), True,
                                         name=f"patch.pos{i}"))

    def parameters(self) -> list[Tensor]:
        return [*self.weights, *self.biases, *self.positions]

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    @property
    def tokens_per_image(self) -> int:
        H, W, _ = self.image_shape
        return token_count(self.cfg, H, W)

    def check_weights(self) -> None:
        C = self.image_shape[2]
        for i in range(self.cfg.M):
            k = self.cfg.patch_dim(i, C)
            n = (self.image_shape[0] * self.image_shape[1]) // self.cfg.side(i) ** 2
            if self.weights[i].shape != (k, self.cfg.D) or self.biases[i].shape != (self.cfg.D,):
                raise ConfigError(f"level {i}: linear map must be {k}x{self.cfg.D}")
            if self.positions[i].shape != (n, self.cfg.D):
                raise ConfigError(f"level {i}: position table must be {n}x{self.cfg.D}")

    def embed_batch(self, images: np.ndarray) -> Tensor:
        """Embed a stack of images (B, H, W, C) into (B, tokens_per_image, D)."""
        images = np.asarray(images)
        if images.shape[1:] != self.image_shape:
            raise ConfigError(f"image shape {images.shape[1:]} does not match embedding {self.image_shape}")
        self.check_weights()
        out = []
        for i in range(self.cfg.M):
            patches = Tensor(_patchify(images, self.cfg.side(i)).astype(self.weights[i].data.dtype))
            out.append(add(add(matmul(patches, self.weights[i]), self.biases[i]), self.positions[i]))
        return concat(out, axis=1) if len(out) > 1 else out[0]


def embed_patches(ps: PatchSet, emb: PatchEmbedding) -> TokenSequence:
    """Embed one image's patch set, recording level and raster position per token."""
    if len(ps.levels) != emb.cfg.M or ps.image_shape != emb.image_shape:
        raise ConfigError("patch set does not match the embedding configuration")
    emb.check_weights()
    parts, meta = [], []
    for lv, w, b, pos in zip(ps.levels, emb.weights, emb.biases, emb.positions):
        if lv.patches.shape[1] != w.shape[0]:
            raise ConfigError(f"level {lv.level}: patch length {lv.patches.shape[1]} != map input {w.shape[0]}")
        parts.append(add(add(matmul(Tensor(lv.patches.astype(w.data.dtype)), w), b), pos))
        meta.extend(TokenMeta("visual", lv.level, j) for j in range(lv.count))
    return TokenSequence(concat(parts, axis=0) if len(parts) > 1 else parts[0], meta)


# ---------------------------------------------------------------- image container

def write_image(path, img) -> None:
    px = np.asarray(_as_pixels(img), dtype="<f4")
    H, W, C = px.shape
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC + struct.pack("<iiii", IMAGE_VERSION, H, W, C))
        fh.write(np.ascontiguousarray(px).tobytes())


def read_image(path) -> Image:
    raw = Path(path).read_bytes()
    if raw[:4] != IMAGE_MAGIC:
        raise DataError(f"{path}: not an image container")
    version, H, W, C = struct.unpack("<iiii", raw[4:20])
    if version != IMAGE_VERSION:
        raise DataError(f"{path}: unsupported image container version {version}")
    body = np.frombuffer(raw[20:], dtype="<f4")
    if body.size != H * W * C:
        raise DataError(f"{path}: expected {H * W * C} values, found {body.size}")
    return Image(body.reshape(H, W, C).astype(np.float64))


def png_to_container(png_path, out_path) -> Image:
    from PIL import Image as PILImage

    with PILImage.open(png_path) as im:
        px = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    img = Image(px)
    write_image(out_path, img)
    return img
