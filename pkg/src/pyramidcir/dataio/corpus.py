"""Synthetic composed-retrieval corpus: generation and on-disk layout.

Layout of a corpus directory::

    manifest.json            format/version, seed, grid, image shape, pool ids
    scenes.jsonl             header line, then {"image_id", "scene"} per image
    train_triplets.jsonl     header line, then one triplet per line
    val_triplets.jsonl       same, validation queries
    subsets.jsonl            header line, then {"query_id", "candidates"}
    images/<id>.cimg         image containers (see patcher.write_image)

Every ``.jsonl`` file starts with ``{"format": ..., "version": 1}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from ..errors import DataError, GenerationError
from ..patcher import read_image, write_image
from .scenes import EditInstruction, Scene, apply_edit, random_edit, random_scene, render

FORMAT_VERSION = 1


@dataclass
class Triplet:
    query_id: str
    ref_id: str
    text: str
    target_id: str
    edit: Optional[EditInstruction] = None

    def __post_init__(self):
        if not self.text.strip():
            raise DataError(f"triplet {self.query_id}: modification text is empty")

    def to_dict(self) -> dict:
        d = {"query_id": self.query_id, "ref_id": self.ref_id, "text": self.text,
             "target_id": self.target_id}
        if self.edit is not None:
            d["edit"] = self.edit.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Triplet":
        edit = EditInstruction.from_dict(d["edit"]) if d.get("edit") else None
        return cls(d["query_id"], d["ref_id"], d["text"], d["target_id"], edit)


@dataclass
class Corpus:
    seed: int
    grid: int
    scenes: dict[str, Scene]
    train: list[Triplet]
    val: list[Triplet]
    pool: list[str]
    subsets: dict[str, list[str]]
    images: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def image(self, image_id: str) -> np.ndarray:
        img = self.images.get(image_id)
        if img is None:
            if image_id not in self.scenes:
                raise DataError(f"unknown image id {image_id!r}")
            img = self.images[image_id] = render(self.scenes[image_id])
        return img

    def stack(self, ids: Iterable[str]) -> np.ndarray:
        return np.stack([self.image(i) for i in ids])

    @property
    def image_shape(self) -> tuple:
        return self.image(next(iter(self.scenes))).shape

    def validate(self) -> None:
        for t in self.train + self.val:
            for i in (t.ref_id, t.target_id):
                if i not in self.scenes:
                    raise DataError(f"triplet {t.query_id} references unknown image {i}")
        pool = set(self.pool)
        for t in self.val:
            if t.target_id not in pool:
                raise DataError(f"query {t.query_id}: target missing from candidate pool")
            sub = self.subsets.get(t.query_id)
            if sub is not None and t.target_id not in sub:
                raise DataError(f"query {t.query_id}: target missing from its subset")


def attribute_distance(a: Scene, b: Scene) -> int:
    d = 0
    for x, y in zip(a.cells, b.cells):
        if x is None or y is None:
            d += 0 if x is y else 3
        else:
            d += (x.shape != y.shape) + (x.color != y.color) + (x.size != y.size)
    return d


def generate_corpus(seed: int, n_triplets: int, grid: int = 2, pool_size: int = 200,
                    n_val: int = 100, subset_k: int = 6, fill: float = 0.75,
                    max_tries: int = 1000) -> Corpus:
    """Build a seeded corpus with ``n_triplets`` training and ``n_val`` validation triplets.

    All images are distinct scenes, so for every validation query exactly one pool
    candidate equals the reference with the edit applied.  Distractors are
    near-misses (the query's reference under another edit) topped up with random scenes.
    """
    if n_triplets < 1:
        raise GenerationError("n_triplets must be >= 1")
    if n_val and pool_size < n_val:
        raise GenerationError(f"pool of {pool_size} cannot hold {n_val} distinct targets")
    if n_val and pool_size < subset_k:
        raise GenerationError(f"pool of {pool_size} is smaller than subset size {subset_k}")
    rng = np.random.default_rng(seed)
    scenes: dict[str, Scene] = {}
    seen: set[Scene] = set()

    def new_id() -> str:
        return f"img{len(scenes):05d}"

    def register(scene: Scene) -> str:
        i = new_id()
        scenes[i] = scene
        seen.add(scene)
        return i

    def draw_pair():
        for _ in range(max_tries):
            ref = random_scene(rng, grid, fill)
            if ref in seen:
                continue
            edit = random_edit(ref, rng)
            tgt = apply_edit(ref, edit)
            if tgt in seen or tgt == ref:
                continue
            return ref, edit, tgt
        raise GenerationError("could not draw a fresh reference/target pair")

    def make_split(prefix: str, n: int) -> list[Triplet]:
        out = []
        for k in range(n):
            ref, edit, tgt = draw_pair()
            rid, tid = register(ref), register(tgt)
            out.append(Triplet(f"{prefix}{k:05d}", rid, edit.text, tid, edit))
        return out

    train = make_split("tr", n_triplets)
    val = make_split("va", n_val)
    pool = [t.target_id for t in val]
    for k in range(pool_size - len(pool) if n_val else 0):
        scene = None
        if k < len(val):
            ref = scenes[val[k].ref_id]
            for _ in range(max_tries):
                cand = apply_edit(ref, random_edit(ref, rng))
                if cand not in seen and cand != ref:
                    scene = cand
                    break
        while scene is None or scene in seen:
            scene = random_scene(rng, grid, fill)
        pool.append(register(scene))

    subsets = {}
    for t in val:
        tgt = scenes[t.target_id]
        others = sorted((attribute_distance(tgt, scenes[c]), c) for c in pool if c != t.target_id)
        subsets[t.query_id] = sorted([t.target_id] + [c for _, c in others[:subset_k - 1]])
    corpus = Corpus(seed, grid, scenes, train, val, sorted(pool), subsets)
    corpus.validate()
    return corpus


# ---------------------------------------------------------------- persistence

def _dump_jsonl(path: Path, fmt: str, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": fmt, "version": FORMAT_VERSION}, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _load_jsonl(path: Path, fmt: str) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataError(f"{path}: empty file")
    header = json.loads(lines[0])
    if header.get("format") != fmt or header.get("version") != FORMAT_VERSION:
        raise DataError(f"{path}: expected {fmt} v{FORMAT_VERSION}, found {header}")
    return [json.loads(line) for line in lines[1:] if line.strip()]


def write_triplets(path, triplets: Iterable[Triplet]) -> None:
    _dump_jsonl(Path(path), "cir-triplets", (t.to_dict() for t in triplets))


def read_triplets(path) -> list[Triplet]:
    return [Triplet.from_dict(d) for d in _load_jsonl(Path(path), "cir-triplets")]


def save_corpus(corpus: Corpus, out_dir, fingerprint: str = "") -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for i in sorted(corpus.scenes):
        write_image(out / "images" / f"{i}.cimg", corpus.image(i))
    _dump_jsonl(out / "scenes.jsonl", "cir-scenes",
                ({"image_id": i, "scene": corpus.scenes[i].to_dict()} for i in sorted(corpus.scenes)))
    write_triplets(out / "train_triplets.jsonl", corpus.train)
    write_triplets(out / "val_triplets.jsonl", corpus.val)
    _dump_jsonl(out / "subsets.jsonl", "cir-subsets",
                ({"query_id": q, "candidates": c} for q, c in sorted(corpus.subsets.items())))
    manifest = {
        "format": "cir-corpus", "version": FORMAT_VERSION, "seed": corpus.seed,
        "grid": corpus.grid, "image_shape": list(corpus.image_shape),
        "n_train": len(corpus.train), "n_val": len(corpus.val), "pool": corpus.pool,
        "config_fingerprint": fingerprint,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return out


def load_corpus(corpus_dir) -> Corpus:
    d = Path(corpus_dir)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise DataError(f"{d}: no manifest.json") from exc
    if manifest.get("format") != "cir-corpus" or manifest.get("version") != FORMAT_VERSION:
        raise DataError(f"{d}: unsupported corpus manifest")
    scenes = {r["image_id"]: Scene.from_dict(r["scene"]) for r in _load_jsonl(d / "scenes.jsonl", "cir-scenes")}
    images = {i: read_image(d / "images" / f"{i}.cimg").pixels for i in scenes}
    subsets = {r["query_id"]: r["candidates"] for r in _load_jsonl(d / "subsets.jsonl", "cir-subsets")}
    corpus = Corpus(manifest["seed"], manifest["grid"], scenes, read_triplets(d / "train_triplets.jsonl"),
                    read_triplets(d / "val_triplets.jsonl"), manifest["pool"], subsets, images)
    corpus.validate()
    return corpus
