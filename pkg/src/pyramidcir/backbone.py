"""Pretraining of the base yes/no model used for training-free refinement.

The refinement stage needs a vision-language model that can already answer
the yes/no retrieval question.  At toy scale no such model exists, so this
module fits one on the *training* triplets only, as a stand-in for a
pretrained backbone.  Reranking itself never updates these weights.

Each training prompt is the refinement template over (reference, candidate,
text), labelled ``yes`` when the candidate is the true target.  Negatives are
the reference itself, the reference under a different edit, and unrelated
training targets.  A fraction of prompts carries the rule-based reasoning path
after a separator, so the model has seen reasoning-augmented inputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataio.corpus import Corpus
from .dataio.prompts import refinement_prompt, synth_reasoning_path
from .dataio.scenes import apply_edit, random_edit, render
from .encoder import Encoder, EncoderConfig, save_checkpoint
from .errors import ConfigError, InputError, NumericError
from .optim import AdamW
from .tensor import Tensor, add, log_softmax, mean, pick, reshape, scale, sub
from .text import Part, Vocabulary, join_parts, tokenize

log = logging.getLogger(__name__)


@dataclass
class BackboneConfig:
    epochs: int = 3
    groups_per_batch: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    random_negatives: int = 1
    listwise_weight: float = 1.0
    path_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.groups_per_batch < 1 or self.epochs < 0 or self.random_negatives < 0:
            raise ConfigError("backbone: groups_per_batch and epochs must be positive")
        if not 0.0 <= self.path_fraction <= 1.0:
            raise ConfigError("backbone: path_fraction must lie in [0, 1]")


@dataclass
class Group:
    """Prompts sharing one (reference, text) query; the first candidate is the target."""
    prompts: list


@dataclass
class BackboneLog:
    epochs: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)


class ImageStore:
    """Corpus images plus extra rendered scenes that exist only for pretraining."""

    def __init__(self, corpus: Corpus):
        self.corpus = corpus
        self.extra: dict[str, np.ndarray] = {}

    def add(self, image_id: str, pixels: np.ndarray) -> str:
        self.extra[image_id] = pixels
        return image_id

    def __call__(self, image_id: str) -> np.ndarray:
        img = self.extra.get(image_id)
        return img if img is not None else self.corpus.image(image_id)


def prompt_parts(ref_id: str, cand_id: str, text: str, vocab: Vocabulary, path: str = "") -> list[Part]:
    """Refinement question, optionally followed by a separator and a reasoning path."""
    q = tokenize(refinement_prompt(ref_id, cand_id, text), vocab)
    c = [vocab.encode_words(path)] if path else []
    return join_parts(q, c, sep_id=vocab.sep_id)


def build_groups(corpus: Corpus, vocab: Vocabulary, cfg: BackboneConfig, store: ImageStore) -> list[Group]:
    """Per training triplet: target, the reference itself, a near miss, and random targets."""
    rng = np.random.default_rng(cfg.seed)
    targets = [t.target_id for t in corpus.train]
    out = []
    for t in corpus.train:
        ref = corpus.scenes[t.ref_id]
        cands = [t.target_id, t.ref_id]
        if t.edit is not None:
            goal = apply_edit(ref, t.edit)
            for _ in range(20):
                s = apply_edit(ref, random_edit(ref, rng))
                if s != goal and s != ref:
                    cands.append(store.add(f"{t.query_id}.near", render(s)))
                    break
        while len(cands) < 3 + cfg.random_negatives:
            j = targets[int(rng.integers(len(targets)))]
            if j not in cands:
                cands.append(j)
        path = synth_reasoning_path(ref, t.edit) if t.edit is not None else ""
        use_path = bool(path) and rng.random() < cfg.path_fraction
        out.append(Group([prompt_parts(t.ref_id, c, t.text, vocab, path if use_path else "") for c in cands]))
    return out


def group_loss(logits: Tensor, sizes: Sequence[int], yes: int, no: int, listwise_weight: float) -> Tensor:
    """Pointwise yes/no cross-entropy plus a softmax over yes-no margins within each group."""
    labels = np.full(sum(sizes), no)
    starts = np.cumsum([0] + list(sizes[:-1]))
    labels[starts] = yes
    loss = scale(mean(pick(log_softmax(logits), labels)), -1.0)
    if listwise_weight > 0 and len(set(sizes)) == 1:
        n, k = len(sizes), sizes[0]
        margin = sub(pick(logits, np.full(n * k, yes)), pick(logits, np.full(n * k, no)))
        lw = log_softmax(reshape(margin, (n, k)))
        listwise = scale(mean(pick(lw, np.zeros(n, dtype=np.int64))), -listwise_weight)
        loss = add(loss, listwise)
    return loss


def pretrain(corpus: Corpus, vocab: Vocabulary, model_cfg: EncoderConfig, cfg: BackboneConfig,
             checkpoint: str | Path | None = None) -> tuple[Encoder, BackboneLog]:
    """Fit a fresh model to answer yes/no on refinement prompts from the training split."""
    if not corpus.train:
        raise InputError("cannot pretrain on an empty training split")
    store = ImageStore(corpus)
    groups = build_groups(corpus, vocab, cfg, store)
    yes, no = vocab.id("yes"), vocab.id("no")
    model = Encoder(model_cfg, seed=cfg.seed)
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
    rng = np.random.default_rng(cfg.seed + 1)
    blog = BackboneLog()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(groups))
        losses, hits = [], 0
        for s in range(0, len(order), cfg.groups_per_batch):
            batch = [groups[i] for i in order[s:s + cfg.groups_per_batch]]
            sizes = [len(g.prompts) for g in batch]
            opt.zero_grad()
            _, logits = model.run([p for g in batch for p in g.prompts], store)
            loss = group_loss(logits, sizes, yes, no, cfg.listwise_weight)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"backbone pretraining diverged at epoch {epoch}: loss={value}")
            loss.backward()
            opt.step()
            losses.append(value)
            margin = logits.data[:, yes] - logits.data[:, no]
            for k, st in enumerate(np.cumsum([0] + sizes[:-1])):
                hits += int(np.argmax(margin[st:st + sizes[k]]) == 0)
        blog.epochs.append(float(np.mean(losses)))
        blog.accuracy.append(hits / len(groups))
        log.info("backbone epoch %d loss %.4f top1 %.3f", epoch, blog.epochs[-1], blog.accuracy[-1])
    if checkpoint is not None:
        save_checkpoint(checkpoint, model, meta={"role": "backbone", "vocab": vocab.itos,
                                                 "train": cfg.__dict__,
                                                 "log": {"epochs": blog.epochs, "accuracy": blog.accuracy}})
    return model, blog


def backbone_config(vocab: Vocabulary, base: Optional[EncoderConfig] = None, **overrides) -> EncoderConfig:
    """Encoder config for the backbone: same shape as ``base`` but long enough for prompts."""
    kw = dict(vocab_size=len(vocab), yes_id=vocab.id("yes"), no_id=vocab.id("no"),
              pad_id=vocab.pad_id, sep_id=vocab.sep_id, max_seq_len=256)
    if base is not None:
        kw.update(n_layers=base.n_layers, D=base.D, n_heads=base.n_heads, P=base.P, M=base.M,
                  image_shape=base.image_shape, dtype=base.dtype)
    kw.update(overrides)
    return EncoderConfig(**kw)
