"""Word-level tokenizer over a closed vocabulary.

Image placeholders of the form ``<image:ID>`` survive tokenization as
:class:`ImageRef` parts so a rendered prompt can interleave pixels and words.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

from .errors import DataError

PAD, SEP, UNK = "<pad>", "<sep>", "<unk>"
SPECIALS = (PAD, SEP, UNK)

_MARKER = re.compile(r"<image:([^>\s]+)>")
_WORD = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


@dataclass(frozen=True)
class ImageRef:
    image_id: str


Part = Union[ImageRef, list]


def image_marker(image_id: str) -> str:
    return f"<image:{image_id}>"


def split_words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


class Vocabulary:
    def __init__(self, words: Iterable[str]):
        extra = sorted(set(words) - set(SPECIALS))
        self.itos: list[str] = list(SPECIALS) + extra
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def id(self, word: str) -> int:
        return self.stoi.get(word, self.stoi[UNK])

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    @property
    def sep_id(self) -> int:
        return self.stoi[SEP]

    def encode_words(self, text: str) -> list[int]:
        return [self.id(w) for w in split_words(text)]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.itos[i] for i in ids)

    def content_words(self) -> list[str]:
        return [w for w in self.itos if w not in SPECIALS and w.isalnum()]


def tokenize(text: str, vocab: Vocabulary) -> list[Part]:
    """Split ``text`` into text-id runs and image references, in order."""
    parts: list[Part] = []
    pos = 0
    for m in _MARKER.finditer(text):
        ids = vocab.encode_words(text[pos:m.start()])
        if ids:
            parts.append(ids)
        parts.append(ImageRef(m.group(1)))
        pos = m.end()
    ids = vocab.encode_words(text[pos:])
    if ids:
        parts.append(ids)
    return parts


def join_parts(*seqs: Sequence[Part], sep_id: int | None = None) -> list[Part]:
    """Concatenate part lists, inserting ``sep_id`` between non-empty ones."""
    out: list[Part] = []
    for seq in seqs:
        if not seq:
            continue
        if out and sep_id is not None:
            _append_ids(out, [sep_id])
        for p in seq:
            if isinstance(p, ImageRef):
                out.append(p)
            else:
                _append_ids(out, list(p))
    return out


def _append_ids(out: list[Part], ids: list[int]) -> None:
    if out and not isinstance(out[-1], ImageRef):
        out[-1] = out[-1] + ids
    else:
        out.append(ids)


def parts_length(parts: Sequence[Part], tokens_per_image: int) -> int:
    return sum(tokens_per_image if isinstance(p, ImageRef) else len(p) for p in parts)


def check_ids(ids: Sequence[int], vocab_size: int) -> None:
    for i in ids:
        if not 0 <= i < vocab_size:
            raise DataError(f"token id {i} outside vocabulary of size {vocab_size}")
