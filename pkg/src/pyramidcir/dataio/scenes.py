"""Attribute-grid scenes, their rasterization, and edit instructions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import ConfigError, DataError

SHAPES = ("square", "circle", "triangle")
SIZES = ("small", "large")
# channel values are dyadic so they survive the float32 image container exactly
PALETTE = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
}
COLORS = tuple(PALETTE)
OPERATIONS = ("recolor", "reshape", "resize", "add", "remove")

CELL_PX = 8

_POSITION_NAMES = {
    2: ("top left", "top right", "bottom left", "bottom right"),
    3: ("top left", "top", "top right", "left", "center", "right",
        "bottom left", "bottom", "bottom right"),
}


@dataclass(frozen=True)
class Obj:
    shape: str
    color: str
    size: str

    def describe(self) -> str:
        return f"{self.size} {self.color} {self.shape}"

    def to_dict(self) -> dict:
        return {"shape": self.shape, "color": self.color, "size": self.size}


Cell = Optional[Obj]


@dataclass(frozen=True)
class Scene:
    grid: int
    cells: tuple  # row-major, length grid*grid, each Obj or None

    def __post_init__(self):
        if self.grid not in _POSITION_NAMES:
            raise ConfigError(f"grid size must be one of {sorted(_POSITION_NAMES)}, got {self.grid}")
        if len(self.cells) != self.grid ** 2:
            raise DataError("scene cell count does not match grid")

    def replace(self, cell: int, value: Cell) -> "Scene":
        cells = list(self.cells)
        cells[cell] = value
        return Scene(self.grid, tuple(cells))

    def objects(self):
        return [(i, c) for i, c in enumerate(self.cells) if c is not None]

    def to_dict(self) -> dict:
        return {"grid": self.grid, "cells": [c.to_dict() if c else None for c in self.cells]}

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(d["grid"], tuple(Obj(**c) if c else None for c in d["cells"]))


def position_name(grid: int, cell: int) -> str:
    return _POSITION_NAMES[grid][cell]


def _shape_mask(shape: str, size: str, px: int = CELL_PX) -> np.ndarray:
    c = (np.arange(px) + 0.5) - px / 2.0
    u, v = np.meshgrid(c, c)  # u: column offset, v: row offset (down)
    big = size == "large"
    if shape == "square":
        h = 3.0 if big else 2.0
        return (np.abs(u) <= h) & (np.abs(v) <= h)
    if shape == "circle":
        r = 3.3 if big else 2.0
        return u * u + v * v <= r * r
    if shape == "triangle":
        h = 3.5 if big else 2.0
        return (v >= -h) & (v <= h) & (np.abs(u) <= (v + h) / 2.0 + 0.25)
    raise DataError(f"unknown shape {shape!r}")


_MASKS = {(s, z): _shape_mask(s, z) for s in SHAPES for z in SIZES}


def render(scene: Scene) -> np.ndarray:
    """Rasterize to an (H, W, 3) array on a black background."""
    g = scene.grid
    img = np.zeros((g * CELL_PX, g * CELL_PX, 3))
    for i, obj in scene.objects():
        r, c = divmod(i, g)
        mask = _MASKS[(obj.shape, obj.size)]
        block = img[r * CELL_PX:(r + 1) * CELL_PX, c * CELL_PX:(c + 1) * CELL_PX]
        block[mask] = PALETTE[obj.color]
    return img


def random_object(rng: np.random.Generator) -> Obj:
    return Obj(SHAPES[rng.integers(len(SHAPES))], COLORS[rng.integers(len(COLORS))],
               SIZES[rng.integers(len(SIZES))])


def random_scene(rng: np.random.Generator, grid: int, fill: float = 0.75) -> Scene:
    while True:
        cells = tuple(random_object(rng) if rng.random() < fill else None for _ in range(grid * grid))
        if any(cells):
            return Scene(grid, cells)


@dataclass(frozen=True)
class EditInstruction:
    operation: str
    cell: int
    new_value: Optional[Obj]
    text: str

    def to_dict(self) -> dict:
        return {"operation": self.operation, "cell": self.cell,
                "new_value": self.new_value.to_dict() if self.new_value else None, "text": self.text}

    @classmethod
    def from_dict(cls, d: dict) -> "EditInstruction":
        nv = d["new_value"]
        return cls(d["operation"], d["cell"], Obj(**nv) if nv else None, d["text"])


def apply_edit(scene: Scene, edit: EditInstruction) -> Scene:
    return scene.replace(edit.cell, edit.new_value)


def applicable_operations(scene: Scene, cell: int) -> list[str]:
    return ["add"] if scene.cells[cell] is None else ["recolor", "reshape", "resize", "remove"]


def make_edit(scene: Scene, cell: int, operation: str, rng: np.random.Generator) -> EditInstruction:
    g = scene.grid
    where = position_name(g, cell)
    old = scene.cells[cell]
    if operation not in applicable_operations(scene, cell):
        raise DataError(f"{operation} is not applicable to cell {cell}")
    if operation == "add":
        new = random_object(rng)
        return EditInstruction("add", cell, new, f"add a {new.describe()} to the {where}")
    if operation == "remove":
        if len(scene.objects()) == 1:
            raise DataError("cannot remove the only object")
        return EditInstruction("remove", cell, None, f"remove the {old.shape} from the {where}")
    if operation == "recolor":
        choices = [c for c in COLORS if c != old.color]
        color = choices[rng.integers(len(choices))]
        return EditInstruction("recolor", cell, Obj(old.shape, color, old.size),
                               f"make the {old.shape} in the {where} {color}")
    if operation == "reshape":
        choices = [s for s in SHAPES if s != old.shape]
        shape = choices[rng.integers(len(choices))]
        return EditInstruction("reshape", cell, Obj(shape, old.color, old.size),
                               f"turn the {old.shape} in the {where} into a {shape}")
    size = "small" if old.size == "large" else "large"
    word = "larger" if size == "large" else "smaller"
    return EditInstruction("resize", cell, Obj(old.shape, old.color, size),
                           f"make the {old.shape} in the {where} {word}")


def random_edit(scene: Scene, rng: np.random.Generator) -> EditInstruction:
    """Pick a cell and an applicable operation uniformly, never emptying the scene."""
    cell = int(rng.integers(len(scene.cells)))
    ops = applicable_operations(scene, cell)
    if len(scene.objects()) == 1 and "remove" in ops:
        ops.remove("remove")
    return make_edit(scene, cell, ops[int(rng.integers(len(ops)))], rng)


def describe_scene(scene: Scene) -> str:
    objs = scene.objects()
    if not objs:
        return "no objects"
    parts = [f"a {o.describe()} in the {position_name(scene.grid, i)}" for i, o in objs]
    return " , ".join(parts)


def vocabulary_words() -> set[str]:
    words = set(SHAPES) | set(SIZES) | set(COLORS) | set(OPERATIONS)
    for names in _POSITION_NAMES.values():
        for n in names:
            words.update(n.split())
    words.update({"larger", "smaller", "make", "the", "in", "turn", "into", "a", "add", "to",
                  "remove", "from"})
    return words
