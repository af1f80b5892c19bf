"""Prompt templates and rule-based reasoning paths."""

from __future__ import annotations

import numpy as np

from ..errors import TemplateError
from ..text import Vocabulary, image_marker, split_words
from .scenes import (EditInstruction, Scene, apply_edit, describe_scene, position_name,
                     vocabulary_words)

_HEADER = "Image1: {image1}\nImage2: {image2}\nText information: {text}\nQuestion: "

TEMPLATES = {
    "reasoning_construction": _HEADER + (
        "Please carefully analyze the details related to the modified text in the first image, "
        "and output the reasoning path that leads to the second image by adding the modified text "
        "to the first image. Please do not mention the second image the reasoning path. "
        "No need to output summary text at the end."),
    "refinement": _HEADER + (
        "This is composed image retrieval task, can the second image be accurately retrieved by "
        "the first image and text information? Output the final answer with yes/no. The output "
        "answer format should be one word: yes/no, Please strictly follow the format."),
}
SLOTS = ("image1", "image2", "text")


def render_prompt(kind: str, bindings: dict) -> str:
    """Fill a template.  Image slots take image ids and render as ``<image:ID>`` markers."""
    if kind not in TEMPLATES:
        raise TemplateError(f"unknown template {kind!r}")
    values = {}
    for slot in SLOTS:
        v = bindings.get(slot)
        if v is None or (isinstance(v, str) and not v.strip()):
            raise TemplateError(f"template slot {slot!r} is unbound or empty")
        values[slot] = image_marker(v) if slot.startswith("image") else v
    return TEMPLATES[kind].format(**values)


def refinement_prompt(ref_id: str, candidate_id: str, text: str) -> str:
    return render_prompt("refinement", {"image1": ref_id, "image2": candidate_id, "text": text})


_METHOD = {
    "recolor": "its color changes from {old.color} to {new.color} while the shape and the size are kept",
    "reshape": "it is redrawn as a {new.shape} with the same color and the same size",
    "resize": "it is redrawn from {old.size} to {new.size} with the same color and the same shape",
    "add": "a new {new.size} {new.color} {new.shape} is drawn in the empty cell",
    "remove": "the {old.shape} is erased and the cell is left empty",
}


def synth_reasoning_path(reference: Scene, edit: EditInstruction) -> str:
    """Template reasoning path: reference description, location, method, expected result."""
    where = position_name(reference.grid, edit.cell)
    old, new = reference.cells[edit.cell], edit.new_value
    subject = f"the {old.describe()}" if old else "nothing"
    method = _METHOD[edit.operation].format(old=old, new=new)
    result = describe_scene(apply_edit(reference, edit))
    return (f"first , the reference shows {describe_scene(reference)} . "
            f"the modification is located in the {where} cell , which holds {subject} . "
            f"following the instruction to {edit.text} , {method} . "
            f"the other cells stay unchanged , so the edited scene should contain {result} .")


def noise_text(n_words: int, vocab: Vocabulary, rng: np.random.Generator) -> str:
    """Random in-vocabulary words, used as a length-matched control for reasoning paths."""
    words = vocab.content_words()
    return " ".join(words[int(i)] for i in rng.integers(len(words), size=n_words))


def build_vocabulary() -> Vocabulary:
    words = set(vocabulary_words())
    for tpl in TEMPLATES.values():
        words.update(split_words(tpl.format(image1="", image2="", text="")))
    for body in _METHOD.values():
        words.update(split_words(body.replace("{", " ").replace("}", " ").replace(".", " ")))
    words.update(split_words(
        "first , the reference shows no objects . the modification is located in the cell , "
        "which holds nothing . following the instruction to , . the other cells stay unchanged , "
        "so the edited scene should contain . color shape size empty new old"))
    words.update({"yes", "no"})
    return Vocabulary(words)
