"""Synthetic grid-scene corpus, edit instructions and prompt templates."""

from .corpus import Corpus, Triplet, generate_corpus, load_corpus, save_corpus
from .prompts import TEMPLATES, build_vocabulary, render_prompt, synth_reasoning_path
from .scenes import EditInstruction, Scene, apply_edit, render

__all__ = ["Corpus", "EditInstruction", "Scene", "TEMPLATES", "Triplet", "apply_edit", "build_vocabulary",
           "generate_corpus", "load_corpus", "render", "render_prompt", "save_corpus", "synth_reasoning_path"]
