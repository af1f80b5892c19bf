"""Toy composed image retrieval.

A numpy autodiff kernel drives a small causal transformer that reads images
through multi-scale pyramid patches.  The model is trained contrastively for
first-stage retrieval; a second stage rescores the top candidates with a
yes/no model whose hidden states are steered by reasoning-derived vectors.
"""

from .encoder import Encoder, EncoderConfig
from .errors import (ConfigError, DataError, DegenerateInputError, DimensionError, GenerationError, InputError,
                     LengthError, NumericError, ParameterError, PipelineError, TemplateError)
from .matcher import Index, RetrievalResult, TrainConfig, info_nce, retrieve
from .patcher import PyramidConfig, flatten_patches, token_count
from .refine import RefineConfig, fuse, rerank
from .repe import InjectionConfig, RAugRep, inject

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "DegenerateInputError", "DimensionError", "Encoder", "EncoderConfig",
    "GenerationError", "Index", "InjectionConfig", "InputError", "LengthError", "NumericError",
    "ParameterError", "PipelineError", "PyramidConfig", "RAugRep", "RefineConfig", "RetrievalResult",
    "TemplateError", "TrainConfig", "flatten_patches", "fuse", "info_nce", "inject", "rerank", "retrieve",
    "token_count",
]
