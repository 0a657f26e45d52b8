"""Guided multi-head attention for image-to-markup recognition."""

from __future__ import annotations

from importlib import import_module
from typing import TYPE_CHECKING, Any

if TYPE_CHECKING:  # pragma: no cover
    from .attention import FusionOrder, GuidedCrossAttention
    from .config import RunConfig, load_config
    from .decoder import DecoderConfig, GuidanceState, autoregressive_decode, teacher_forced_forward
    from .encoder import EncoderConfig, FeatureGrid, encode
    from .metrics import evaluate, exprate, exprate_le1, strurate
    from .model import GuidedAttentionModel
    from .serialization import load_checkpoint, save_checkpoint
    from .synth import generate_corpus, load_corpus, render, sample_expression
    from .tensor import Tensor
    from .tokens import Vocabulary
    from .trace import AttentionTrace

_EXPORTS = {
    "AttentionTrace": "trace",
    "DecoderConfig": "decoder",
    "EncoderConfig": "encoder",
    "FeatureGrid": "encoder",
    "FusionOrder": "attention",
    "GuidanceState": "decoder",
    "GuidedAttentionModel": "model",
    "GuidedCrossAttention": "attention",
    "RunConfig": "config",
    "Tensor": "tensor",
    "Vocabulary": "tokens",
    "autoregressive_decode": "decoder",
    "encode": "encoder",
    "evaluate": "metrics",
    "exprate": "metrics",
    "exprate_le1": "metrics",
    "generate_corpus": "synth",
    "load_checkpoint": "serialization",
    "load_config": "config",
    "load_corpus": "synth",
    "render": "synth",
    "sample_expression": "synth",
    "save_checkpoint": "serialization",
    "strurate": "metrics",
    "teacher_forced_forward": "decoder",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name: str) -> Any:  # pragma: no cover - thin import wrapper
    module = _EXPORTS.get(name)
    if module is None:
        raise AttributeError(name)
    return getattr(import_module(f".{module}", __name__), name)


def __dir__() -> list[str]:  # pragma: no cover - module metadata
    return sorted(__all__ + list(set(_EXPORTS.values())))
