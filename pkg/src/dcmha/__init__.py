"""Dynamically composable multi-head attention."""

from .attention import (
    Attention,
    AttentionConfig,
    ComposeParams,
    DecodeCache,
    ProjectionParams,
    compose,
    dcmha_decode_step,
    dcmha_forward,
    mha_forward,
)

__all__ = [
    "Attention",
    "AttentionConfig",
    "ComposeParams",
    "DecodeCache",
    "ProjectionParams",
    "compose",
    "dcmha_decode_step",
    "dcmha_forward",
    "mha_forward",
]
