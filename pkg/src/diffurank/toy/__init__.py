"""Synthetic verification world: objects, views, captions, denoisers, oracle."""

from .world import (
    ATTRIBUTE_SLOTS,
    COLORS,
    SHAPES,
    SIZE_CLASSES,
    TOKEN_INDEX,
    VOCABULARY,
    ToyCaptioner,
    ToyObject,
    ToyView,
    ToyWorld,
    corrupt_tokens,
    generate_world,
    load_world,
    parse_tokens,
    render_caption,
    save_world,
    token_embeddings,
    visible_tokens,
    world_from_json,
    world_to_json,
)
from .denoiser import (
    BlendDenoiser,
    ToyDenoiser,
    ToyTrainingError,
    caption_bag,
    conditional_loss,
    load_denoiser,
    save_denoiser,
    separation_metrics,
    train_toy_denoiser,
)
from .oracle import ORACLE_EPS_SEED, oracle_alignment, quasi_normal_set

__all__ = [
    "ATTRIBUTE_SLOTS",
    "COLORS",
    "SHAPES",
    "SIZE_CLASSES",
    "TOKEN_INDEX",
    "VOCABULARY",
    "ToyCaptioner",
    "ToyObject",
    "ToyView",
    "ToyWorld",
    "BlendDenoiser",
    "ToyDenoiser",
    "ToyTrainingError",
    "ORACLE_EPS_SEED",
    "caption_bag",
    "conditional_loss",
    "corrupt_tokens",
    "generate_world",
    "load_denoiser",
    "load_world",
    "oracle_alignment",
    "parse_tokens",
    "quasi_normal_set",
    "render_caption",
    "save_denoiser",
    "save_world",
    "separation_metrics",
    "token_embeddings",
    "train_toy_denoiser",
    "visible_tokens",
    "world_from_json",
    "world_to_json",
]
