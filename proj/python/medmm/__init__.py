"""Python bindings for the medmm C++ core."""

from ._core import (  # noqa: F401
    SYSTEM_PROMPT,
    MedmmError,
    alignment_loss,
    assign_providers,
    build_prompt,
    build_pyramid,
    decode_mstf,
    encode_mstf,
    encode_multiscale,
    evaluate_jsonl,
    gelu,
    load_image_rgb8,
    lr_at,
    mlp_backward,
    mlp_forward,
    normalize,
    open_recall,
    parse_conversation,
    pool_to_base,
    prepare_square,
    resize_bilinear,
    split_tiles,
    stitch_tiles,
    train_stage,
)

__version__ = "0.1.0"
