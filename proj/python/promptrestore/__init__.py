"""Prompt-guided all-in-one image restoration."""

from ._core import (
    InvalidArgument,
    Restorer,
    cluster_score,
    degrade,
    encoder_ladder,
    generate_corpus,
    preset,
    psnr,
    ssim,
    synthetic_images,
)

__all__ = [
    "InvalidArgument",
    "Restorer",
    "cluster_score",
    "degrade",
    "encoder_ladder",
    "generate_corpus",
    "preset",
    "psnr",
    "ssim",
    "synthetic_images",
]
