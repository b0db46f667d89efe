"""Rectangular cut-and-mix masks used to regularize the critics.

A combination ratio r is drawn from Beta(1, 1) (uniform), a square cut of
side round(s * sqrt(1 - r)) is placed uniformly inside the raster, and the
mask is 1 outside the cut (normal-dose pixels) and 0 inside (denoised
pixels), so mean(mask) tracks r up to rounding.
"""

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class CutMixSample:
    mask: np.ndarray   # binary, 1 = normal-dose pixel
    ratio: float
    mixed: np.ndarray


def sample_mask(side, rng, ratio=None):
    """Sample (mask, ratio) for a square raster of the given side.

    ``rng`` is a numpy Generator.  ``ratio`` forces r instead of drawing it
    (the limits r=0 and r=1 give all-zero and all-one masks).
    """
    if side < 2:
        raise ValueError("side must be >= 2")
    r = float(rng.beta(1.0, 1.0)) if ratio is None else float(ratio)
    cut = int(round(side * np.sqrt(1.0 - r)))
    cut = min(cut, side)
    mask = np.ones((side, side), dtype=np.float32)
    if cut > 0:
        top = int(rng.integers(0, side - cut + 1))
        left = int(rng.integers(0, side - cut + 1))
        mask[top:top + cut, left:left + cut] = 0.0
    return mask, r


def sample_mask_batch(n, side, rng):
    """Stack n independent masks into a (n, 1, side, side) float tensor."""
    masks = np.empty((n, 1, side, side), dtype=np.float32)
    ratios = np.empty(n, dtype=np.float64)
    for i in range(n):
        masks[i, 0], ratios[i] = sample_mask(side, rng)
    return torch.from_numpy(masks), ratios


def mix_images(ndct, denoised, mask):
    """Elementwise mask mix: mask * ndct + (1 - mask) * denoised."""
    if ndct.shape != denoised.shape:
        raise ValueError("ndct and denoised shapes differ")
    return mask * ndct + (1.0 - mask) * denoised


def should_apply(p_mix, rng):
    """Decide once per mini-batch whether to apply the regularization."""
    if not 0.0 <= p_mix <= 1.0:
        raise ValueError("p_mix must be in [0, 1]")
    return bool(rng.random() < p_mix)
