"""Confidence-map export: apply a trained image-domain critic to denoised
slices and render its per-pixel output for visual inspection.

Low map values render blue, high values red, normalized per image; raw
scores are also written as a float32 raster sidecar for quantitative use.
"""

from pathlib import Path

import numpy as np
import torch
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from .data import write_raster
from .trainer import load_discriminator


def confidence_map(d_img_checkpoint, image):
    """Run one critic forward pass on a single image.

    ``d_img_checkpoint`` is a checkpoint path or an already-loaded critic
    module.  Returns the critic's DiscriminatorOutput (batch of one); no
    state is updated, so repeated calls are identical.
    """
    if isinstance(d_img_checkpoint, torch.nn.Module):
        critic = d_img_checkpoint
    else:
        critic = load_discriminator(d_img_checkpoint, domain="img")
    critic.eval()
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise ValueError("expected a single 2-D image")
    with torch.no_grad():
        batch = torch.from_numpy(image).unsqueeze(0).unsqueeze(0)
        return critic(batch)


def diverging_colormap(t):
    """Map values in [0, 1] to blue -> white -> red RGB (uint8).

    The red channel never decreases with t and the blue channel never
    increases, so higher scores always render warmer.
    """
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    r = np.minimum(1.0, 2.0 * t)
    g = 1.0 - np.abs(2.0 * t - 1.0)
    b = np.minimum(1.0, 2.0 * (1.0 - t))
    rgb = np.stack([r, g, b], axis=-1)
    return np.round(rgb * 255.0).astype(np.uint8)


def export_overlay(image, output, path):
    """Write a side-by-side PNG of the grayscale image and its colored
    confidence map, plus a float32 raster sidecar of the raw map.

    Map colors are normalized to the per-image [min, max]; a constant map
    renders at the colormap midpoint.  The global score is stored in the
    PNG's metadata text chunk.
    """
    path = Path(path)
    image = np.asarray(image, dtype=np.float64)
    pixel_map = output.pixel_map
    if pixel_map is None:
        raise ValueError("critic produced no pixel map to render")
    raw = pixel_map.detach().cpu().numpy().squeeze()
    if raw.shape != image.shape:
        raise ValueError("map and image sizes differ")

    lo, hi = float(raw.min()), float(raw.max())
    if hi - lo < 1e-12:
        t = np.full_like(raw, 0.5)
    else:
        t = (raw - lo) / (hi - lo)

    gray = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    left = np.stack([gray] * 3, axis=-1)
    right = diverging_colormap(t)
    panel = np.concatenate([left, right], axis=1)

    meta = PngInfo()
    if output.global_score is not None:
        meta.add_text("global_score", f"{float(output.global_score.reshape(-1)[0]):.6g}")
    meta.add_text("map_min", f"{lo:.6g}")
    meta.add_text("map_max", f"{hi:.6g}")
    Image.fromarray(panel).save(path, pnginfo=meta)
    write_raster(path.with_suffix(".raw"), raw.astype(np.float32))
    return path
