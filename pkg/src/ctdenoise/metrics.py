"""Image quality metrics and whole-dataset evaluation.

All metrics operate on [0, 1]-normalized single-channel images.  PSNR and
RMSE measure per-pixel fidelity; SSIM measures structural similarity inside
a sliding window (11x11 Gaussian, sigma 1.5, the reference defaults).
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import correlate2d

PSNR_CAP_DB = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_shapes(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def rmse(a, b):
    """Root mean square error, sqrt(mean((a - b)**2))."""
    a, b = _check_shapes(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB; identical images return the cap."""
    err = rmse(a, b)
    if err == 0.0:
        return PSNR_CAP_DB
    return float(20.0 * np.log10(peak / err))


def _gaussian_window(size, sigma):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, peak=1.0, gaussian=True):
    """Mean structural similarity over all fully-covered window positions.

    ``gaussian=False`` switches to a uniform 11x11 window; the Gaussian
    window is the default of the reference index.
    """
    a, b = _check_shapes(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    if gaussian:
        win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    else:
        win = np.full((SSIM_WINDOW, SSIM_WINDOW), 1.0 / SSIM_WINDOW ** 2)

    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2

    mu_a = correlate2d(a, win, mode="valid")
    mu_b = correlate2d(b, win, mode="valid")
    var_a = correlate2d(a * a, win, mode="valid") - mu_a * mu_a
    var_b = correlate2d(b * b, win, mode="valid") - mu_b * mu_b
    cov = correlate2d(a * b, win, mode="valid") - mu_a * mu_b

    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricsReport:
    psnr: float
    rmse: float
    ssim: float
    per_slice: list = field(default_factory=list)
    count: int = 0

    def to_dict(self):
        return {
            "psnr": self.psnr,
            "rmse": self.rmse,
            "ssim": self.ssim,
            "count": self.count,
            "per_slice": [
                {"psnr": p, "rmse": r, "ssim": s} for p, r, s in self.per_slice
            ],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1)

    def to_table(self, label="dataset"):
        """Aligned plain-text table, columns ordered PSNR, RMSE, SSIM."""
        lines = [
            f"{'':<10s}{'PSNR':>10s}{'RMSE':>10s}{'SSIM':>10s}",
            f"{label:<10s}{self.psnr:>10.4f}{self.rmse:>10.4f}{self.ssim:>10.4f}",
        ]
        return "\n".join(lines)


def compare_pair(a, b):
    return psnr(a, b), rmse(a, b), ssim(a, b)


def evaluate_dataset(model_checkpoint, manifest):
    """Denoise every full slice in the manifest and aggregate metrics.

    ``model_checkpoint`` may be a checkpoint path, an already-loaded
    generator module, or None for the identity model (which simply scores
    the raw LDCT against the NDCT).  Aggregates are arithmetic means of the
    per-slice values, reduced in index order.
    """
    denoise = _resolve_model(model_checkpoint)
    per_slice = []
    for i in range(len(manifest)):
        ld, nd = manifest.load_pair(i)
        den = denoise(ld)
        per_slice.append(compare_pair(den, nd))
    if not per_slice:
        raise ValueError("manifest holds no slices")
    arr = np.asarray(per_slice, dtype=np.float64)
    means = arr.mean(axis=0)
    return MetricsReport(
        psnr=float(means[0]),
        rmse=float(means[1]),
        ssim=float(means[2]),
        per_slice=[tuple(map(float, row)) for row in per_slice],
        count=len(per_slice),
    )


def _resolve_model(model_checkpoint):
    if model_checkpoint is None:
        return lambda img: img
    import torch

    if isinstance(model_checkpoint, torch.nn.Module):
        generator = model_checkpoint
    else:
        from .trainer import load_generator

        generator = load_generator(model_checkpoint)
    generator.eval()

    def denoise(img):
        with torch.no_grad():
            batch = torch.from_numpy(np.ascontiguousarray(img)).unsqueeze(0).unsqueeze(0)
            out = generator(batch).clamp(0.0, 1.0)
        return out.squeeze(0).squeeze(0).numpy()

    return denoise
