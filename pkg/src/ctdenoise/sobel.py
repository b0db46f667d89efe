"""Sobel image gradients, the front end of the gradient-domain branch."""

import numpy as np
import torch
import torch.nn.functional as F

# Horizontal kernel; the vertical kernel is its transpose.  Applied as
# cross-correlation, so a ramp increasing to the right has positive gx.
KERNEL_X = ((-1.0, 0.0, 1.0), (-2.0, 0.0, 2.0), (-1.0, 0.0, 1.0))


def _kernel(dtype, device):
    kx = torch.tensor(KERNEL_X, dtype=dtype, device=device)
    return torch.stack([kx, kx.t()]).unsqueeze(1)  # (2, 1, 3, 3)


def sobel_gradient(image):
    """Compute the two-channel (gx, gy) Sobel gradient of an image.

    Accepts a torch tensor shaped (N, 1, H, W) and returns (N, 2, H, W),
    or a 2-D numpy array / tensor (H, W) and returns the matching (2, H, W).
    Reflect padding keeps the output the same spatial size as the input.
    Differentiable when the input carries gradients.
    """
    if isinstance(image, np.ndarray):
        if image.ndim != 2:
            raise ValueError("numpy input must be a 2-D image")
        t = torch.from_numpy(np.ascontiguousarray(image))
        out = sobel_gradient(t.unsqueeze(0).unsqueeze(0))
        return out.squeeze(0).numpy()

    if image.ndim == 2:
        return sobel_gradient(image.unsqueeze(0).unsqueeze(0)).squeeze(0)
    if image.ndim != 4 or image.shape[1] != 1:
        raise ValueError(f"expected (N, 1, H, W) input, got {tuple(image.shape)}")

    padded = F.pad(image, (1, 1, 1, 1), mode="reflect")
    return F.conv2d(padded, _kernel(image.dtype, image.device))
