"""Least-squares adversarial objectives, CutMix regularizers, and pixel
losses.

Real targets are 1 and fake targets are 0 on both critic heads.  Every
per-pixel term is averaged over pixels (not summed) so loss magnitudes stay
comparable across patch sizes; batch terms are averaged over the batch.
Critic heads that a variant does not produce simply contribute nothing.
"""

import json
from dataclasses import dataclass

import torch

from .sobel import sobel_gradient


@dataclass
class LossWeights:
    lambda_adv: float = 0.1
    lambda_img: float = 1.0
    lambda_grd: float = 20.0

    def validate(self):
        if min(self.lambda_adv, self.lambda_img, self.lambda_grd) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class LossReport:
    """Scalar record of every loss term at one iteration."""
    d_img: float = 0.0
    d_grd: float = 0.0
    d_dud: float = 0.0
    reg: float = 0.0
    con: float = 0.0
    d_total: float = 0.0
    adv: float = 0.0
    pix_img: float = 0.0
    pix_grd: float = 0.0
    g_total: float = 0.0

    def to_json(self, iteration=None):
        record = {} if iteration is None else {"iteration": iteration}
        record.update(self.__dict__)
        return json.dumps(record)


def _mse_to(tensor, target):
    # Mean over every element (batch and, for maps, pixels).
    if tensor is None:
        return None
    return ((tensor - target) ** 2).mean()


def _sum_terms(terms):
    total = None
    for t in terms:
        if t is None:
            continue
        total = t if total is None else total + t
    if total is None:
        raise ValueError("discriminator produced no output heads")
    return total


def lsgan_d_term(real_out, fake_out):
    """Critic loss for one domain: squared distance of the real outputs to 1
    and of the fake outputs to 0, on both heads."""
    return _sum_terms([
        _mse_to(real_out.global_score, 1.0),
        _mse_to(fake_out.global_score, 0.0),
        _mse_to(real_out.pixel_map, 1.0),
        _mse_to(fake_out.pixel_map, 0.0),
    ])


def dual_domain_d_loss(img_real, img_fake, grd_real=None, grd_fake=None):
    """Sum of the image-domain and (when present) gradient-domain terms."""
    total = lsgan_d_term(img_real, img_fake)
    if grd_real is not None:
        total = total + lsgan_d_term(grd_real, grd_fake)
    return total


def cutmix_reg_loss(mixed_out, masks):
    """Mixed images are globally fake; the mask is the per-pixel target."""
    if mixed_out.pixel_map is not None and mixed_out.pixel_map.shape != masks.shape:
        raise ValueError(
            f"pixel map shape {tuple(mixed_out.pixel_map.shape)} does not match "
            f"mask shape {tuple(masks.shape)}"
        )
    terms = [_mse_to(mixed_out.global_score, 0.0)]
    if mixed_out.pixel_map is not None:
        terms.append(((mixed_out.pixel_map - masks) ** 2).mean())
    return _sum_terms(terms)


def consistency_loss(dec_mixed, dec_real, dec_fake, mask):
    """Penalty keeping the map of a mixed image equal to the mask-mix of the
    unmixed maps (pixel-averaged squared Frobenius distance)."""
    if not dec_mixed.shape == dec_real.shape == dec_fake.shape:
        raise ValueError("pixel map shapes differ")
    target = mask * dec_real + (1.0 - mask) * dec_fake
    return ((dec_mixed - target) ** 2).mean()


def generator_adv_loss(img_out, grd_out=None):
    """Generator-side adversarial loss: push every critic head toward the
    real target 1, in the image and (when present) gradient domains."""
    terms = [
        _mse_to(img_out.global_score, 1.0),
        _mse_to(img_out.pixel_map, 1.0),
    ]
    if grd_out is not None:
        terms += [
            _mse_to(grd_out.global_score, 1.0),
            _mse_to(grd_out.pixel_map, 1.0),
        ]
    return _sum_terms(terms)


def pixel_losses(denoised, ndct):
    """(mean squared error on pixels, mean absolute error on Sobel
    gradients); the gradient term uses L1 because gradients are sparse."""
    if denoised.shape != ndct.shape:
        raise ValueError("batch shapes differ")
    pix_img = ((denoised - ndct) ** 2).mean()
    pix_grd = (sobel_gradient(denoised) - sobel_gradient(ndct)).abs().mean()
    return pix_img, pix_grd


def total_generator_loss(weights, adv, pix_img, pix_grd):
    return (weights.lambda_adv * adv
            + weights.lambda_img * pix_img
            + weights.lambda_grd * pix_grd)


def total_discriminator_loss(d_dud, reg, con):
    """Unweighted sum; reg and con are 0 on batches where CutMix is skipped."""
    return d_dud + reg + con
