"""Adversarial low-dose CT denoising toolkit.

A residual encoder-decoder denoiser trained against two U-Net critics, one
on images and one on their Sobel gradients, with CutMix regularization of
the critics and per-pixel confidence-map export.
"""

__version__ = "0.1.0"

from .config import AblationFlags, DataConfig, TrainConfig
from .cutmix import mix_images, sample_mask, should_apply
from .data import (SliceManifest, extract_patches, load_manifest,
                   synthesize_phantom_pair, window_normalize)
from .losses import LossReport, LossWeights
from .metrics import MetricsReport, evaluate_dataset, psnr, rmse, ssim
from .models import (DiscriminatorOutput, DiscriminatorSpec, Generator,
                     GeneratorSpec, UNetDiscriminator, he_initialize)
from .sobel import sobel_gradient
from .trainer import Trainer, train
from .uncertainty import confidence_map, export_overlay
