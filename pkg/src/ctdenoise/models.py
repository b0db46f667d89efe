"""Network architectures: the residual encoder-decoder denoiser and the
U-Net critic (plus the classical critic variants used by ablations).

The denoiser keeps full spatial resolution throughout (no down/upsampling),
pairing each encoder layer with a mirrored decoder layer through additive
skips; the skip of the outermost pair is the input image itself.  The critic
encoder halves resolution six times and ends in a global score head, while
its decoder walks back up with bilinear upsampling and skip connections to
emit a per-pixel confidence map.
"""

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class GeneratorSpec:
    layers_per_side: int = 10
    filters: int = 32
    kernel_size: int = 5
    skip_connections: int = 10

    def validate(self):
        if self.layers_per_side < 1:
            raise ValueError("layers_per_side must be >= 1")
        if not 0 <= self.skip_connections <= self.layers_per_side:
            raise ValueError("skip_connections must be in [0, layers_per_side]")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd to preserve size")


@dataclass
class DiscriminatorSpec:
    in_channels: int = 1
    encoder_filters: tuple = (64, 128, 256, 512, 512, 512)
    leaky_slope: float = 0.2
    spectral_norm: bool = True
    use_decoder: bool = True

    @property
    def downsample_blocks(self):
        return len(self.encoder_filters)

    def validate(self):
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if len(self.encoder_filters) != 6:
            raise ValueError("expected 6 encoder filter counts")


@dataclass
class DiscriminatorOutput:
    """Critic verdicts: a global realism score and/or a per-pixel map."""
    global_score: torch.Tensor = None   # (N,)
    pixel_map: torch.Tensor = None      # (N, 1, H, W)


MIN_DISCRIMINATOR_SIDE = 64


def _l2_normalize(v, eps=1e-12):
    return v / (v.norm() + eps)


def spectral_power_iteration(weight, u, v, eps=1e-12):
    """One power-iteration refinement of (u, v) and the normalized weight.

    ``weight`` is the 2-D reshaped weight matrix; u and v are the running
    unit-norm singular-vector estimates.  Returns (normalized weight, u, v,
    sigma).  A zero weight passes through unchanged (sigma 0).
    """
    with torch.no_grad():
        v = _l2_normalize(torch.mv(weight.t(), u), eps)
        u = _l2_normalize(torch.mv(weight, v), eps)
    sigma = torch.dot(u, torch.mv(weight, v))
    return weight / (sigma + eps), u, v, sigma


class SpectralNorm(nn.Module):
    """Wraps a conv/linear module, dividing its weight by the running
    power-iteration estimate of the top singular value.

    The estimate state (u, v) advances once per forward pass while in
    training mode; eval-mode forwards reuse the stored state so inference
    never mutates anything.
    """

    def __init__(self, module, eps=1e-12):
        super().__init__()
        self.module = module
        self.eps = eps
        weight = module.weight
        self.weight_orig = nn.Parameter(weight.detach().clone())
        del module._parameters["weight"]
        rows = weight.shape[0]
        cols = weight.numel() // rows
        self.register_buffer("weight_u", _l2_normalize(torch.randn(rows)))
        self.register_buffer("weight_v", _l2_normalize(torch.randn(cols)))

    def _normalized_weight(self):
        w2d = self.weight_orig.reshape(self.weight_orig.shape[0], -1)
        if self.training:
            w_n, u, v, _ = spectral_power_iteration(w2d, self.weight_u, self.weight_v, self.eps)
            self.weight_u.copy_(u)
            self.weight_v.copy_(v)
        else:
            sigma = torch.dot(self.weight_u, torch.mv(w2d, self.weight_v))
            w_n = w2d / (sigma + self.eps)
        return w_n.reshape(self.weight_orig.shape)

    def refresh_state(self, n_iterations=20):
        """Run extra power iterations to converge the running (u, v) state."""
        with torch.no_grad():
            w2d = self.weight_orig.reshape(self.weight_orig.shape[0], -1)
            u, v = self.weight_u.clone(), self.weight_v.clone()
            for _ in range(n_iterations):
                v = _l2_normalize(torch.mv(w2d.t(), u), self.eps)
                u = _l2_normalize(torch.mv(w2d, v), self.eps)
            self.weight_u.copy_(u)
            self.weight_v.copy_(v)

    def normalized_weight(self):
        """The weight divided by the current sigma estimate (no state update)."""
        with torch.no_grad():
            w2d = self.weight_orig.reshape(self.weight_orig.shape[0], -1)
            sigma = torch.dot(self.weight_u, torch.mv(w2d, self.weight_v))
            return (self.weight_orig / (sigma + self.eps)).detach().clone()

    def estimate_sigma(self, n_iterations=50):
        """Fresh power-iteration estimate of the normalized weight's top
        singular value; does not touch the running state."""
        with torch.no_grad():
            w2d = self.weight_orig.reshape(self.weight_orig.shape[0], -1)
            sigma = torch.dot(self.weight_u, torch.mv(w2d, self.weight_v))
            w_n = w2d / (sigma + self.eps)
            u = _l2_normalize(torch.randn(w_n.shape[0], dtype=w_n.dtype))
            for _ in range(n_iterations):
                v = _l2_normalize(torch.mv(w_n.t(), u))
                u = _l2_normalize(torch.mv(w_n, v))
            return float(torch.dot(u, torch.mv(w_n, v)))

    def forward(self, *args):
        self.module.weight = self._normalized_weight()
        return self.module(*args)


def _sn_conv(cin, cout, kernel, stride=1, padding=0, spectral=True):
    conv = nn.Conv2d(cin, cout, kernel, stride=stride, padding=padding)
    return SpectralNorm(conv) if spectral else conv


class Generator(nn.Module):
    """Fully-convolutional residual encoder-decoder denoiser.

    All layers are stride-1 convs with ReLU; each decoder layer adds the
    feature map that entered its mirrored encoder layer before activating,
    so with every skip enabled the final layer receives the raw input and
    the last ReLU is the only clamp applied during training.
    """

    def __init__(self, spec=None):
        super().__init__()
        self.spec = spec or GeneratorSpec()
        self.spec.validate()
        s = self.spec
        pad = s.kernel_size // 2
        enc, dec = [], []
        for i in range(s.layers_per_side):
            enc.append(nn.Conv2d(1 if i == 0 else s.filters, s.filters,
                                 s.kernel_size, padding=pad))
        for j in range(s.layers_per_side):
            last = j == s.layers_per_side - 1
            dec.append(nn.Conv2d(s.filters, 1 if last else s.filters,
                                 s.kernel_size, padding=pad))
        self.encoder = nn.ModuleList(enc)
        self.decoder = nn.ModuleList(dec)

    def forward(self, x):
        if x.shape[-1] < self.spec.kernel_size or x.shape[-2] < self.spec.kernel_size:
            raise ValueError("input smaller than the generator kernel")
        ns = self.spec.layers_per_side
        skips = []
        h = x
        for conv in self.encoder:
            skips.append(h)
            h = F.relu(conv(h))
        for j, conv in enumerate(self.decoder):
            h = conv(h)
            enc_idx = ns - 1 - j
            if enc_idx < self.spec.skip_connections:
                h = h + skips[enc_idx]
            h = F.relu(h)
        return h


class ResBlock(nn.Module):
    """Two 3x3 convs with an identity shortcut (1x1 projection when the
    shape changes); downsampling happens in the first conv's stride."""

    def __init__(self, cin, cout, stride=1, slope=0.2, spectral=True):
        super().__init__()
        self.conv1 = _sn_conv(cin, cout, 3, stride=stride, padding=1, spectral=spectral)
        self.conv2 = _sn_conv(cout, cout, 3, padding=1, spectral=spectral)
        if cin != cout or stride != 1:
            self.shortcut = _sn_conv(cin, cout, 1, stride=stride, spectral=spectral)
        else:
            self.shortcut = None
        self.act = nn.LeakyReLU(slope)

    def forward(self, x):
        h = self.conv2(self.act(self.conv1(x)))
        s = x if self.shortcut is None else self.shortcut(x)
        return self.act(h + s)


class UNetDiscriminator(nn.Module):
    """Critic with a downsampling ResBlock encoder ending in a global score
    and a skip-connected upsampling decoder ending in a per-pixel map.

    The encoder halves resolution six times; the global head applies
    spatial average pooling before the fully-connected layer so any input
    side >= 64 is accepted.  Decoder stages bilinearly upsample to the size
    of the same-resolution encoder feature (the raw input for the last
    stage) and concatenate it before their ResBlock.  The final 1x1 conv
    and the fully-connected head carry no normalization.
    """

    def __init__(self, spec=None):
        super().__init__()
        self.spec = spec or DiscriminatorSpec()
        self.spec.validate()
        s = self.spec
        filters = list(s.encoder_filters)

        blocks = []
        c = s.in_channels
        for f in filters:
            blocks.append(ResBlock(c, f, stride=2, slope=s.leaky_slope,
                                   spectral=s.spectral_norm))
            c = f
        self.enc_blocks = nn.ModuleList(blocks)
        self.fc = nn.Linear(filters[-1], 1)

        if s.use_decoder:
            rev = filters[::-1]
            skip_channels = [s.in_channels] + filters[:-1]
            dec = []
            c = filters[-1]
            for j, f in enumerate(rev):
                skip_c = skip_channels[-(j + 1)]
                dec.append(ResBlock(c + skip_c, f, slope=s.leaky_slope,
                                    spectral=s.spectral_norm))
                c = f
            self.dec_blocks = nn.ModuleList(dec)
            self.out_conv = nn.Conv2d(c, 1, 1)
        else:
            self.dec_blocks = None
            self.out_conv = None

    def forward(self, x):
        if x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected {self.spec.in_channels} input channels")
        if min(x.shape[-2:]) < MIN_DISCRIMINATOR_SIDE:
            raise ValueError(f"input side must be >= {MIN_DISCRIMINATOR_SIDE}")

        feats = [x]
        h = x
        for block in self.enc_blocks:
            h = block(h)
            feats.append(h)
        score = self.fc(h.mean(dim=(2, 3))).reshape(-1)

        if self.dec_blocks is None:
            return DiscriminatorOutput(global_score=score, pixel_map=None)

        d = feats[-1]
        for j, block in enumerate(self.dec_blocks):
            skip = feats[-(j + 2)]
            d = F.interpolate(d, size=skip.shape[-2:], mode="bilinear",
                              align_corners=False)
            d = block(torch.cat([d, skip], dim=1))
        return DiscriminatorOutput(global_score=score, pixel_map=self.out_conv(d))


class GlobalDiscriminator(nn.Module):
    """Classification critic: six stride-2 convs, one stride-1 conv, then a
    pooled fully-connected score.  No per-pixel output."""

    def __init__(self, spec=None):
        super().__init__()
        spec = spec or DiscriminatorSpec()
        s = spec
        layers = []
        c = s.in_channels
        for f in s.encoder_filters:
            layers += [_sn_conv(c, f, 3, stride=2, padding=1, spectral=s.spectral_norm),
                       nn.LeakyReLU(s.leaky_slope)]
            c = f
        layers += [_sn_conv(c, c, 3, padding=1, spectral=s.spectral_norm),
                   nn.LeakyReLU(s.leaky_slope)]
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(c, 1)
        self.spec = spec

    def forward(self, x):
        if min(x.shape[-2:]) < MIN_DISCRIMINATOR_SIDE:
            raise ValueError(f"input side must be >= {MIN_DISCRIMINATOR_SIDE}")
        h = self.features(x)
        return DiscriminatorOutput(global_score=self.fc(h.mean(dim=(2, 3))).reshape(-1))


class PatchDiscriminator(nn.Module):
    """Critic scoring overlapping patches: a short stride-2 conv stack
    ending in a 1-channel score map at reduced resolution."""

    def __init__(self, spec=None):
        super().__init__()
        spec = spec or DiscriminatorSpec()
        s = spec
        f = list(s.encoder_filters)
        self.features = nn.Sequential(
            _sn_conv(s.in_channels, f[0], 4, stride=2, padding=1, spectral=s.spectral_norm),
            nn.LeakyReLU(s.leaky_slope),
            _sn_conv(f[0], f[1], 4, stride=2, padding=1, spectral=s.spectral_norm),
            nn.LeakyReLU(s.leaky_slope),
            _sn_conv(f[1], f[2], 4, stride=2, padding=1, spectral=s.spectral_norm),
            nn.LeakyReLU(s.leaky_slope),
            _sn_conv(f[2], f[3], 3, padding=1, spectral=s.spectral_norm),
            nn.LeakyReLU(s.leaky_slope),
        )
        self.out_conv = nn.Conv2d(f[3], 1, 3, padding=1)
        self.spec = spec

    def forward(self, x):
        return DiscriminatorOutput(pixel_map=self.out_conv(self.features(x)))


class PixelDiscriminator(nn.Module):
    """Critic judging each pixel independently: seven 1x1 convs producing a
    full-resolution score map."""

    def __init__(self, spec=None):
        super().__init__()
        spec = spec or DiscriminatorSpec()
        s = spec
        f0 = s.encoder_filters[0]
        widths = [f0, 2 * f0, 4 * f0, 2 * f0, f0, max(f0 // 2, 8)]
        layers = []
        c = s.in_channels
        for w in widths:
            layers += [_sn_conv(c, w, 1, spectral=s.spectral_norm),
                       nn.LeakyReLU(s.leaky_slope)]
            c = w
        self.features = nn.Sequential(*layers)
        self.out_conv = nn.Conv2d(c, 1, 1)
        self.spec = spec

    def forward(self, x):
        return DiscriminatorOutput(pixel_map=self.out_conv(self.features(x)))


DISCRIMINATOR_VARIANTS = ("unet", "global", "patch", "pixel")

# Variants whose output includes a map matching the input resolution; the
# CutMix mask targets require one of these.
FULL_RES_MAP_VARIANTS = ("unet", "pixel")


def build_discriminator(variant, spec=None):
    if variant == "unet":
        return UNetDiscriminator(spec)
    if variant == "global":
        return GlobalDiscriminator(spec)
    if variant == "patch":
        return PatchDiscriminator(spec)
    if variant == "pixel":
        return PixelDiscriminator(spec)
    raise ValueError(f"unknown discriminator variant {variant!r}")


def he_initialize(module, rng_seed):
    """Re-initialize all conv / fully-connected weights in place.

    Weights are drawn zero-mean Gaussian with variance 2 / fan_in (fan_in =
    input channels x kernel area for convs, input features for linears);
    biases are zeroed.  Spectral-norm state vectors are re-drawn from the
    same stream.  Bitwise deterministic per seed.
    """
    gen = torch.Generator().manual_seed(int(rng_seed))
    for name, param in module.named_parameters():
        with torch.no_grad():
            if name.endswith("bias"):
                param.zero_()
            else:
                if param.dim() >= 2:
                    fan_in = param.shape[1] * (param[0][0].numel() if param.dim() > 2 else 1)
                else:
                    fan_in = param.numel()
                std = (2.0 / fan_in) ** 0.5
                param.normal_(0.0, std, generator=gen)
    for name, buf in module.named_buffers():
        if name.endswith(("weight_u", "weight_v")):
            with torch.no_grad():
                buf.normal_(0.0, 1.0, generator=gen)
                buf.copy_(_l2_normalize(buf))
    return module
