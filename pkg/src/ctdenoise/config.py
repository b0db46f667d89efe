"""Run configuration: hyperparameters, ablation switches, TOML round trip.

The TOML layout has flat [train], [data], [loss], and [ablation] sections;
an empty file trains the full method since every default matches the
published recipe (patch 64, batch 64, Adam at 1e-4, 100K iterations,
lambdas 0.1 / 1 / 20, p_mix 0.5).
"""

import sys
from dataclasses import dataclass, field, asdict

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .losses import LossWeights
from .models import DISCRIMINATOR_VARIANTS, FULL_RES_MAP_VARIANTS


class ConfigError(ValueError):
    """Invalid configuration key or value."""


@dataclass
class AblationFlags:
    use_unet_decoder: bool = True
    use_cutmix: bool = True
    use_gradient_branch: bool = True
    discriminator_variant: str = "unet"


@dataclass
class DataConfig:
    manifest: str = ""
    patches_per_slice: int = 1
    air_threshold: float = 0.85


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    max_iterations: int = 100_000
    # Pixel-MSE-only warmup for the denoiser before the full objective kicks
    # in: the strongly weighted gradient loss applied to a freshly
    # initialized rectifier-ended network collapses it within tens of steps.
    pretrain_iterations: int = 200
    patch_size: int = 64
    p_mix: float = 0.5
    seed: int = 0
    checkpoint_every: int = 10_000
    log_every: int = 100
    device: str = "cpu"
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    num_workers: int = 0
    channels_last: bool = True
    check_isolation: bool = False
    generator_layers: int = 10
    generator_filters: int = 32
    generator_kernel_size: int = 5
    discriminator_filters: tuple = (64, 128, 256, 512, 512, 512)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_iterations < 0:
            raise ConfigError("max_iterations must be >= 0")
        if self.pretrain_iterations < 0:
            raise ConfigError("pretrain_iterations must be >= 0")
        if self.patch_size < 64:
            raise ConfigError("patch_size must be >= 64 (critic downsampling depth)")
        if not 0.0 <= self.p_mix <= 1.0:
            raise ConfigError("p_mix must be in [0, 1]")
        if len(self.discriminator_filters) != 6:
            raise ConfigError("discriminator_filters must list 6 widths")
        if self.ablation.discriminator_variant not in DISCRIMINATOR_VARIANTS:
            raise ConfigError(
                f"discriminator_variant must be one of {DISCRIMINATOR_VARIANTS}")
        self.loss_weights.validate()
        variant = self.ablation.discriminator_variant
        full_res = variant in FULL_RES_MAP_VARIANTS and (
            variant != "unet" or self.ablation.use_unet_decoder)
        if self.ablation.use_cutmix and not full_res:
            raise ConfigError(
                "use_cutmix requires a critic with a full-resolution pixel map "
                "(variant unet with its decoder enabled, or pixel)")
        return self


# (section, key) -> attribute path on TrainConfig
_TOML_MAP = {
    ("train", "learning_rate"): "learning_rate",
    ("train", "batch_size"): "batch_size",
    ("train", "max_iterations"): "max_iterations",
    ("train", "pretrain_iterations"): "pretrain_iterations",
    ("train", "patch_size"): "patch_size",
    ("train", "p_mix"): "p_mix",
    ("train", "seed"): "seed",
    ("train", "checkpoint_every"): "checkpoint_every",
    ("train", "log_every"): "log_every",
    ("train", "device"): "device",
    ("train", "adam_beta1"): "adam_beta1",
    ("train", "adam_beta2"): "adam_beta2",
    ("train", "num_workers"): "num_workers",
    ("train", "channels_last"): "channels_last",
    ("train", "check_isolation"): "check_isolation",
    ("train", "generator_layers"): "generator_layers",
    ("train", "generator_filters"): "generator_filters",
    ("train", "generator_kernel_size"): "generator_kernel_size",
    ("train", "discriminator_filters"): "discriminator_filters",
    ("data", "manifest"): "data.manifest",
    ("data", "patches_per_slice"): "data.patches_per_slice",
    ("data", "air_threshold"): "data.air_threshold",
    ("loss", "lambda_adv"): "loss_weights.lambda_adv",
    ("loss", "lambda_img"): "loss_weights.lambda_img",
    ("loss", "lambda_grd"): "loss_weights.lambda_grd",
    ("ablation", "use_unet_decoder"): "ablation.use_unet_decoder",
    ("ablation", "use_cutmix"): "ablation.use_cutmix",
    ("ablation", "use_gradient_branch"): "ablation.use_gradient_branch",
    ("ablation", "discriminator_variant"): "ablation.discriminator_variant",
}


def _set_path(config, dotted, value):
    obj = config
    parts = dotted.split(".")
    for p in parts[:-1]:
        obj = getattr(obj, p)
    if parts[-1] == "discriminator_filters":
        value = tuple(int(v) for v in value)
    setattr(obj, parts[-1], value)


def config_from_dict(raw, base=None):
    """Apply a {section: {key: value}} mapping onto a TrainConfig."""
    config = base or TrainConfig()
    for section, content in raw.items():
        if not isinstance(content, dict):
            raise ConfigError(f"top-level key {section!r} is not a section")
        for key, value in content.items():
            dotted = _TOML_MAP.get((section, key))
            if dotted is None:
                raise ConfigError(f"unknown config key [{section}] {key}")
            _set_path(config, dotted, value)
    return config


def load_config(path, base=None):
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: invalid TOML ({exc})")
    return config_from_dict(raw, base=base)


def config_to_sections(config):
    """Flatten a TrainConfig back to its {section: {key: value}} layout."""
    sections = {"train": {}, "data": {}, "loss": {}, "ablation": {}}
    for (section, key), dotted in _TOML_MAP.items():
        obj = config
        for p in dotted.split("."):
            obj = getattr(obj, p)
        if isinstance(obj, tuple):
            obj = list(obj)
        sections[section][key] = obj
    return sections


def _toml_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise TypeError(f"cannot emit {type(value).__name__} as TOML")


def dump_toml(sections):
    """Emit the flat two-level section layout used by config files."""
    lines = []
    for section, content in sections.items():
        lines.append(f"[{section}]")
        for key, value in content.items():
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def config_snapshot_dict(config):
    """JSON-friendly nested dict of a config (for checkpoint headers)."""
    d = asdict(config)
    d["discriminator_filters"] = list(config.discriminator_filters)
    return d


def config_from_snapshot(d):
    d = dict(d)
    loss = LossWeights(**d.pop("loss_weights"))
    ablation = AblationFlags(**d.pop("ablation"))
    data = DataConfig(**d.pop("data"))
    d["discriminator_filters"] = tuple(d["discriminator_filters"])
    return TrainConfig(loss_weights=loss, ablation=ablation, data=data, **d)
