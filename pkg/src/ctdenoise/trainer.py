"""Alternating adversarial training of the denoiser and its two critics.

Each iteration draws one mini-batch, applies one critic update (both
domains) and then one denoiser update.  All randomness flows through two
explicit numpy streams (batch sampling and mask sampling), so fixed-seed
single-worker runs are bitwise reproducible and checkpoint resume follows
the exact trajectory of an uninterrupted run.
"""

import json
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import TrainConfig, config_snapshot_dict, config_from_snapshot
from .cutmix import mix_images, sample_mask_batch, should_apply
from .data import extract_patches
from .losses import (LossReport, cutmix_reg_loss, consistency_loss,
                     generator_adv_loss, lsgan_d_term, pixel_losses,
                     total_discriminator_loss, total_generator_loss)
from .models import (DiscriminatorSpec, GeneratorSpec, SpectralNorm,
                     build_discriminator, Generator, he_initialize)
from .sobel import sobel_gradient


class TrainingDivergedError(RuntimeError):
    """A loss went non-finite; training aborts rather than skipping."""


class IsolationError(RuntimeError):
    """A frozen network's parameters changed during the other's step."""


def build_patch_pool(manifest, config):
    """Extract the training patch pool from a manifest, deterministically.

    Returns (ldct, ndct) float32 arrays shaped (N, 1, s, s).
    """
    size = config.patch_size
    seeds = np.random.SeedSequence([config.seed, 303]).generate_state(len(manifest))
    ld_patches, nd_patches = [], []
    for i in range(len(manifest)):
        pair = manifest.load_pair(i)
        patches = extract_patches(pair, size, config.data.patches_per_slice,
                                  air_threshold=config.data.air_threshold,
                                  rng_seed=int(seeds[i]), source_index=i)
        for p in patches:
            ld_patches.append(p.ldct)
            nd_patches.append(p.ndct)
    if not ld_patches:
        raise ValueError("no usable patches extracted from the manifest")
    ld = np.stack(ld_patches)[:, None, :, :].astype(np.float32)
    nd = np.stack(nd_patches)[:, None, :, :].astype(np.float32)
    return ld, nd


def _split_output(out, sizes):
    """Slice a batched critic output into per-group outputs."""
    from .models import DiscriminatorOutput

    parts, offset = [], 0
    for n in sizes:
        parts.append(DiscriminatorOutput(
            global_score=None if out.global_score is None
            else out.global_score[offset:offset + n],
            pixel_map=None if out.pixel_map is None
            else out.pixel_map[offset:offset + n],
        ))
        offset += n
    return parts


def _scalar(value):
    if value is None:
        return 0.0
    if torch.is_tensor(value):
        return float(value.detach())
    return float(value)


def _nonfinite_indices(*tensors):
    bad = set()
    for t in tensors:
        if t is None:
            continue
        flat = t.detach().reshape(t.shape[0], -1)
        rows = (~torch.isfinite(flat)).any(dim=1).nonzero().reshape(-1)
        bad.update(int(r) for r in rows)
    return sorted(bad)


class Trainer:
    def __init__(self, config: TrainConfig, manifest=None, pool=None,
                 out_dir=None, log_path=None):
        config.validate()
        self.config = config
        self.device = torch.device(config.device)
        self.iteration = 0
        self.out_dir = Path(out_dir) if out_dir else None
        self.log_path = Path(log_path) if log_path else None
        self._log_fh = None

        if pool is None:
            if manifest is None:
                raise ValueError("a manifest or a prebuilt patch pool is required")
            pool = build_patch_pool(manifest, config)
        self.pool_ld, self.pool_nd = pool

        self.generator = Generator(GeneratorSpec(
            layers_per_side=config.generator_layers,
            filters=config.generator_filters,
            kernel_size=config.generator_kernel_size,
            skip_connections=config.generator_layers,
        ))
        he_initialize(self.generator, config.seed)

        flags = config.ablation
        d_spec = dict(encoder_filters=tuple(config.discriminator_filters))
        self.d_img = build_discriminator(flags.discriminator_variant, DiscriminatorSpec(
            in_channels=1, use_decoder=flags.use_unet_decoder, **d_spec))
        he_initialize(self.d_img, config.seed + 1)
        if flags.use_gradient_branch:
            self.d_grd = build_discriminator(flags.discriminator_variant, DiscriminatorSpec(
                in_channels=2, use_decoder=flags.use_unet_decoder, **d_spec))
            he_initialize(self.d_grd, config.seed + 2)
        else:
            self.d_grd = None

        self._nets = [n for n in (self.generator, self.d_img, self.d_grd) if n is not None]
        for net in self._nets:
            net.to(self.device)
            if config.channels_last:
                net.to(memory_format=torch.channels_last)
            net.train()

        betas = (config.adam_beta1, config.adam_beta2)
        self.opt_g = torch.optim.Adam(self.generator.parameters(),
                                      lr=config.learning_rate, betas=betas)
        self.opt_d_img = torch.optim.Adam(self.d_img.parameters(),
                                          lr=config.learning_rate, betas=betas)
        self.opt_d_grd = None
        if self.d_grd is not None:
            self.opt_d_grd = torch.optim.Adam(self.d_grd.parameters(),
                                              lr=config.learning_rate, betas=betas)

        self.data_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 101]))
        self.mix_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 202]))

    # ------------------------------------------------------------------ data

    def _draw_batch(self):
        n = self.pool_ld.shape[0]
        idx = self.data_rng.integers(0, n, size=self.config.batch_size)
        ld = torch.from_numpy(self.pool_ld[idx]).to(self.device)
        nd = torch.from_numpy(self.pool_nd[idx]).to(self.device)
        if self.config.channels_last:
            ld = ld.to(memory_format=torch.channels_last)
            nd = nd.to(memory_format=torch.channels_last)
        return ld, nd

    # ----------------------------------------------------------------- steps

    def discriminator_step(self, ld, nd):
        """One critic update on both domains; the denoiser is untouched."""
        cfg = self.config
        snapshot = self._param_snapshot(self.generator) if cfg.check_isolation else None

        with torch.no_grad():
            den = self.generator(ld)

        masks = None
        if cfg.ablation.use_cutmix and should_apply(cfg.p_mix, self.mix_rng):
            masks, _ = sample_mask_batch(ld.shape[0], ld.shape[-1], self.mix_rng)
            masks = masks.to(self.device)

        d_img, reg_img, con_img = self._domain_terms(self.d_img, nd, den, masks)
        if self.d_grd is not None:
            d_grd, reg_grd, con_grd = self._domain_terms(
                self.d_grd, sobel_gradient(nd), sobel_gradient(den), masks)
        else:
            d_grd = reg_grd = con_grd = None

        d_dud = d_img if d_grd is None else d_img + d_grd
        reg = self._opt_sum(reg_img, reg_grd)
        con = self._opt_sum(con_img, con_grd)
        d_total = total_discriminator_loss(d_dud, reg, con)

        if not torch.isfinite(d_total):
            raise TrainingDivergedError(
                f"non-finite critic loss at iteration {self.iteration}; "
                f"offending batch indices {_nonfinite_indices(den, nd)}")

        self.opt_d_img.zero_grad(set_to_none=True)
        if self.opt_d_grd is not None:
            self.opt_d_grd.zero_grad(set_to_none=True)
        d_total.backward()
        self.opt_d_img.step()
        if self.opt_d_grd is not None:
            self.opt_d_grd.step()

        if snapshot is not None:
            self._assert_unchanged(self.generator, snapshot, "generator",
                                   "discriminator step")
        return {
            "d_img": _scalar(d_img), "d_grd": _scalar(d_grd),
            "d_dud": _scalar(d_dud), "reg": _scalar(reg), "con": _scalar(con),
            "d_total": _scalar(d_total),
        }

    def _domain_terms(self, critic, real, fake, masks):
        """LSGAN + CutMix terms for one domain with a single critic forward."""
        batch = real.shape[0]
        if masks is not None:
            mixed = mix_images(real, fake, masks)
            out = critic(torch.cat([real, fake, mixed]))
            real_out, fake_out, mixed_out = _split_output(out, [batch] * 3)
        else:
            out = critic(torch.cat([real, fake]))
            real_out, fake_out = _split_output(out, [batch] * 2)
            mixed_out = None

        d_term = lsgan_d_term(real_out, fake_out)
        reg = con = None
        if mixed_out is not None:
            reg = cutmix_reg_loss(mixed_out, masks)
            if mixed_out.pixel_map is not None:
                con = consistency_loss(mixed_out.pixel_map, real_out.pixel_map,
                                       fake_out.pixel_map, masks)
        return d_term, reg, con

    @staticmethod
    def _opt_sum(a, b):
        terms = [t for t in (a, b) if t is not None]
        if not terms:
            return 0.0
        return terms[0] if len(terms) == 1 else terms[0] + terms[1]

    def generator_step(self, ld, nd):
        """One denoiser update; critic parameters are frozen.

        During the pixel-only warmup (iteration < pretrain_iterations) the
        objective is lambda_img * MSE alone; the unapplied terms are
        reported as 0, like the skipped CutMix terms.
        """
        cfg = self.config
        pretraining = self.iteration < cfg.pretrain_iterations
        snapshots = None
        if cfg.check_isolation:
            snapshots = [(n, self._param_snapshot(n))
                         for n in (self.d_img, self.d_grd) if n is not None]

        frozen = [p for n in (self.d_img, self.d_grd) if n is not None
                  for p in n.parameters()]
        for p in frozen:
            p.requires_grad_(False)
        try:
            den = self.generator(ld)
            if cfg.loss_weights.lambda_adv != 0.0 and not pretraining:
                img_out = self.d_img(den)
                grd_out = self.d_grd(sobel_gradient(den)) if self.d_grd is not None else None
                adv = generator_adv_loss(img_out, grd_out)
            else:
                adv = 0.0
            if pretraining:
                pix_img = ((den - nd) ** 2).mean()
                pix_grd = 0.0
            else:
                pix_img, pix_grd = pixel_losses(den, nd)
            g_total = total_generator_loss(cfg.loss_weights, adv, pix_img, pix_grd)

            if not torch.isfinite(g_total):
                raise TrainingDivergedError(
                    f"non-finite generator loss at iteration {self.iteration}; "
                    f"offending batch indices {_nonfinite_indices(den, nd)}")

            self.opt_g.zero_grad(set_to_none=True)
            g_total.backward()
            self.opt_g.step()
        finally:
            for p in frozen:
                p.requires_grad_(True)

        if snapshots is not None:
            for net, snap in snapshots:
                name = "image critic" if net is self.d_img else "gradient critic"
                self._assert_unchanged(net, snap, name, "generator step")
        return {
            "adv": _scalar(adv), "pix_img": _scalar(pix_img),
            "pix_grd": _scalar(pix_grd), "g_total": _scalar(g_total),
        }

    def step(self):
        """One full iteration: critic update then denoiser update."""
        ld, nd = self._draw_batch()
        d_terms = self.discriminator_step(ld, nd)
        g_terms = self.generator_step(ld, nd)
        report = LossReport(**d_terms, **g_terms)
        self.iteration += 1
        return report

    # ------------------------------------------------------------- main loop

    def train(self):
        cfg = self.config
        try:
            while self.iteration < cfg.max_iterations:
                report = self.step()
                if cfg.log_every and self.iteration % cfg.log_every == 0:
                    self._log(report)
                if (cfg.checkpoint_every and self.out_dir
                        and self.iteration % cfg.checkpoint_every == 0
                        and self.iteration < cfg.max_iterations):
                    self.save(self.out_dir / f"checkpoint_{self.iteration:07d}.dugk")
        finally:
            if self._log_fh is not None:
                self._log_fh.close()
                self._log_fh = None
        return self

    def _log(self, report):
        line = report.to_json(iteration=self.iteration)
        if self.log_path is not None:
            if self._log_fh is None:
                self.log_path.parent.mkdir(parents=True, exist_ok=True)
                self._log_fh = open(self.log_path, "a")
            self._log_fh.write(line + "\n")
            self._log_fh.flush()

    # ------------------------------------------------------------ invariants

    @staticmethod
    def _param_snapshot(net):
        return [p.detach().clone() for p in net.parameters()]

    @staticmethod
    def _assert_unchanged(net, snapshot, name, during):
        for p, saved in zip(net.parameters(), snapshot):
            if not torch.equal(p.detach(), saved):
                raise IsolationError(f"{name} parameters changed during a {during}")

    def spectral_norm_modules(self):
        for net, prefix in ((self.d_img, "d_img"), (self.d_grd, "d_grd")):
            if net is None:
                continue
            for name, mod in net.named_modules():
                if isinstance(mod, SpectralNorm):
                    yield f"{prefix}.{name}", mod

    # ----------------------------------------------------------- persistence

    def save(self, path):
        header = {
            "kind": "trainer_state",
            "iteration": self.iteration,
            "config": config_snapshot_dict(self.config),
            "rng": {
                "data": _rng_state(self.data_rng),
                "mix": _rng_state(self.mix_rng),
            },
        }
        tensors = {}
        for net, prefix in ((self.generator, "generator"), (self.d_img, "d_img"),
                            (self.d_grd, "d_grd")):
            if net is None:
                continue
            for name, t in net.state_dict().items():
                tensors[f"{prefix}.{name}"] = t.detach().cpu().contiguous().numpy()
        for opt, prefix in ((self.opt_g, "optim.g"), (self.opt_d_img, "optim.d_img"),
                            (self.opt_d_grd, "optim.d_grd")):
            if opt is None:
                continue
            for idx, state in opt.state_dict()["state"].items():
                for key, t in state.items():
                    tensors[f"{prefix}.{idx}.{key}"] = (
                        t.detach().cpu().contiguous().numpy()
                        if torch.is_tensor(t) else np.asarray(t, dtype=np.float32))
        ckpt.save_checkpoint(path, header, tensors)
        return path

    @classmethod
    def from_checkpoint(cls, path, manifest=None, pool=None, out_dir=None,
                        log_path=None):
        header, tensors = ckpt.load_checkpoint(path)
        if header.get("kind") != "trainer_state":
            raise ckpt.CheckpointError(f"{path}: not a trainer checkpoint")
        config = config_from_snapshot(header["config"])
        trainer = cls(config, manifest=manifest, pool=pool, out_dir=out_dir,
                      log_path=log_path)
        trainer.iteration = int(header["iteration"])

        for net, prefix in ((trainer.generator, "generator"), (trainer.d_img, "d_img"),
                            (trainer.d_grd, "d_grd")):
            if net is None:
                continue
            state = {name[len(prefix) + 1:]: torch.from_numpy(arr)
                     for name, arr in tensors.items()
                     if name.startswith(prefix + ".")}
            net.load_state_dict(state, strict=True)

        for opt, prefix in ((trainer.opt_g, "optim.g"),
                            (trainer.opt_d_img, "optim.d_img"),
                            (trainer.opt_d_grd, "optim.d_grd")):
            if opt is None:
                continue
            _load_optimizer(opt, prefix, tensors)

        trainer.data_rng.bit_generator.state = header["rng"]["data"]
        trainer.mix_rng.bit_generator.state = header["rng"]["mix"]
        return trainer


def _rng_state(rng):
    state = rng.bit_generator.state
    return json.loads(json.dumps(state))  # plain JSON types only


def _load_optimizer(opt, prefix, tensors):
    groups = opt.state_dict()["param_groups"]
    state = {}
    for name, arr in tensors.items():
        if not name.startswith(prefix + "."):
            continue
        rest = name[len(prefix) + 1:]
        idx_str, key = rest.split(".", 1)
        entry = state.setdefault(int(idx_str), {})
        t = torch.from_numpy(arr)
        entry[key] = t.reshape(()) if key == "step" and t.ndim == 0 else t
    if state:
        opt.load_state_dict({"state": state, "param_groups": groups})


def train(config, manifest, out_dir=None, log_path=None):
    """Build a Trainer, run it to max_iterations, and return it."""
    trainer = Trainer(config, manifest=manifest, out_dir=out_dir, log_path=log_path)
    return trainer.train()


# --------------------------------------------------------- checkpoint loading

def load_generator(path):
    """Rebuild just the denoiser from a checkpoint, in eval mode."""
    header, tensors = ckpt.load_checkpoint(path)
    config = config_from_snapshot(header["config"])
    gen = Generator(GeneratorSpec(
        layers_per_side=config.generator_layers,
        filters=config.generator_filters,
        kernel_size=config.generator_kernel_size,
        skip_connections=config.generator_layers,
    ))
    state = {name[len("generator."):]: torch.from_numpy(arr)
             for name, arr in tensors.items() if name.startswith("generator.")}
    gen.load_state_dict(state, strict=True)
    gen.eval()
    return gen


def load_discriminator(path, domain="img"):
    """Rebuild one critic (image or gradient domain) from a checkpoint."""
    header, tensors = ckpt.load_checkpoint(path)
    config = config_from_snapshot(header["config"])
    prefix = f"d_{domain}"
    if not any(n.startswith(prefix + ".") for n in tensors):
        raise ckpt.CheckpointError(f"{path}: no {prefix} parameters stored")
    spec = DiscriminatorSpec(
        in_channels=1 if domain == "img" else 2,
        encoder_filters=tuple(config.discriminator_filters),
        use_decoder=config.ablation.use_unet_decoder,
    )
    critic = build_discriminator(config.ablation.discriminator_variant, spec)
    state = {name[len(prefix) + 1:]: torch.from_numpy(arr)
             for name, arr in tensors.items() if name.startswith(prefix + ".")}
    critic.load_state_dict(state, strict=True)
    critic.eval()
    return critic
