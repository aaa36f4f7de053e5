"""Training phases: MDTN pretraining, MDSG training, joint fine-tuning.

Randomness is derived from ``(seed, phase, epoch or step)`` so a run resumed
from a checkpoint replays exactly the batches and density draws of an
uninterrupted run. Checkpoints carry model and optimizer state plus the loss
history; identical inputs produce identical bytes.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import Config, PHASES, parse_widths
from .dataset import load_split
from .errors import ConfigurationError, TrainingError
from .mdsg import (ContentGenerator, DensityEncoder, MdsgConfig, afd_weights,
                   loss_afd_batch, loss_sketch_weighted, neighbor_keys)
from .mdtn import (
    MDTN,
    Discriminator,
    FeatureExtractor,
    MdtnConfig,
    MdtnLossWeights,
    generator_objective,
    loss_adversarial,
)

log = logging.getLogger(__name__)

_PHASE_ID = {name: i + 1 for i, name in enumerate(PHASES)}


@dataclass(frozen=True)
class CurriculumState:
    epoch: int
    middle_scale_probability: float


def middle_probability(epoch, total_epochs, max_probability=0.7, ramp_fraction=0.5):
    """Linear ramp from 0 at epoch 0 to ``max_probability`` after the ramp."""
    ramp = max(total_epochs * ramp_fraction, 1e-9)
    return float(max_probability * min(1.0, epoch / ramp))


def curriculum_for(epoch, total_epochs, cfg):
    return CurriculumState(epoch, middle_probability(
        epoch, total_epochs, cfg.curriculum.max_middle_probability, cfg.curriculum.ramp_fraction))


def sample_density(curriculum, densities, rng):
    """Draw a training density: a key with prob 1-p, else uniform over the key range."""
    keys = list(densities)
    if rng.random() < curriculum.middle_scale_probability:
        return float(rng.uniform(keys[0], keys[-1]))
    return float(keys[rng.integers(len(keys))])


def step_rng(seed, phase, step):
    return np.random.default_rng([int(seed), _PHASE_ID[phase], 1, int(step)])


def epoch_order(seed, phase, epoch, n):
    return np.random.default_rng([int(seed), _PHASE_ID[phase], 2, int(epoch)]).permutation(n)


def mdtn_config_from(cfg, variant=None):
    m = cfg.model
    return MdtnConfig(resolution=m.resolution, widths=parse_widths(m.mdtn_widths),
                      merge_widths=parse_widths(m.merge_widths), n_style=m.n_style,
                      residual_blocks=m.residual_blocks, n_disc_scales=m.n_disc_scales,
                      disc_channels=m.disc_channels, variant=variant or m.variant)


def mdsg_config_from(cfg):
    m = cfg.model
    return MdsgConfig(resolution=m.resolution, base_channels=m.mdsg_base_channels,
                      bottleneck_channels=m.mdsg_bottleneck_channels)


def _adam(params, cfg):
    return torch.optim.Adam(params, lr=cfg.run.learning_rate, betas=(0.5, 0.999))


def _limit(n):
    return n if n and n > 0 else None


def _batches(n, batch_size):
    return (n + batch_size - 1) // batch_size


def _history_tensor(history, columns):
    arr = np.array([[row[c] for c in columns] for row in history], dtype=np.float64)
    return torch.from_numpy(arr.reshape(len(history), len(columns)))


def _history_rows(tensor, columns):
    return [dict(zip(columns, map(float, row))) for row in tensor.numpy()]


def write_loss_csv(path, history, columns):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in history:
            writer.writerow([int(row[c]) if c in ("step", "epoch") else repr(float(row[c]))
                             for c in columns])


@dataclass
class PhaseResult:
    checkpoint: Path
    digest: str
    history: list
    columns: list


class _Run:
    """Shared bookkeeping for one phase: step loop, resume, checkpointing."""

    def __init__(self, phase, cfg, epochs, n_items, resume_from):
        self.phase, self.cfg, self.epochs = phase, cfg, epochs
        self.steps_per_epoch = _batches(n_items, cfg.run.batch_size)
        self.n_items = n_items
        self.total_steps = epochs * self.steps_per_epoch
        self.resume_from = resume_from
        self.history = []

    def batches(self, start_step, stop_after):
        bs = self.cfg.run.batch_size
        end = self.total_steps if stop_after is None else min(self.total_steps, stop_after)
        for step in range(start_step, end):
            epoch, k = divmod(step, self.steps_per_epoch)
            order = epoch_order(self.cfg.run.seed, self.phase, epoch, self.n_items)
            idx = order[k * bs:(k + 1) * bs]
            yield step, epoch, torch.from_numpy(np.sort(idx)), step_rng(self.cfg.run.seed, self.phase, step)


def _check_finite(value, phase, step):
    if not np.isfinite(value):
        raise TrainingError(f"{phase}: non-finite loss at step {step}")


def _resume_state(path, phase, prefixes, optimizers, expect_meta):
    kind, meta, tensors = ckpt.load(path)
    if kind != phase:
        raise ConfigurationError(f"checkpoint {path} is a {kind} checkpoint, expected {phase}")
    for key, value in expect_meta.items():
        if meta.get(key) != value:
            raise ConfigurationError(f"checkpoint {path} was written with a different {key}")
    ckpt.load_modules(tensors, prefixes)
    for name, opt in optimizers.items():
        ckpt.restore_optimizer(name, opt, tensors, meta["optim"][name])
    history = _history_rows(tensors["history"], meta["history_columns"])
    return meta["step"], history


def _save(path, phase, meta, modules, optimizers, history, columns):
    tensors = ckpt.flatten_modules(modules)
    optim_meta = {}
    for name, opt in optimizers.items():
        t, info = ckpt.flatten_optimizer(name, opt)
        tensors.update(t)
        optim_meta[name] = info
    tensors["history"] = _history_tensor(history, columns)
    meta = dict(meta, optim=optim_meta, history_columns=columns)
    return ckpt.save(path, phase, meta, tensors)


# --------------------------------------------------------------------------- MDTN

MDTN_COLUMNS = ["step", "epoch", "total", "recon", "feature", "g_adv", "d_loss"]


def _mdtn_weights(cfg):
    L = cfg.losses
    return MdtnLossWeights(L.lambda_recon, L.lambda_feat, L.lambda_adv)


def build_mdtn(cfg, variant=None):
    torch.manual_seed(cfg.run.seed)
    mcfg = mdtn_config_from(cfg, variant)
    model, disc = MDTN(mcfg), Discriminator(mcfg)
    return model, disc, FeatureExtractor(cfg.model.phi_seed)


def _mdtn_step(model, disc, phi, opt_g, opt_d, sketch, image, weights):
    fake = model(sketch, image)
    d_loss, _ = loss_adversarial(disc(image, sketch), disc(fake.detach(), sketch))
    opt_d.zero_grad()
    d_loss.backward()
    opt_d.step()
    total, parts = generator_objective(image, fake, disc(fake, sketch), phi, weights)
    opt_g.zero_grad()
    total.backward()
    opt_g.step()
    return {"total": total.item(), "recon": parts["recon"].item(),
            "feature": parts["feature"].item(), "g_adv": parts["g_adv"].item(),
            "d_loss": d_loss.item()}


def _mdtn_meta(cfg, mcfg, densities, step, extra=None):
    meta = {"architecture": mcfg.to_dict(), "config_digest": cfg.digest(),
            "key_densities": list(densities), "step": step, "seed": cfg.run.seed,
            "phi_seed": cfg.model.phi_seed}
    meta.update(extra or {})
    return meta


def pretrain_mdtn(cfg: Config, dataset_root, out_path, variant=None, resume_from=None,
                  stop_after_steps=None):
    """Train the MDTN on (key sketch, image) pairs with reference = source."""
    data = load_split(dataset_root, "train", _limit(cfg.run.train_limit))
    if data.sketches.shape[1] < 2:
        raise ConfigurationError("dataset must provide at least two key levels")
    model, disc, phi = build_mdtn(cfg, variant)
    opt_g, opt_d = _adam(model.parameters(), cfg), _adam(disc.parameters(), cfg)
    run = _Run("pretrain_mdtn", cfg, cfg.run.epochs_mdtn, len(data), resume_from)
    modules = {"mdtn": model, "disc": disc}
    optims = {"opt_g": opt_g, "opt_d": opt_d}
    start = 0
    if resume_from is not None:
        start, run.history = _resume_state(resume_from, "pretrain_mdtn", modules, optims,
                                           {"config_digest": cfg.digest(),
                                            "architecture": model.config.to_dict()})
    weights = _mdtn_weights(cfg)
    n_levels = data.sketches.shape[1]
    step_done = start
    for step, epoch, idx, rng in run.batches(start, stop_after_steps):
        levels = torch.from_numpy(rng.integers(n_levels, size=len(idx)))
        sketch = data.sketches[idx, levels].unsqueeze(1)
        row = _mdtn_step(model, disc, phi, opt_g, opt_d, sketch, data.images[idx], weights)
        _check_finite(row["total"], "pretrain_mdtn", step)
        run.history.append(dict(row, step=step, epoch=epoch))
        step_done = step + 1
    meta = _mdtn_meta(cfg, model.config, data.densities, step_done,
                      {"variant": model.config.variant, "epochs": run.epochs,
                       "steps_per_epoch": run.steps_per_epoch})
    digest = _save(out_path, "pretrain_mdtn", meta, modules, optims, run.history, MDTN_COLUMNS)
    write_loss_csv(Path(out_path).with_suffix(".losses.csv"), run.history, MDTN_COLUMNS)
    return PhaseResult(Path(out_path), digest, run.history, MDTN_COLUMNS)


def load_mdtn(path):
    kind, meta, tensors = ckpt.load(path)
    if kind not in ("pretrain_mdtn", "joint_finetune"):
        raise ConfigurationError(f"{path} does not hold an MDTN ({kind})")
    model = MDTN(MdtnConfig(**meta["architecture"]))
    ckpt.load_modules(tensors, {"mdtn": model})
    model.eval()
    return model, meta


# --------------------------------------------------------------------------- MDSG

MDSG_COLUMNS = ["step", "epoch", "total", "sketch", "scale", "afd", "middle_fraction"]


def build_mdsg(cfg):
    torch.manual_seed(cfg.run.seed + 7919)
    mcfg = mdsg_config_from(cfg)
    return ContentGenerator(mcfg), DensityEncoder(mcfg)


def mdsg_setting(cfg):
    L = cfg.losses
    if L.use_afd and not L.use_scale:
        return "recon+afd"
    return "recon+scale+afd" if L.use_afd else ("recon+scale" if L.use_scale else "recon")



def _mdsg_step(g_c, e_s, opt, cfg, image, keys, densities, draws):
    """One MDSG update; ``draws`` holds one sampled density per item."""
    L = cfg.losses
    s = torch.tensor(draws, dtype=torch.float32)
    info = [neighbor_keys(v, densities) for v in draws]
    is_key = torch.tensor([i[2] for i in info])
    pred = g_c(image, s)
    zero = pred.sum() * 0.0
    sketch_loss = scale_loss = afd_loss = zero
    if bool(is_key.any()):
        key_idx = torch.tensor([densities.index(min(densities, key=lambda d: abs(d - v)))
                                for v in draws])
        target = keys[torch.arange(len(draws)), key_idx].unsqueeze(1)
        sketch_loss = loss_sketch_weighted(pred[is_key], target[is_key], L.sketch_ink_weight)
        if L.use_scale:
            real = e_s(target[is_key])
            scale_loss = scale_loss + (real - s[is_key]).abs().mean()
    if L.use_scale:
        scale_loss = scale_loss + (e_s(pred) - s).abs().mean()
    middle = ~is_key
    if L.use_afd and bool(middle.any()):
        lo = torch.tensor([densities[i[0]] for i in info], dtype=torch.float32)[middle]
        hi = torch.tensor([densities[i[1]] for i in info], dtype=torch.float32)[middle]
        w = torch.tensor([afd_weights(float(v), float(a), float(b))
                          for v, a, b in zip(s[middle], lo, hi)], dtype=torch.float32)
        img_m = image[middle]
        # all three feature sets get gradients: a detached target is chased
        # by the shared encoder and the bottleneck scale runs away
        afd_loss = loss_afd_batch(g_c.features(img_m, s[middle]), g_c.features(img_m, lo),
                                  g_c.features(img_m, hi), w)
    total = L.lambda_sketch * sketch_loss + L.lambda_scale * scale_loss + L.lambda_afd * afd_loss
    opt.zero_grad()
    total.backward()
    opt.step()
    return {"total": total.item(), "sketch": sketch_loss.item(), "scale": scale_loss.item(),
            "afd": afd_loss.item(), "middle_fraction": float(middle.float().mean())}


def train_mdsg(cfg: Config, dataset_root, out_path, resume_from=None, stop_after_steps=None):
    """Train G_c and E_s with the density curriculum."""
    data = load_split(dataset_root, "train", _limit(cfg.run.train_limit))
    densities = list(data.densities)
    g_c, e_s = build_mdsg(cfg)
    opt = _adam(list(g_c.parameters()) + list(e_s.parameters()), cfg)
    run = _Run("train_mdsg", cfg, cfg.run.epochs_mdsg, len(data), resume_from)
    modules, optims = {"g_c": g_c, "e_s": e_s}, {"opt": opt}
    start = 0
    if resume_from is not None:
        start, run.history = _resume_state(resume_from, "train_mdsg", modules, optims,
                                           {"config_digest": cfg.digest()})
    step_done = start
    for step, epoch, idx, rng in run.batches(start, stop_after_steps):
        cur = curriculum_for(epoch, run.epochs, cfg)
        draws = [sample_density(cur, densities, rng) for _ in range(len(idx))]
        row = _mdsg_step(g_c, e_s, opt, cfg, data.images[idx], data.sketches[idx],
                         densities, draws)
        _check_finite(row["total"], "train_mdsg", step)
        run.history.append(dict(row, step=step, epoch=epoch))
        step_done = step + 1
    meta = {"architecture": g_c.config.to_dict(), "config_digest": cfg.digest(),
            "key_densities": densities, "step": step_done, "seed": cfg.run.seed,
            "setting": mdsg_setting(cfg), "epochs": run.epochs,
            "steps_per_epoch": run.steps_per_epoch}
    digest = _save(out_path, "train_mdsg", meta, modules, optims, run.history, MDSG_COLUMNS)
    write_loss_csv(Path(out_path).with_suffix(".losses.csv"), run.history, MDSG_COLUMNS)
    return PhaseResult(Path(out_path), digest, run.history, MDSG_COLUMNS)


def load_mdsg(path):
    kind, meta, tensors = ckpt.load(path)
    if kind not in ("train_mdsg", "joint_finetune"):
        raise ConfigurationError(f"{path} does not hold an MDSG ({kind})")
    arch = meta["mdsg_architecture"] if kind == "joint_finetune" else meta["architecture"]
    mcfg = MdsgConfig(**arch)
    g_c, e_s = ContentGenerator(mcfg), DensityEncoder(mcfg)
    ckpt.load_modules(tensors, {"g_c": g_c, "e_s": e_s})
    g_c.eval()
    e_s.eval()
    return g_c, e_s, meta


# --------------------------------------------------------------------------- joint

def joint_finetune(cfg: Config, mdsg_path, mdtn_path, dataset_root, out_path,
                   resume_from=None, stop_after_steps=None):
    """Fine-tune the MDTN on sketches drawn from the frozen MDSG."""
    g_c, e_s, mdsg_meta = load_mdsg(mdsg_path)
    kind, mdtn_meta, mdtn_tensors = ckpt.load(mdtn_path)
    if kind != "pretrain_mdtn":
        raise ConfigurationError(f"{mdtn_path} is not a pretrained MDTN checkpoint ({kind})")
    if g_c.config.resolution != mdtn_meta["architecture"]["resolution"]:
        raise ConfigurationError(
            f"incompatible checkpoints (format {ckpt.FORMAT_VERSION}): MDSG resolution "
            f"{g_c.config.resolution} vs MDTN {mdtn_meta['architecture']['resolution']}")
    if list(mdsg_meta["key_densities"]) != list(mdtn_meta["key_densities"]):
        raise ConfigurationError(
            f"incompatible checkpoints (format {ckpt.FORMAT_VERSION}): key densities differ")
    for p in list(g_c.parameters()) + list(e_s.parameters()):
        p.requires_grad_(False)
    frozen_digest = ckpt.module_digest(g_c) + ckpt.module_digest(e_s)

    data = load_split(dataset_root, "train", _limit(cfg.run.train_limit))
    densities = list(data.densities)
    model = MDTN(MdtnConfig(**mdtn_meta["architecture"]))
    disc = Discriminator(model.config)
    ckpt.load_modules(mdtn_tensors, {"mdtn": model, "disc": disc})
    phi = FeatureExtractor(mdtn_meta.get("phi_seed", cfg.model.phi_seed))
    opt_g, opt_d = _adam(model.parameters(), cfg), _adam(disc.parameters(), cfg)
    modules = {"mdtn": model, "disc": disc}
    optims = {"opt_g": opt_g, "opt_d": opt_d}
    run = _Run("joint_finetune", cfg, cfg.run.epochs_finetune, len(data), resume_from)
    start = 0
    if resume_from is not None:
        start, run.history = _resume_state(resume_from, "joint_finetune", modules, optims,
                                           {"config_digest": cfg.digest()})
    weights = _mdtn_weights(cfg)
    step_done = start
    for step, epoch, idx, rng in run.batches(start, stop_after_steps):
        cur = curriculum_for(epoch, run.epochs, cfg)
        draws = torch.tensor([sample_density(cur, densities, rng) for _ in range(len(idx))])
        image = data.images[idx]
        with torch.no_grad():
            sketch = (g_c(image, draws) > 0.5).float()
        row = _mdtn_step(model, disc, phi, opt_g, opt_d, sketch, image, weights)
        _check_finite(row["total"], "joint_finetune", step)
        run.history.append(dict(row, step=step, epoch=epoch))
        step_done = step + 1
    if ckpt.module_digest(g_c) + ckpt.module_digest(e_s) != frozen_digest:
        raise TrainingError("MDSG weights changed during joint fine-tuning")
    modules_out = {"mdtn": model, "disc": disc, "g_c": g_c, "e_s": e_s}
    meta = _mdtn_meta(cfg, model.config, densities, step_done,
                      {"mdsg_architecture": g_c.config.to_dict(),
                       "mdsg_digest": ckpt.module_digest(g_c),
                       "e_s_digest": ckpt.module_digest(e_s),
                       "source_mdtn_digest": ckpt.file_digest(mdtn_path),
                       "source_mdsg_digest": ckpt.file_digest(mdsg_path),
                       "variant": model.config.variant, "epochs": run.epochs,
                       "steps_per_epoch": run.steps_per_epoch})
    digest = _save(out_path, "joint_finetune", meta, modules_out, optims, run.history,
                   MDTN_COLUMNS)
    write_loss_csv(Path(out_path).with_suffix(".losses.csv"), run.history, MDTN_COLUMNS)
    return PhaseResult(Path(out_path), digest, run.history, MDTN_COLUMNS)
