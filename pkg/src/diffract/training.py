"""Two-stage training: the denoiser first, then the quality head on a frozen denoiser.

Every random draw is keyed by ``(seed, stage, epoch, sample index)`` so a
run is reproducible regardless of batch composition.
"""

import json
import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConsistencyError, InvalidConfigError, InvalidInputError, TrainingError
from .model import parameter_checksum
from .schedule import ScheduleConfig, forward_corrupt, partial_denoise_mix, r_target, step_of_quality
from .synth import Sample, generate_pure_noise

STAGE_DENOISER = 1
STAGE_QUALITY = 2


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 96
    lr_max: float = 1e-3
    lr_min: float = 1e-7
    batch_size: int = 16
    betas: tuple = (0.9, 0.9)
    weight_decay: float = 0.0
    mixup_prob: float = 0.25
    mixup_max_weight: float = 0.25
    noise_only_rate: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidConfigError("epochs must be >= 1")
        if not 0 < self.lr_min < self.lr_max:
            raise InvalidConfigError("need 0 < lr_min < lr_max")
        if self.batch_size < 1:
            raise InvalidConfigError("batch_size must be >= 1")
        for name in ("mixup_prob", "mixup_max_weight", "noise_only_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidConfigError(f"{name} must be in [0, 1]")


def lr_at(epoch, cfg):
    """Cosine annealing from ``lr_max`` at epoch 0 to ``lr_min`` at ``cfg.epochs``."""
    if not 0 <= epoch <= cfg.epochs:
        raise InvalidInputError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1 + math.cos(math.pi * epoch / cfg.epochs))


def mixup(a, b, weight, max_weight=0.25):
    """Blend ``b`` into ``a`` with weight ``weight``; the result is noise only if both are."""
    if not 0.0 <= weight <= max_weight:
        raise InvalidInputError(f"mixup weight {weight} outside [0, {max_weight}]")
    if a.x.shape != b.x.shape:
        raise InvalidInputError("mixup samples must share a shape")
    noise = a.is_noise and b.is_noise
    q = 0.0 if noise else (1 - weight) * a.q + weight * b.q
    return Sample(
        x0=(1 - weight) * np.asarray(a.x0, np.float64) + weight * np.asarray(b.x0, np.float64),
        x=(1 - weight) * np.asarray(a.x, np.float64) + weight * np.asarray(b.x, np.float64),
        q=float(q),
        is_noise=noise,
    )


def sample_rng(seed, stage, epoch, index):
    return np.random.default_rng([seed, stage, epoch, index])


def epoch_order(n, seed, stage, epoch):
    return np.random.default_rng([seed, stage, epoch, 2**31]).permutation(n)


def make_batches(order, batch_size):
    n_batches = max(1, math.ceil(len(order) / batch_size))
    return np.array_split(order, n_batches)


def denoiser_example(dataset, index, epoch, cfg, sched):
    """One stage-1 training example: ``(x_t, x, t, x0)``.

    The draws are made in a fixed order whether or not the augmentations
    are enabled, so toggling them leaves ``t`` and the noise untouched.
    """
    rng = sample_rng(cfg.seed, STAGE_DENOISER, epoch, index)
    u_noise = rng.uniform()
    u_mix = rng.uniform()
    partner = int(rng.integers(len(dataset)))
    w = rng.uniform(0.0, cfg.mixup_max_weight)
    t = int(rng.integers(0, sched.T + 1))
    corrupt_seed = int(rng.integers(2**63))
    noise_seed = int(rng.integers(2**63))

    s = dataset[index]
    if u_noise < cfg.noise_only_rate:
        size = s.x.shape[0]
        s = generate_pure_noise(size, noise_seed)
    elif u_mix < cfg.mixup_prob:
        s = mixup(s, dataset[partner], w, cfg.mixup_max_weight)
    x_t = forward_corrupt(s.x0, s.x, s.q, t, sched, corrupt_seed)
    return x_t, np.asarray(s.x, np.float64), t, np.asarray(s.x0, np.float64)


def denoiser_batch(dataset, indices, epoch, cfg, sched, dtype=torch.float32):
    ex = [denoiser_example(dataset, int(i), epoch, cfg, sched) for i in indices]
    x_t = torch.as_tensor(np.stack([e[0] for e in ex]), dtype=dtype)
    x = torch.as_tensor(np.stack([e[1] for e in ex]), dtype=dtype)
    t = torch.as_tensor([e[2] for e in ex], dtype=torch.float64)
    x0 = torch.as_tensor(np.stack([e[3] for e in ex]), dtype=dtype)
    return x_t, x, t, x0


def l1_denoiser_loss(model, batch):
    x_t, x, t, x0 = batch
    xhat0, _ = model(x_t, x, t)
    return (xhat0 - x0).abs().mean()


def _emit(log, record):
    if log is None:
        return
    if callable(log):
        log(record)
    else:
        log.write(json.dumps(record, sort_keys=True) + "\n")


def _param_dtype(module):
    return next(module.parameters()).dtype


def _optimizer(params, cfg):
    return torch.optim.AdamW(params, lr=cfg.lr_max, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)


def train_denoiser(dataset, model, cfg, sched=None, log=None):
    """Stage 1. Returns ``(model, per-epoch mean L1 loss)``."""
    sched = sched or ScheduleConfig()
    if len(dataset) == 0:
        raise InvalidInputError("empty training set")
    h, w = dataset[0].x.shape
    if (h, w) != (model.size, model.size):
        raise InvalidInputError(f"dataset patterns {h}x{w} do not match model size {model.size}")
    torch.manual_seed(cfg.seed)
    dtype = _param_dtype(model)
    opt = _optimizer(model.parameters(), cfg)
    history = []
    model.train()
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        lr = lr_at(epoch, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        total = 0.0
        order = epoch_order(len(dataset), cfg.seed, STAGE_DENOISER, epoch)
        for idx in make_batches(order, cfg.batch_size):
            batch = denoiser_batch(dataset, idx, epoch, cfg, sched, dtype)
            loss = l1_denoiser_loss(model, batch)
            if not torch.isfinite(loss):
                raise TrainingError(f"denoiser loss diverged in epoch {epoch}", epoch=epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        mean = total / len(dataset)
        history.append(mean)
        _emit(log, {"stage": "denoiser", "epoch": epoch, "mean_loss": mean, "lr": lr,
                    "wall_ms": round((time.perf_counter() - start) * 1000, 3)})
    model.eval()
    return model, history


@torch.no_grad()
def _initial_estimates(model, dataset, T, batch_size):
    """``f(x, x, t_x)`` for every sample, the anchor of the partial-denoise mix."""
    dtype = _param_dtype(model)
    out = []
    for idx in make_batches(np.arange(len(dataset)), batch_size):
        x = torch.as_tensor(np.stack([dataset[int(i)].x for i in idx]), dtype=dtype)
        t = torch.as_tensor([step_of_quality(dataset[int(i)].q, T) for i in idx], dtype=torch.float64)
        xhat0, _ = model(x, x, t)
        out.extend(xhat0.double().numpy())
    return out


def quality_example(dataset, anchors, index, epoch, cfg, T):
    """One stage-2 example: ``(x_t, x, t_rand, (q, r), t)``.

    ``t`` builds the input and the progress target; the network sees an
    independently drawn ``t_rand``.
    """
    s = dataset[index]
    t_x = step_of_quality(s.q, T)
    rng = sample_rng(cfg.seed, STAGE_QUALITY, epoch, index)
    t = int(rng.integers(0, t_x + 1))
    target = (float(s.q), r_target(t, T, s.is_noise))
    x_t = partial_denoise_mix(anchors[index], s.x, t, t_x)
    t_rand = int(rng.integers(0, T + 1))
    return x_t, np.asarray(s.x, np.float64), t_rand, target, t


def train_quality_head(dataset, frozen_model, head, cfg, sched=None, log=None):
    """Stage 2. Only ``head`` is optimized; returns ``(head, per-epoch mean L1 loss)``."""
    sched = sched or ScheduleConfig()
    if len(dataset) < 2:
        raise InvalidInputError("quality training needs at least two samples")
    if cfg.batch_size < 2:
        # batch norm in the head needs more than one value per channel
        raise InvalidConfigError("quality training needs batch_size >= 2")
    if not any(s.is_noise for s in dataset):
        raise InvalidInputError("quality training needs pure-noise samples in the dataset")
    T = sched.T
    before = parameter_checksum(frozen_model)
    torch.manual_seed(cfg.seed)
    frozen_model.eval()
    flags = [p.requires_grad for p in frozen_model.parameters()]
    for p in frozen_model.parameters():
        p.requires_grad_(False)
    dtype = _param_dtype(frozen_model)
    head.to(dtype)
    anchors = _initial_estimates(frozen_model, dataset, T, cfg.batch_size)
    opt = _optimizer(head.parameters(), cfg)
    history = []
    try:
        for epoch in range(cfg.epochs):
            start = time.perf_counter()
            head.train()
            lr = lr_at(epoch, cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            total = 0.0
            order = epoch_order(len(dataset), cfg.seed, STAGE_QUALITY, epoch)
            batches = make_batches(order, cfg.batch_size)
            for idx in batches:
                ex = [quality_example(dataset, anchors, int(i), epoch, cfg, T) for i in idx]
                x_t = torch.as_tensor(np.stack([e[0] for e in ex]), dtype=dtype)
                x = torch.as_tensor(np.stack([e[1] for e in ex]), dtype=dtype)
                t_rand = torch.as_tensor([e[2] for e in ex], dtype=torch.float64)
                target = torch.as_tensor([e[3] for e in ex], dtype=dtype)
                with torch.no_grad():
                    feat = frozen_model.encode(x_t, x, t_rand)[0]
                pred = head(feat)
                loss = (pred - target).abs().mean()
                if not torch.isfinite(loss):
                    raise TrainingError(f"quality loss diverged in epoch {epoch}", epoch=epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            mean = total / len(dataset)
            history.append(mean)
            _emit(log, {"stage": "quality", "epoch": epoch, "mean_loss": mean, "lr": lr,
                        "wall_ms": round((time.perf_counter() - start) * 1000, 3)})
    finally:
        for p, f in zip(frozen_model.parameters(), flags):
            p.requires_grad_(f)
    if parameter_checksum(frozen_model) != before:
        raise ConsistencyError("frozen denoiser parameters changed during quality training")
    head.eval()
    return head, history
