"""Closed-form schedule math: quality to step, forward corruption, progress targets,
partial denoising and the residual update used by the sampling loops."""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfigError, InvalidInputError
from .pattern import as_pattern, minmax01_normalize, zscore_normalize

FULL_SCALE_T = 384


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = FULL_SCALE_T
    s_noise: float = 0.5
    p_noise: float = 0.5

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 2:
            raise InvalidConfigError("T must be an integer >= 2")
        if self.s_noise < 0:
            raise InvalidConfigError("s_noise must be >= 0")
        if not 0 <= self.p_noise <= 1:
            raise InvalidConfigError("p_noise must be in [0, 1]")


@dataclass(frozen=True)
class CorruptionState:
    t: int
    t_x: int
    alpha: float
    beta: float
    m: int


def _check_unit(name, v):
    if not (0.0 <= v <= 1.0):
        raise InvalidInputError(f"{name}={v} outside [0, 1]")


def _round_half_up(v):
    return int(np.floor(v + 0.5))


def step_of_quality(q, T):
    """Observation step ``round(T (1 - q))``, clamped to [1, T] so it can divide."""
    _check_unit("q", q)
    return int(min(max(_round_half_up(T * (1.0 - q)), 1), T))


def next_step_from_progress(r_hat, T):
    """Next step ``round(T (1 - r_hat))`` in [0, T]; 0 ends the loop."""
    _check_unit("r_hat", r_hat)
    return int(min(max(_round_half_up(T * (1.0 - r_hat)), 0), T))


def r_target(t, T, is_noise):
    if not 0 <= t <= T:
        raise InvalidInputError(f"t={t} outside [0, {T}]")
    return 0.0 if is_noise else 1.0 - t / T


def corruption_draws(rng_seed, p_noise, shape):
    """Independent streams for the Bernoulli gate ``m`` and the noise field."""
    ss_m, ss_w = np.random.SeedSequence(rng_seed).spawn(2)
    m = int(np.random.default_rng(ss_m).uniform() < p_noise)
    omega = np.random.default_rng(ss_w).standard_normal(shape)
    return m, omega


def corruption_state(q, t, cfg, m):
    t_x = step_of_quality(q, cfg.T)
    return CorruptionState(
        t=int(t), t_x=t_x, alpha=t / t_x, beta=m * cfg.s_noise * t / cfg.T, m=int(m)
    )


def forward_corrupt(x0, x, q, t, cfg, rng_seed, m=None):
    """Training input at step ``t``: interpolate/extrapolate from ``x0`` through ``x``,
    optionally add scaled Gaussian noise, then z-score.

    ``m`` overrides the Bernoulli noise gate (0 or 1) when given.
    """
    x0 = as_pattern(x0, "x0")
    x = as_pattern(x, "x")
    if x0.shape != x.shape:
        raise InvalidInputError("x0 and x must share a shape")
    if int(t) != t or not 0 <= t <= cfg.T:
        raise InvalidInputError(f"t={t} outside [0, {cfg.T}]")
    m_draw, omega = corruption_draws(rng_seed, cfg.p_noise, x.shape)
    st = corruption_state(q, t, cfg, m_draw if m is None else m)
    x_t = (1.0 - st.alpha) * x0 + st.alpha * x
    if st.beta > 0:
        x_t = x_t + st.beta * omega
    return zscore_normalize(x_t)


def partial_denoise_mix(xhat0, x, t, t_x):
    """Blend the denoiser estimate toward the observation, then rescale to [0, 1]."""
    xhat0 = as_pattern(xhat0, "xhat0")
    x = as_pattern(x, "x")
    if xhat0.shape != x.shape:
        raise InvalidInputError("xhat0 and x must share a shape")
    if t_x < 1:
        raise InvalidInputError("t_x must be >= 1")
    if not 0 <= t <= t_x:
        raise InvalidInputError(f"t={t} outside [0, t_x={t_x}]")
    a = t / t_x
    return minmax01_normalize((1.0 - a) * xhat0 + a * x)


def residual_update(x_t, xhat0, x, T):
    """One denoising step ``x_t + (xhat0 - x) / T`` (unnormalized)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    xhat0 = np.asarray(xhat0, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if not (x_t.shape == xhat0.shape == x.shape):
        raise InvalidInputError("x_t, xhat0 and x must share a shape")
    return x_t + (xhat0 - x) / T
