"""Adaptive denoising with quality feedback, plus the fixed and one-step baselines.

All loops run a batch of patterns in lockstep: every iteration makes one
batched model call over the patterns that are still active. Each pattern
still follows its own schedule, so results do not depend on batching.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InferenceError, InvalidConfigError, InvalidInputError
from .model import as_denoiser, as_quality
from .pattern import as_pattern
from .schedule import next_step_from_progress, residual_update

MODES = ("feedback", "dynamic", "start", "fixed")


@dataclass(frozen=True)
class InferenceConfig:
    T: int = 384
    R: float = 1.0
    hallucination_threshold: float = 0.1

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise InvalidConfigError("T must be a positive integer")
        if not 0.0 <= self.R <= 1.0:
            raise InvalidConfigError("R must be in [0, 1]")
        if not 0.0 < self.hallucination_threshold < 1.0:
            raise InvalidConfigError("hallucination_threshold must be in (0, 1)")


@dataclass(frozen=True)
class TraceStep:
    n: int
    t_x: int
    q_hat: float = None
    r_hat: float = None
    x_t_hash: str = ""


@dataclass
class DenoiseTrace:
    iterations: list = field(default_factory=list)
    q_hat_init: float = None
    r_hat_init: float = None
    best_iteration: int = None
    flagged_noise: bool = None
    # unnormalized x_t after each iteration's update
    states: list = field(default_factory=list, repr=False)

    def __len__(self):
        return len(self.iterations)

    @property
    def r_hats(self):
        return [s.r_hat for s in self.iterations]

    def max_r_hat(self):
        vals = [r for r in self.r_hats if r is not None]
        return max(vals) if vals else None

    def to_records(self):
        out = [
            {"n": s.n, "t_x": s.t_x, "q_hat": s.q_hat, "r_hat": s.r_hat, "x_t_hash": s.x_t_hash}
            for s in self.iterations
        ]
        out.append(
            {
                "best_iteration": self.best_iteration,
                "flagged_noise": self.flagged_noise,
                "q_hat_init": self.q_hat_init,
            }
        )
        return out

    def to_jsonl(self):
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.to_records())


def read_trace_jsonl(text):
    lines = [json.loads(l) for l in text.splitlines() if l.strip()]
    if not lines:
        raise InvalidInputError("empty trace file")
    final = lines[-1]
    steps = [
        TraceStep(r["n"], r["t_x"], r["q_hat"], r["r_hat"], r.get("x_t_hash", "")) for r in lines[:-1]
    ]
    return DenoiseTrace(
        iterations=steps,
        q_hat_init=final["q_hat_init"],
        best_iteration=final["best_iteration"],
        flagged_noise=final["flagged_noise"],
    )


def classify_noise(trace, threshold=0.1):
    """True when the largest predicted progress stays strictly below ``threshold``."""
    vals = [r for r in trace.r_hats if r is not None]
    if not vals:
        raise InvalidInputError("cannot classify an empty trace")
    return max(vals) < threshold


def _minmax_batch(a):
    lo = a.min(axis=(1, 2), keepdims=True)
    hi = a.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (a - lo) / safe, 0.5)


def _hash(a):
    return hashlib.sha1(np.ascontiguousarray(a, dtype=np.float64).tobytes()).hexdigest()[:16]


def _stack(xs):
    return np.stack([as_pattern(x) for x in xs])


def _start_step(q_hat, T):
    return int(min(max(np.floor(T * (1.0 - q_hat) + 0.5), 0), T))


def _check_unit_outputs(q, r, traces):
    for name, v in (("q_hat", q), ("r_hat", r)):
        if not np.all(np.isfinite(v)):
            raise InferenceError(f"non-finite {name} from quality head", trace=traces)
        if np.any(v < 0) or np.any(v > 1):
            raise InferenceError(f"{name} outside [0, 1] from quality head", trace=traces)


def estimate_start_batch(model, head, xs, T):
    den = as_denoiser(model)
    qf = as_quality(head)
    xs = _stack(xs)
    tt = np.full(len(xs), T)
    feat = den.encode(xs, xs, tt)
    q, r = qf(feat, xs, xs, tt)
    q = np.asarray(q, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    _check_unit_outputs(q, r, None)
    return q, r, [_start_step(qi, T) for qi in q]


def estimate_start(model, head, x, T):
    """Dry run with step ``T``; returns ``(q_hat_init, r_hat_init, t_x)``."""
    q, r, tx = estimate_start_batch(model, head, [x], T)
    return float(q[0]), float(r[0]), tx[0]


def run_loop(model, head, xs, cfg, mode="feedback"):
    """Run one of the iterative schedules on a batch of observations.

    ``mode`` is one of ``feedback`` (start estimate, dynamic steps, best-step
    output), ``dynamic`` (same but final-step output), ``start`` (start
    estimate then unit decrements) or ``fixed`` (start at ``T``, unit
    decrements, no head).
    Returns ``(outputs, traces)``.
    """
    if mode not in MODES:
        raise InvalidConfigError(f"unknown mode {mode!r}")
    T = int(cfg.T)
    den = as_denoiser(model)
    qf = as_quality(head)
    if qf is None and mode != "fixed":
        raise InvalidConfigError(f"mode {mode!r} needs a quality head")
    xs = _stack(xs)
    B = len(xs)
    traces = [DenoiseTrace() for _ in range(B)]
    x_t = xs.copy()
    if mode == "fixed":
        t_x = np.full(B, T, dtype=np.int64)
        r_prev = np.zeros(B)
    else:
        q0, r0, tx0 = estimate_start_batch(den, qf, xs, T)
        t_x = np.asarray(tx0, dtype=np.int64)
        r_prev = r0.copy()
        for tr, q, r in zip(traces, q0, r0):
            tr.q_hat_init = float(q)
            tr.r_hat_init = float(r)
    uses_feedback = mode in ("feedback", "dynamic")
    n = np.zeros(B, dtype=np.int64)
    while True:
        active = (n < T) & (t_x > 0)
        if uses_feedback:
            active &= r_prev < cfg.R
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        x_in = _minmax_batch(x_t[idx])
        xhat0, feat = den(x_in, xs[idx], t_x[idx])
        xhat0 = np.asarray(xhat0, dtype=np.float64)
        if not np.all(np.isfinite(xhat0)):
            raise InferenceError("non-finite denoiser output", trace=traces)
        if qf is not None and mode != "start":
            q, r = qf(feat, x_in, xs[idx], t_x[idx])
            q = np.asarray(q, dtype=np.float64)
            r = np.asarray(r, dtype=np.float64)
            _check_unit_outputs(q, r, traces)
        else:
            q = r = [None] * idx.size
        for j, i in enumerate(idx):
            x_t[i] = residual_update(x_t[i], xhat0[j], xs[i], T)
            tr = traces[i]
            qj = None if q[j] is None else float(q[j])
            rj = None if r[j] is None else float(r[j])
            tr.iterations.append(TraceStep(int(n[i]), int(t_x[i]), qj, rj, _hash(x_t[i])))
            tr.states.append(x_t[i].copy())
            if uses_feedback:
                t_x[i] = next_step_from_progress(rj, T)
                r_prev[i] = rj
            else:
                t_x[i] -= 1
            n[i] += 1
    outputs = []
    for i, tr in enumerate(traces):
        out = x_t[i].copy()
        if uses_feedback and tr.iterations:
            tr.best_iteration = int(np.argmax(tr.r_hats))
            if mode == "feedback":
                out = tr.states[tr.best_iteration].copy()
        elif tr.iterations:
            tr.best_iteration = len(tr.iterations) - 1
        if mode != "fixed":
            if uses_feedback and tr.iterations:
                tr.flagged_noise = classify_noise(tr, cfg.hallucination_threshold)
            else:
                tr.flagged_noise = tr.r_hat_init < cfg.hallucination_threshold
        outputs.append(out)
    return outputs, traces


def denoise_with_feedback(model, head, x, cfg):
    """Full adaptive loop on one observation; returns ``(xhat0, trace)``."""
    outs, traces = run_loop(model, head, [x], cfg, "feedback")
    return outs[0], traces[0]


def denoise_fixed_schedule(model, x, T, return_trace=False):
    """Linear schedule from ``T`` down to 1, no feedback, final-step output."""
    outs, traces = run_loop(model, None, [x], InferenceConfig(T=T), "fixed")
    return (outs[0], traces[0]) if return_trace else outs[0]


def denoise_one_step_batch(model, xs, T, use_tx_assessment=False, head=None):
    if use_tx_assessment and head is None:
        raise InvalidConfigError("t_x assessment needs a quality head")
    den = as_denoiser(model)
    xs = _stack(xs)
    if use_tx_assessment:
        q, r, tx = estimate_start_batch(den, head, xs, T)
        t = np.asarray(tx, dtype=np.int64)
    else:
        t = np.full(len(xs), T, dtype=np.int64)
    xhat0, _ = den(xs, xs, t)
    return [np.asarray(o, dtype=np.float64) for o in xhat0], t


def denoise_one_step(model, x, T, use_tx_assessment=False, head=None):
    """Direct prediction ``f(x, x, t)`` with ``t = T`` or the estimated start step."""
    outs, _ = denoise_one_step_batch(model, [x], T, use_tx_assessment, head)
    return outs[0]
