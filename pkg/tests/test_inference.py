import json

import numpy as np
import pytest

from diffract.errors import InferenceError, InvalidConfigError, InvalidInputError
from diffract.inference import (
    DenoiseTrace,
    InferenceConfig,
    TraceStep,
    classify_noise,
    denoise_fixed_schedule,
    denoise_one_step,
    denoise_with_feedback,
    estimate_start,
    read_trace_jsonl,
    run_loop,
)
from diffract.model import make_oracle_denoiser, make_oracle_quality
from diffract.synth import Sample, generate_master, generate_pure_noise

SIZE = 32


def observed(seed, q):
    x0 = generate_master(5, SIZE, seed).astype(np.float32)
    rng = np.random.default_rng(seed)
    x = np.clip(x0 + rng.normal(0, 0.3, x0.shape), 0, 1)
    x = ((x - x.min()) / (x.max() - x.min())).astype(np.float32)
    return Sample(x0=x0, x=x, q=q)


@pytest.fixture
def samples():
    noise = generate_pure_noise(SIZE, 3)
    return [observed(1, 0.0), observed(2, 0.5), observed(3, 0.25), noise]


def brute_force_feedback(x0, x, q, T, R=1.0):
    """Reference loop written from the interpolation form, with the oracle pair inlined."""
    t_x = int(np.floor(T * (1 - q) + 0.5))
    x_t = np.asarray(x, np.float64).copy()
    x0 = np.asarray(x0, np.float64)
    x = np.asarray(x, np.float64)
    r = 1 - (T - 1) / T
    n = 0
    states, rs = [], []
    while n < T and t_x > 0 and r < R:
        xhat0 = x0
        r = min(max(1 - (t_x - 1) / T, 0.0), 1.0)
        a_t = t_x / T
        a_prev = (t_x - 1) / T
        xt_tilde = (1 - a_t) * xhat0 + a_t * x
        xprev_tilde = (1 - a_prev) * xhat0 + a_prev * x
        x_t = x_t - xt_tilde + xprev_tilde
        states.append(x_t.copy())
        rs.append(r)
        t_x = int(np.floor(T * (1 - r) + 0.5))
        n += 1
    best = int(np.argmax(rs))
    return states[best], states, n


def test_oracle_feedback_full_corruption(samples):
    T = 64
    den = make_oracle_denoiser(samples)
    qual = make_oracle_quality(samples, T)
    s = samples[0]
    out, trace = denoise_with_feedback(den, qual, s.x, InferenceConfig(T=T))
    assert len(trace) == T
    np.testing.assert_allclose(out, s.x0, atol=1e-6)
    ref, states, n = brute_force_feedback(s.x0, s.x, s.q, T)
    assert n == T
    np.testing.assert_allclose(out, ref, atol=1e-9)
    for k, st in enumerate(trace.states, start=1):
        np.testing.assert_allclose(st, s.x + k / T * (s.x0.astype(np.float64) - s.x), atol=1e-6)
        np.testing.assert_allclose(st, states[k - 1], atol=1e-9)


def test_oracle_feedback_midpoint(samples):
    T = 64
    s = samples[1]
    out, trace = denoise_with_feedback(
        make_oracle_denoiser(samples), make_oracle_quality(samples, T), s.x, InferenceConfig(T=T, R=1.0)
    )
    assert len(trace) == 32
    np.testing.assert_allclose(out, 0.5 * s.x + 0.5 * s.x0.astype(np.float64), atol=1e-6)
    ref, _, n = brute_force_feedback(s.x0, s.x, s.q, T)
    assert n == 32
    np.testing.assert_allclose(out, ref, atol=1e-9)
    assert trace.best_iteration == 31
    assert trace.flagged_noise is False


def test_estimate_start_with_oracles(samples):
    den = make_oracle_denoiser(samples)
    q, r, t_x = estimate_start(den, make_oracle_quality(samples, 384), samples[1].x, 384)
    assert (q, t_x) == (0.5, 192)
    assert r == pytest.approx(1 / 384)
    assert estimate_start(den, make_oracle_quality(samples, 384), samples[3].x, 384)[2] == 384
    assert estimate_start(den, make_oracle_quality(samples, 384), samples[1].x, 384) == (q, r, t_x)


class ConstantHead:
    def __init__(self, q, r):
        self.q, self.r = q, r

    def __call__(self, feat, x_t, x, t):
        n = len(x)
        return np.full(n, self.q), np.full(n, self.r)


def test_pinned_low_progress_runs_to_cap_and_flags(samples):
    T = 64
    out, trace = denoise_with_feedback(
        make_oracle_denoiser(samples), ConstantHead(0.3, 0.05), samples[2].x, InferenceConfig(T=T)
    )
    assert len(trace) == T
    assert trace.flagged_noise is True
    assert trace.best_iteration == 0


def test_early_exit_at_desired_level(samples):
    T = 64
    s = samples[0]
    _, trace = denoise_with_feedback(
        make_oracle_denoiser(samples), make_oracle_quality(samples, T), s.x, InferenceConfig(T=T, R=0.5)
    )
    # r_hat = 1 - (t - 1)/T reaches 0.5 at t = 33, i.e. the 32nd iteration
    assert len(trace) == 32
    assert trace.r_hats[-1] >= 0.5 > trace.r_hats[-2]


def test_fixed_schedule(samples):
    T = 16
    s = samples[2]
    out, trace = denoise_fixed_schedule(make_oracle_denoiser(samples), s.x, T, return_trace=True)
    assert len(trace) == T
    assert [st.t_x for st in trace.iterations] == list(range(T, 0, -1))
    np.testing.assert_allclose(out, s.x0, atol=1e-6)
    out1 = denoise_fixed_schedule(make_oracle_denoiser(samples), s.x, 1)
    np.testing.assert_allclose(out1, s.x0, atol=1e-6)


class RecordingDenoiser:
    def __init__(self, inner):
        self.inner = inner
        self.calls = []

    def __call__(self, x_t, x, t):
        self.calls.append(np.asarray(t).tolist())
        return self.inner(x_t, x, t)

    def encode(self, x_t, x, t):
        return self.inner.encode(x_t, x, t)


def test_one_step(samples):
    s = samples[1]
    rec = RecordingDenoiser(make_oracle_denoiser(samples))
    out = denoise_one_step(rec, s.x, 64, use_tx_assessment=False)
    assert rec.calls == [[64]]
    np.testing.assert_array_equal(out, s.x0)
    out = denoise_one_step(rec, s.x, 64, use_tx_assessment=True, head=make_oracle_quality(samples, 64))
    assert rec.calls[-1] == [32]
    assert out.shape == s.x.shape
    np.testing.assert_array_equal(out, s.x0)
    with pytest.raises(InvalidConfigError):
        denoise_one_step(rec, s.x, 64, use_tx_assessment=True)


def test_classify_noise():
    def tr(rs):
        return DenoiseTrace(iterations=[TraceStep(i, 1, 0.1, r) for i, r in enumerate(rs)])

    assert classify_noise(tr([0.02, 0.04, 0.03]), 0.1)
    assert not classify_noise(tr([0.02, 0.9]), 0.1)
    assert not classify_noise(tr([0.02, 0.1]), 0.1)
    with pytest.raises(InvalidInputError):
        classify_noise(DenoiseTrace(), 0.1)


def test_trace_jsonl_round_trip(samples):
    T = 8
    _, trace = denoise_with_feedback(
        make_oracle_denoiser(samples), make_oracle_quality(samples, T), samples[1].x, InferenceConfig(T=T)
    )
    text = trace.to_jsonl()
    lines = [json.loads(l) for l in text.splitlines()]
    assert set(lines[0]) >= {"n", "t_x", "q_hat", "r_hat"}
    assert set(lines[-1]) == {"best_iteration", "flagged_noise", "q_hat_init"}
    back = read_trace_jsonl(text)
    assert back.r_hats == trace.r_hats
    assert back.best_iteration == trace.best_iteration


def test_start_mode_and_monotone_start(samples):
    T = 64
    den = make_oracle_denoiser(samples)
    starts = [estimate_start(den, ConstantHead(q, 0.5), samples[0].x, T)[2] for q in np.linspace(0, 1, 41)]
    assert all(a >= b for a, b in zip(starts, starts[1:]))
    outs, traces = run_loop(den, make_oracle_quality(samples, T), [samples[1].x], InferenceConfig(T=T), "start")
    assert [st.t_x for st in traces[0].iterations] == list(range(32, 0, -1))


class NaNDenoiser:
    def __call__(self, x_t, x, t):
        return np.full(np.shape(x), np.nan), np.zeros((len(x), 1, 1, 1))

    def encode(self, x_t, x, t):
        return np.zeros((len(x), 1, 1, 1))


def test_nan_raises_with_trace(samples):
    with pytest.raises(InferenceError) as exc:
        denoise_with_feedback(NaNDenoiser(), ConstantHead(0.5, 0.5), samples[0].x, InferenceConfig(T=8))
    assert exc.value.trace is not None


def test_batched_equals_single(samples):
    T = 16
    den = make_oracle_denoiser(samples)
    qual = make_oracle_quality(samples, T)
    cfg = InferenceConfig(T=T)
    outs, traces = run_loop(den, qual, [s.x for s in samples], cfg, "feedback")
    for s, o, tr in zip(samples, outs, traces):
        o1, t1 = denoise_with_feedback(den, qual, s.x, cfg)
        np.testing.assert_array_equal(o, o1)
        assert tr.to_jsonl() == t1.to_jsonl()


def test_inference_config_validation():
    with pytest.raises(InvalidConfigError):
        InferenceConfig(R=1.5)
    with pytest.raises(InvalidConfigError):
        InferenceConfig(hallucination_threshold=0.0)
