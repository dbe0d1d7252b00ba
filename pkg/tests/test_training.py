import io
import json

import numpy as np
import pytest
import torch

from diffract.errors import InvalidConfigError, InvalidInputError, TrainingError
from diffract.model import DenoiserModel, make_head, parameter_checksum
from diffract.schedule import ScheduleConfig, forward_corrupt
from diffract.synth import DatasetConfig, Sample, build_dataset, generate_pure_noise
from diffract.training import (
    STAGE_DENOISER,
    TrainConfig,
    denoiser_batch,
    denoiser_example,
    l1_denoiser_loss,
    lr_at,
    mixup,
    quality_example,
    sample_rng,
    train_denoiser,
    train_quality_head,
)

SCHED = ScheduleConfig(T=16)


@pytest.fixture(scope="module")
def tiny():
    return build_dataset(DatasetConfig(train=12, val=0, test=0, size=32, noise_frac=0.25), 5).samples


def tiny_model(seed=0):
    torch.manual_seed(seed)
    return DenoiserModel(size=32, width=4, depth=2, emb_dim=8)


def test_lr_schedule():
    cfg = TrainConfig(epochs=96)
    assert lr_at(0, cfg) == pytest.approx(1e-3, abs=1e-15)
    assert lr_at(96, cfg) == pytest.approx(1e-7, abs=1e-15)
    # the cosine midpoint is the arithmetic mean of the two rates
    assert abs(lr_at(48, cfg) - 5.0005e-4) < 1e-9
    with pytest.raises(InvalidInputError):
        lr_at(97, cfg)
    vals = [lr_at(e, cfg) for e in range(97)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_train_config_validation():
    with pytest.raises(InvalidConfigError):
        TrainConfig(lr_min=1e-2)
    with pytest.raises(InvalidConfigError):
        TrainConfig(mixup_prob=1.5)
    cfg = TrainConfig()
    assert cfg.betas == (0.9, 0.9)
    assert (cfg.mixup_prob, cfg.mixup_max_weight, cfg.noise_only_rate) == (0.25, 0.25, 0.10)


def test_mixup_examples():
    rng = np.random.default_rng(0)
    a = Sample(x0=rng.uniform(size=(32, 32)), x=rng.uniform(size=(32, 32)), q=0.8)
    b = Sample(x0=rng.uniform(size=(32, 32)), x=rng.uniform(size=(32, 32)), q=0.4)
    same = mixup(a, b, 0.0)
    np.testing.assert_array_equal(same.x, a.x)
    np.testing.assert_array_equal(same.x0, a.x0)
    assert same.q == 0.8
    mixed = mixup(a, b, 0.25)
    assert mixed.q == pytest.approx(0.7)
    np.testing.assert_allclose(mixed.x, 0.75 * a.x + 0.25 * b.x)
    assert not mixed.is_noise
    n1, n2 = generate_pure_noise(32, 1), generate_pure_noise(32, 2)
    both = mixup(n1, n2, 0.2)
    assert both.is_noise and both.q == 0.0
    assert not mixup(a, n1, 0.2).is_noise
    with pytest.raises(InvalidInputError):
        mixup(a, b, 0.3)


def test_toggle_reduces_to_plain_corruption(tiny):
    cfg = TrainConfig(noise_only_rate=0.0, mixup_prob=0.0, seed=3)
    for index in range(len(tiny)):
        x_t, x, t, x0 = denoiser_example(tiny, index, 2, cfg, SCHED)
        rng = sample_rng(3, STAGE_DENOISER, 2, index)
        rng.uniform(), rng.uniform(), rng.integers(len(tiny)), rng.uniform(0, 0.25)
        t_ref = int(rng.integers(0, SCHED.T + 1))
        seed = int(rng.integers(2**63))
        s = tiny[index]
        assert t == t_ref
        np.testing.assert_array_equal(x_t, forward_corrupt(s.x0, s.x, s.q, t_ref, SCHED, seed))
        np.testing.assert_array_equal(x0, s.x0)


def test_noise_only_substitution_targets_zero(tiny):
    cfg = TrainConfig(noise_only_rate=1.0, seed=1)
    for index in range(4):
        _, x, _, x0 = denoiser_example(tiny, index, 0, cfg, SCHED)
        assert np.all(x0 == 0)
        assert x.min() == 0 and x.max() == 1


def test_denoiser_history_deterministic(tiny):
    cfg = TrainConfig(epochs=8, batch_size=4, seed=11)
    _, h1 = train_denoiser(tiny, tiny_model(), cfg, SCHED)
    _, h2 = train_denoiser(tiny, tiny_model(), cfg, SCHED)
    assert len(h1) == 8
    np.testing.assert_allclose(h1, h2, rtol=0, atol=1e-12)
    q = len(h1) // 4
    assert np.mean(h1[-q:]) < np.mean(h1[:q])


def test_metrics_log_lines(tiny):
    buf = io.StringIO()
    train_denoiser(tiny, tiny_model(), TrainConfig(epochs=2, batch_size=6), SCHED, log=buf)
    rows = [json.loads(l) for l in buf.getvalue().splitlines()]
    assert [r["epoch"] for r in rows] == [0, 1]
    assert set(rows[0]) == {"stage", "epoch", "mean_loss", "lr", "wall_ms"}
    assert rows[0]["lr"] == pytest.approx(1e-3)


def test_one_step_decreases_batch_loss(tiny):
    m = tiny_model(2)
    torch.nn.init.normal_(m.out.weight, std=0.05)
    batch = denoiser_batch(tiny, np.arange(8), 0, TrainConfig(), SCHED)
    opt = torch.optim.AdamW(m.parameters(), lr=1e-4, betas=(0.9, 0.9), weight_decay=0.0)
    m.train()
    before = l1_denoiser_loss(m, batch)
    opt.zero_grad()
    before.backward()
    opt.step()
    with torch.no_grad():
        after = l1_denoiser_loss(m, batch)
    assert after.item() < before.item()


def test_nan_loss_raises(tiny):
    m = tiny_model()
    with torch.no_grad():
        m.out.bias.fill_(float("nan"))
    with pytest.raises(TrainingError) as exc:
        train_denoiser(tiny, m, TrainConfig(epochs=2), SCHED)
    assert exc.value.epoch == 0


def test_size_mismatch_rejected(tiny):
    with pytest.raises(InvalidInputError):
        train_denoiser(tiny, DenoiserModel(size=64, width=4, depth=2), TrainConfig(epochs=1), SCHED)


def test_near_identity_task_is_learnable():
    ds = build_dataset(DatasetConfig(train=128, val=0, test=0, size=64, noise_frac=0.0), 3)
    clean = [Sample(x0=s.x0, x=s.x0.copy(), q=0.98) for s in ds]
    torch.manual_seed(0)
    _, hist = train_denoiser(clean, DenoiserModel(), TrainConfig(epochs=10, batch_size=2), ScheduleConfig(T=64))
    assert hist[-1] < 0.02


def test_quality_head_freezes_denoiser(tiny):
    m, _ = train_denoiser(tiny, tiny_model(), TrainConfig(epochs=1, batch_size=4), SCHED)
    before = parameter_checksum(m)
    torch.manual_seed(0)
    head = make_head(m)
    head_before = parameter_checksum(head)
    cfg = TrainConfig(epochs=3, batch_size=4, seed=2)
    head, hist = train_quality_head(tiny, m, head, cfg, SCHED)
    assert parameter_checksum(m) == before
    assert parameter_checksum(head) != head_before
    assert len(hist) == 3
    assert all(p.requires_grad for p in m.parameters())
    torch.manual_seed(0)
    _, again = train_quality_head(tiny, m, make_head(m), cfg, SCHED)
    np.testing.assert_allclose(hist, again, rtol=0, atol=1e-12)


def test_quality_head_preconditions(tiny):
    m = tiny_model()
    with pytest.raises(InvalidConfigError):
        train_quality_head(tiny, m, make_head(m), TrainConfig(epochs=1, batch_size=1), SCHED)
    genuine = [s for s in tiny if not s.is_noise]
    with pytest.raises(InvalidInputError):
        train_quality_head(genuine, m, make_head(m), TrainConfig(epochs=1), SCHED)


def test_quality_targets_tied_to_construction_step(tiny):
    anchors = [np.zeros((32, 32))] * len(tiny)
    cfg = TrainConfig(seed=4)
    for index, s in enumerate(tiny):
        x_t, x, t_rand, (q, r), t = quality_example(tiny, anchors, index, 1, cfg, SCHED.T)
        assert q == pytest.approx(s.q)
        assert r == (0.0 if s.is_noise else 1 - t / SCHED.T)
        assert 0 <= t_rand <= SCHED.T
