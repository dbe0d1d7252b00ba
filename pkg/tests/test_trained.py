"""Properties of the desk-scale model trained once per session."""

import json

import numpy as np
import torch

from diffract.cli import main
from diffract.inference import estimate_start_batch
from diffract.model import as_denoiser, as_quality


def test_quality_estimates_on_held_out(desk):
    genuine = [s for s in desk.held if not s.is_noise]
    noise = [s for s in desk.held if s.is_noise]
    den, qf = as_denoiser(desk.model), as_quality(desk.head)
    q, r_gen, _ = estimate_start_batch(den, qf, [s.x for s in genuine], desk.T)
    assert np.mean(np.abs(q - np.array([s.q for s in genuine]))) < 0.15
    _, r_noise, _ = estimate_start_batch(den, qf, [s.x for s in noise], desk.T)
    assert np.mean(r_noise) < np.mean(r_gen)


def test_outputs_finite_on_random_inputs(desk):
    rng = np.random.default_rng(0)
    x_t = torch.as_tensor(rng.normal(0, 3, size=(1000, 64, 64)), dtype=torch.float32)
    x = torch.as_tensor(rng.uniform(size=(1000, 64, 64)), dtype=torch.float32)
    t = torch.as_tensor(rng.integers(0, desk.T + 1, 1000), dtype=torch.float64)
    with torch.no_grad():
        for chunk in range(0, 1000, 250):
            sl = slice(chunk, chunk + 250)
            xhat0, feat = desk.model(x_t[sl], x[sl], t[sl])
            qr = desk.head(feat)
            assert torch.isfinite(xhat0).all() and torch.isfinite(qr).all()
            assert ((qr > 0) & (qr < 1)).all()


def test_cli_flags_pure_noise(desk, tmp_path):
    from diffract.synth import generate_pure_noise, write_dataset

    write_dataset([generate_pure_noise(64, 100 + i) for i in range(2)], tmp_path / "noise.dfrct")
    assert main(["denoise", "--mode", "feedback", "--ckpt", str(desk.dir / "stage2.ckpt"),
                 "--data", str(tmp_path / "noise.dfrct"), "-o", str(tmp_path / "out")]) == 0
    for i in range(2):
        last = (tmp_path / "out" / f"sample_{i:05d}.trace.jsonl").read_text().splitlines()[-1]
        assert json.loads(last)["flagged_noise"] is True
