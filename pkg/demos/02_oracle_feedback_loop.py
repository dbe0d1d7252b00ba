"""The adaptive loop driven by perfect components.

With a denoiser that always returns the clean pattern and a head that
reports the true quality and one step of progress per call, the loop
starts at t_x, takes exactly t_x steps of size 1/T and ends at
x + (t_x / T)(x0 - x). Pure noise starts at t_x = T and is pulled all the
way to its (empty) master. A head that never reports progress runs the
loop to its cap and flags the input.
"""

import numpy as np

from diffract.inference import InferenceConfig, denoise_with_feedback
from diffract.model import make_oracle_denoiser, make_oracle_quality
from diffract.pattern import metric_report
from diffract.synth import DatasetConfig, build_dataset

T = 64
ds = build_dataset(DatasetConfig(train=6, val=0, test=0, size=64, noise_frac=0.34), seed=5)
den = make_oracle_denoiser(ds)
head = make_oracle_quality(ds, T)

for s in ds:
    out, trace = denoise_with_feedback(den, head, s.x, InferenceConfig(T=T))
    kind = "noise  " if s.is_noise else "pattern"
    psnr = metric_report(out, s.x0).psnr if not s.is_noise else float("nan")
    print(f"{kind} q={s.q:.2f}  iterations={len(trace):3d}  start t_x={trace.iterations[0].t_x:3d}  "
          f"PSNR={psnr:6.2f}")


class NoProgress:
    """A head that claims no denoising ever happens."""

    def __call__(self, feat, x_t, x, t):
        return np.full(len(x), 0.5), np.full(len(x), 0.05)


s = next(s for s in ds if not s.is_noise)
_, trace = denoise_with_feedback(den, NoProgress(), s.x, InferenceConfig(T=T))
print(f"\nstalled head: {len(trace)} iterations (cap {T}), flagged as noise: {trace.flagged_noise}")
print(trace.to_jsonl().splitlines()[-1])
