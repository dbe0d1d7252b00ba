"""Walk one synthetic pattern through the quality-conditioned corruption.

A pattern observed at quality q sits at step t_x = T(1 - q) of the
schedule. Steps below t_x interpolate toward the clean master, steps above
it extrapolate past the observation, and the noise gate adds extra
Gaussian noise that grows with t.
"""

import numpy as np

from diffract.pattern import metric_report, minmax01_normalize
from diffract.schedule import (
    ScheduleConfig,
    forward_corrupt,
    next_step_from_progress,
    r_target,
    step_of_quality,
)
from diffract.synth import DatasetConfig, make_sample

T = 64
cfg = ScheduleConfig(T=T)
sample = make_sample(DatasetConfig(size=64), np.random.SeedSequence(3))
t_x = step_of_quality(sample.q, T)
print(f"observed quality q = {sample.q:.3f} -> t_x = {t_x} of T = {T}")
print(f"raw observation: {metric_report(sample.x, sample.x0)}")

print("\n   t   r(t)  PSNR(x_t)  gate")
for t in sorted({0, t_x // 2, t_x, (t_x + T) // 2, T}):
    for gate in (0, 1):
        x_t = forward_corrupt(sample.x0, sample.x, sample.q, t, cfg, rng_seed=11, m=gate)
        rep = metric_report(minmax01_normalize(x_t), sample.x0)
        print(f"{t:4d}  {r_target(t, T, False):.3f}  {rep.psnr:9.2f}  {gate}")

# the progress target and the step it implies are exact inverses
assert all(next_step_from_progress(r_target(t, T, False), T) == t for t in range(T + 1))
print("\nprogress <-> step round trip holds for every t in [0, T]")
