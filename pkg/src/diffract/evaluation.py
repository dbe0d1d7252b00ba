"""Aggregate metrics: table rows for direct restoration, the schedule ablation,
and noise-detection scores."""

import numpy as np
from scipy.stats import rankdata

from .inference import InferenceConfig, denoise_one_step_batch, run_loop
from .pattern import PSNR_INF, metric_report

ABLATION_ROWS = (
    ("Baseline", "fixed"),
    ("+ start step", "start"),
    ("+ dynamic step", "dynamic"),
    ("+ best step selection", "feedback"),
)


def mean_metrics(outputs, samples, exclude=None):
    """Mean PSNR/SSIM over genuine patterns, skipping indices in ``exclude``.

    PSNR is averaged in dB; any identical pair makes the mean infinite.
    """
    exclude = set(exclude or ())
    ps, ss = [], []
    for i, (o, s) in enumerate(zip(outputs, samples)):
        if s.is_noise or i in exclude:
            continue
        rep = metric_report(o, s.x0)
        ps.append(rep.psnr)
        ss.append(rep.ssim)
    if not ps:
        return {"psnr": None, "ssim": None, "n": 0}
    psnr = PSNR_INF if any(np.isinf(ps)) else float(np.mean(ps))
    return {"psnr": psnr, "ssim": float(np.mean(ss)), "n": len(ps)}


def detection_counts(flags, samples):
    c = {"tp": 0, "fp": 0, "tn": 0, "fn": 0}
    for f, s in zip(flags, samples):
        if f is None:
            continue
        key = ("t" if bool(f) == s.is_noise else "f") + ("p" if f else "n")
        c[key] += 1
    return c


def roc_auc(scores, positives):
    """Area under the ROC curve via the rank-sum statistic (ties averaged)."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    n_pos, n_neg = pos.sum(), (~pos).sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need both classes for ROC-AUC")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def noise_scores(traces):
    """Higher means more likely noise: the negated peak progress of each trace."""
    out = []
    for tr in traces:
        m = tr.max_r_hat()
        out.append(-(tr.r_hat_init if m is None else m))
    return out


def one_step_table(model, head, samples, T):
    xs = [s.x for s in samples]
    rows = [dict(mode="Raw data", **mean_metrics(xs, samples))]
    direct, _ = denoise_one_step_batch(model, xs, T, False)
    rows.append(dict(mode="one-step", **mean_metrics(direct, samples)))
    if head is not None:
        assessed, _ = denoise_one_step_batch(model, xs, T, True, head)
        rows.append(dict(mode="one-step-tx", **mean_metrics(assessed, samples)))
    return rows


def _batched(model, head, samples, cfg, mode, batch_size):
    outs, traces = [], []
    for start in range(0, len(samples), batch_size):
        o, tr = run_loop(model, head, [s.x for s in samples[start:start + batch_size]], cfg, mode)
        outs.extend(o)
        traces.extend(tr)
    return outs, traces


def best_step_outputs(outputs, traces):
    """Best-progress states of runs made in ``dynamic`` mode.

    The feedback loop and the dynamic loop take the same steps and differ
    only in which state they return, so one run yields both.
    """
    return [tr.states[tr.best_iteration] if tr.iterations else o for o, tr in zip(outputs, traces)]


def ablation_table(model, head, samples, cfg, batch_size=64):
    """Run the four schedule variants on the genuine patterns of ``samples``."""
    genuine = [s for s in samples if not s.is_noise]
    outs = {}
    for mode in ("fixed", "start"):
        outs[mode] = _batched(model, head, genuine, cfg, mode, batch_size)[0]
    final, traces = _batched(model, head, genuine, cfg, "dynamic", batch_size)
    outs["dynamic"] = final
    outs["feedback"] = best_step_outputs(final, traces)
    return [dict(row=label, mode=mode, **mean_metrics(outs[mode], genuine)) for label, mode in ABLATION_ROWS]
