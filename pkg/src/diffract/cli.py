"""Command-line entry point: ``diffract <command> ...``.

Exit codes: 0 success, 2 usage or validation failure, 3 numerical failure.
"""

import argparse
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .errors import (
    ConsistencyError,
    DiffractError,
    FormatError,
    InferenceError,
    InvalidConfigError,
    InvalidInputError,
    TrainingError,
)
from .evaluation import ABLATION_ROWS, ablation_table, detection_counts, mean_metrics
from .formats import write_pgm
from .inference import InferenceConfig, denoise_one_step_batch, run_loop
from .model import DenoiserModel, checkpoint_meta, load_checkpoint, make_head, save_checkpoint
from .schedule import ScheduleConfig
from .synth import Dataset, DatasetConfig, Sample, build_dataset, read_dataset, write_dataset
from .training import TrainConfig, train_denoiser, train_quality_head

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

DESK = {"T": 64, "size": 64, "epochs": 10}
FULL_SCALE = {"T": 384, "s_noise": 0.5, "p_noise": 0.5, "epochs": 96}


class UsageError(Exception):
    pass


def _json_default(o):
    if isinstance(o, Path):
        return str(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o))


def _finite(v):
    """JSON-safe number: infinite PSNR becomes the string "inf"."""
    if isinstance(v, float) and np.isinf(v):
        return "inf"
    return v


def manifest_path(out):
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def write_manifest(args, argv, started, result=None):
    m = {
        "command": args.command,
        "argv": list(argv),
        "config": {k: v for k, v in vars(args).items() if k not in ("func", "command")},
        "seed": getattr(args, "seed", None),
        "inputs": [str(p) for p in _inputs(args)],
        "outputs": [str(args.output)],
        "version": __version__,
        "duration_s": round(time.time() - started, 3),
        "result": result or {},
    }
    path = manifest_path(args.output)
    path.write_text(json.dumps(m, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _inputs(args):
    out = []
    for name in ("data", "ckpt", "from_ckpt"):
        v = getattr(args, name, None)
        if v:
            out.append(v)
    out.extend(getattr(args, "restored", None) or [])
    return out


def load_split(path, split):
    path = Path(path)
    if not path.exists():
        raise UsageError(f"dataset not found: {path}")
    ds = read_dataset(path)
    mp = manifest_path(path)
    if mp.exists():
        splits = json.loads(mp.read_text()).get("result", {}).get("splits")
        if splits:
            ds.splits = {k: tuple(v) for k, v in splits.items()}
    if split in (None, "all"):
        return ds.split("all")
    if not ds.splits:
        # extracted single-split files carry no split table
        print(f"note: {path} has no split record, using all {len(ds)} samples", file=sys.stderr)
        return ds.split("all")
    if split not in ds.splits:
        raise UsageError(f"{path} has no split {split!r}")
    return ds.split(split)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    if args.desk:
        args.size = DESK["size"]
    cfg = DatasetConfig(
        train=args.train, val=args.val, test=args.test, size=args.size, noise_frac=args.noise_frac
    )
    ds = build_dataset(cfg, args.seed, args.output)
    summary = {}
    for name in ("train", "val", "test"):
        part = ds.split(name)
        summary[name] = {"count": len(part), "noise": sum(s.is_noise for s in part)}
        print(f"{name:>5}: {len(part):6d} samples ({summary[name]['noise']} noise)")
    return {"splits": {k: list(v) for k, v in ds.splits.items()}, "summary": summary}


def cmd_extract(args):
    ds = load_split(args.data, args.split)
    write_dataset(ds.samples, args.output)
    print(f"wrote {len(ds)} samples to {args.output}")
    return {"count": len(ds)}


def _resolve_train(args):
    if args.desk:
        args.T = args.T or DESK["T"]
        args.epochs = args.epochs or DESK["epochs"]
    args.T = args.T or FULL_SCALE["T"]
    args.epochs = args.epochs or FULL_SCALE["epochs"]
    return TrainConfig(
        epochs=args.epochs,
        lr_max=args.lr_max,
        lr_min=args.lr_min,
        batch_size=args.batch_size,
        weight_decay=args.weight_decay,
        seed=args.seed,
    )


def cmd_train(args):
    torch.manual_seed(args.seed)
    metrics_path = Path(str(args.output) + ".metrics.jsonl")
    if args.stage == "denoiser":
        cfg = _resolve_train(args)
        sched = ScheduleConfig(T=args.T, s_noise=args.s_noise, p_noise=args.p_noise)
        ds = load_split(args.data, args.split)
        model = DenoiserModel(size=ds.shape[0], width=args.width, depth=args.depth)
        with open(metrics_path, "w") as log:
            model, hist = train_denoiser(ds, model, cfg, sched, log=log)
        meta = {"stage": "denoiser", "schedule": asdict(sched), "train": asdict(cfg)}
        save_checkpoint(model, None, args.output, meta=meta)
        print(f"denoiser trained: final loss {hist[-1]:.5f}")
        return {"loss_history": hist}

    if not args.from_ckpt:
        raise UsageError("--stage quality requires --from <denoiser checkpoint>")
    if not Path(args.from_ckpt).exists():
        raise UsageError(f"checkpoint not found: {args.from_ckpt}")
    header = checkpoint_meta(args.from_ckpt)
    sched = ScheduleConfig(**header["meta"]["schedule"])
    args.T = sched.T
    cfg = _resolve_train(args)
    model, _ = load_checkpoint(args.from_ckpt)
    ds = load_split(args.data, args.split)
    head = make_head(model)
    with open(metrics_path, "w") as log:
        head, hist = train_quality_head(ds, model, head, cfg, sched, log=log)
    meta = dict(header["meta"], stage="quality", quality_train=asdict(cfg))
    save_checkpoint(model, head, args.output, meta=meta)
    print(f"quality head trained: final loss {hist[-1]:.5f}")
    return {"loss_history": hist}


def _load_for_inference(args, need_head):
    if not Path(args.ckpt).exists():
        raise UsageError(f"checkpoint not found: {args.ckpt}")
    header = checkpoint_meta(args.ckpt)
    model, head = load_checkpoint(args.ckpt)
    if need_head and head is None:
        raise UsageError(f"mode {args.mode!r} needs a checkpoint with a trained quality head")
    T = header["meta"].get("schedule", {}).get("T", FULL_SCALE["T"])
    return model, head, T


LOOP_MODES = {"feedback": "feedback", "fixed": "fixed"}


def _restore(model, head, samples, mode, cfg, batch_size):
    outs, traces, flags, q_init = [], [], [], []
    for start in range(0, len(samples), batch_size):
        xs = [s.x for s in samples[start:start + batch_size]]
        if mode in LOOP_MODES:
            o, trs = run_loop(model, head, xs, cfg, LOOP_MODES[mode])
            outs.extend(o)
            traces.extend(trs)
            flags.extend(t.flagged_noise for t in trs)
            q_init.extend(t.q_hat_init for t in trs)
        else:
            o, ts = denoise_one_step_batch(model, xs, cfg.T, mode == "one-step-tx", head)
            outs.extend(o)
            for t in ts:
                traces.append(
                    {"n": 0, "t_x": int(t), "q_hat": None, "r_hat": None}
                )
            flags.extend([None] * len(xs))
            q_init.extend([None] * len(xs))
    return outs, traces, flags, q_init


def cmd_denoise(args):
    model, head, T = _load_for_inference(args, need_head=args.mode in ("feedback", "one-step-tx"))
    cfg = InferenceConfig(T=T, R=args.R, hallucination_threshold=args.threshold)
    ds = load_split(args.data, args.split)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    outs, traces, flags, q_init = _restore(model, head, ds.samples, args.mode, cfg, args.batch_size)
    restored = []
    for i, (o, tr, f, q) in enumerate(zip(outs, traces, flags, q_init)):
        write_pgm(out / f"sample_{i:05d}.pgm", o)
        if isinstance(tr, dict):
            text = json.dumps(tr, sort_keys=True) + "\n" + json.dumps(
                {"best_iteration": 0, "flagged_noise": None, "q_hat_init": None}, sort_keys=True
            ) + "\n"
        else:
            text = tr.to_jsonl()
        (out / f"sample_{i:05d}.trace.jsonl").write_text(text)
        qv = float(np.clip(q, 0, 1)) if q is not None else 0.0
        restored.append(Sample(x0=ds[i].x0, x=np.asarray(o, np.float32), q=0.0 if f else qv, is_noise=bool(f)))
    write_dataset(restored, out / "restored.dfrct")
    n_flag = sum(bool(f) for f in flags)
    print(f"restored {len(outs)} patterns with mode {args.mode}; {n_flag} flagged as noise")
    return {"mode": args.mode, "count": len(outs), "flagged": n_flag}


def _restored_source(path):
    p = Path(path)
    if p.is_dir():
        mp = p / "manifest.json"
        mode = json.loads(mp.read_text())["result"].get("mode", p.name) if mp.exists() else p.name
        rd = read_dataset(p / "restored.dfrct")
        flagged_known = mode in ("feedback",)
        return mode, rd, flagged_known
    if p.exists():
        return p.stem, read_dataset(p), False
    raise UsageError(f"restored outputs not found: {path}")


def cmd_eval(args):
    ds = load_split(args.data, args.split)
    if not any((not s.is_noise) and np.ptp(s.x0) > 0 for s in ds):
        raise UsageError("dataset has no ground-truth patterns to evaluate against")
    rows = [dict(mode="Raw data", **mean_metrics([s.x for s in ds], ds.samples))]
    for src in args.restored or []:
        mode, rd, flagged_known = _restored_source(src)
        if len(rd) != len(ds):
            raise UsageError(f"{src} holds {len(rd)} patterns, dataset has {len(ds)}")
        flags = [s.is_noise for s in rd] if flagged_known else [None] * len(rd)
        exclude = [i for i, f in enumerate(flags) if f]
        row = dict(mode=mode, **mean_metrics([s.x for s in rd], ds.samples, exclude))
        row["detection"] = detection_counts(flags, ds.samples)
        rows.append(row)
    rows = [{k: _finite(v) for k, v in r.items()} for r in rows]
    _print_table(rows, "mode")
    Path(args.output).write_text(json.dumps(rows, indent=2) + "\n")
    return {"rows": rows}


def cmd_ablate(args):
    args.mode = "feedback"
    model, head, T = _load_for_inference(args, need_head=True)
    cfg = InferenceConfig(T=T, R=args.R, hallucination_threshold=args.threshold)
    ds = load_split(args.data, args.split)
    rows = ablation_table(model, head, ds.samples, cfg, args.batch_size)
    rows = [{k: _finite(v) for k, v in r.items()} for r in rows]
    _print_table(rows, "row")
    report = {"ckpt": str(args.ckpt), "data": str(args.data), "split": args.split, "T": T, "rows": rows}
    Path(args.output).write_text(json.dumps(report, indent=2) + "\n")
    return {"rows": rows}


def cmd_replay(args):
    m = json.loads(Path(args.manifest).read_text())
    print("replaying:", " ".join(m["argv"]))
    return main(m["argv"])


def _fmt(v, nd):
    if v is None:
        return "-"
    if isinstance(v, str):
        return v
    return f"{v:.{nd}f}"


def _print_table(rows, key):
    print(f"{'':<26}{'PSNR':>10}{'SSIM':>10}{'n':>6}")
    for r in rows:
        print(f"{r[key]:<26}{_fmt(r['psnr'], 4):>10}{_fmt(r['ssim'], 4):>10}{r['n']:>6}")


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="diffract", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"diffract {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--train", type=int, default=200)
    g.add_argument("--val", type=int, default=20)
    g.add_argument("--test", type=int, default=20)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--noise-frac", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--desk", action="store_true", help="desk-scale preset")
    g.add_argument("-o", "--output", type=Path, required=True)
    g.set_defaults(func=cmd_gen_data)

    e = sub.add_parser("extract", help="copy one split into its own dataset file")
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--split", choices=("train", "val", "test"), required=True)
    e.add_argument("-o", "--output", type=Path, required=True)
    e.set_defaults(func=cmd_extract)

    t = sub.add_parser("train", help="train the denoiser or the quality head")
    t.add_argument("--stage", choices=("denoiser", "quality"), required=True)
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--split", default="train")
    t.add_argument("--from", dest="from_ckpt", type=Path)
    t.add_argument("--epochs", type=int)
    t.add_argument("--T", type=int)
    t.add_argument("--s-noise", type=float, default=FULL_SCALE["s_noise"])
    t.add_argument("--p-noise", type=float, default=FULL_SCALE["p_noise"])
    t.add_argument("--width", type=int, default=16)
    t.add_argument("--depth", type=int, default=3)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--lr-max", type=float, default=1e-3)
    t.add_argument("--lr-min", type=float, default=1e-7)
    t.add_argument("--weight-decay", type=float, default=0.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--desk", action="store_true", help="desk-scale preset (T=64, epochs=10)")
    t.add_argument("-o", "--output", type=Path, required=True)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("denoise", help="restore patterns with a trained checkpoint")
    d.add_argument("--mode", choices=("feedback", "fixed", "one-step", "one-step-tx"), default="feedback")
    d.add_argument("--ckpt", type=Path, required=True)
    d.add_argument("--data", type=Path, required=True)
    d.add_argument("--split", default="all")
    d.add_argument("--R", type=float, default=1.0)
    d.add_argument("--threshold", type=float, default=0.1)
    d.add_argument("--batch-size", type=int, default=64)
    d.add_argument("-o", "--output", type=Path, required=True)
    d.set_defaults(func=cmd_denoise)

    v = sub.add_parser("eval", help="PSNR/SSIM table for raw and restored patterns")
    v.add_argument("--data", type=Path, required=True)
    v.add_argument("--split", default="all")
    v.add_argument("--restored", type=Path, action="append")
    v.add_argument("-o", "--output", type=Path, required=True)
    v.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="schedule ablation on one checkpoint and split")
    a.add_argument("--ckpt", type=Path, required=True)
    a.add_argument("--data", type=Path, required=True)
    a.add_argument("--split", default="all")
    a.add_argument("--R", type=float, default=1.0)
    a.add_argument("--threshold", type=float, default=0.1)
    a.add_argument("--batch-size", type=int, default=64)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("-o", "--output", type=Path, required=True)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    r.add_argument("manifest", type=Path)
    r.set_defaults(func=cmd_replay)
    return p


def _set_threads():
    n = os.environ.get("DIFFRACT_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    _set_threads()
    started = time.time()
    try:
        result = args.func(args)
        if args.command == "replay":
            return result
        write_manifest(args, argv, started, result)
    except (UsageError, InvalidConfigError, InvalidInputError, FormatError, OSError) as exc:
        print(f"diffract {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, InferenceError, ConsistencyError) as exc:
        print(f"diffract {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DiffractError as exc:
        print(f"diffract {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
