"""End-to-end run of the command-line pipeline at desk scale.

Generates data, trains both stages, restores a balanced held-out set in
every mode and prints the evaluation and ablation tables. Takes a few
minutes on one CPU core; pass --quick for a tiny smoke run.

    python demos/03_desk_pipeline.py [--quick] [workdir]
"""

import sys
from pathlib import Path

from diffract.cli import main

quick = "--quick" in sys.argv
args = [a for a in sys.argv[1:] if a != "--quick"]
work = Path(args[0] if args else "desk-run")
work.mkdir(parents=True, exist_ok=True)


def diffract(*argv):
    argv = [str(a) for a in argv]
    print("\n$ diffract", " ".join(argv))
    rc = main(argv)
    if rc:
        sys.exit(rc)


if quick:
    train, held, model = ["--train", 24, "--size", 32], ["--test", 8, "--size", 32], ["--width", 4, "--depth", 2]
    e1, e2 = ["--epochs", 2], ["--epochs", 2]
else:
    train, held, model = ["--train", 400, "--desk"], ["--test", 200, "--desk"], []
    e1, e2 = ["--desk", "--batch-size", 4], ["--desk", "--epochs", 30]

diffract("gen-data", *train, "--val", 0, "--test", 0, "--noise-frac", 0.1, "--seed", 7, "-o", work / "train.dfrct")
diffract("gen-data", "--train", 1, "--val", 0, *held, "--noise-frac", 0.5, "--seed", 8, "-o", work / "held.dfrct")
diffract("train", "--stage", "denoiser", "--T", 64, *e1, *model, "--data", work / "train.dfrct", "--seed", 7,
         "-o", work / "stage1.ckpt")
diffract("train", "--stage", "quality", *e2, "--data", work / "train.dfrct", "--from", work / "stage1.ckpt",
         "--seed", 7, "-o", work / "stage2.ckpt")
restored = []
for mode in ("one-step", "one-step-tx", "fixed", "feedback"):
    diffract("denoise", "--mode", mode, "--ckpt", work / "stage2.ckpt", "--data", work / "held.dfrct",
             "--split", "test", "-o", work / mode)
    restored += ["--restored", work / mode]
diffract("eval", "--data", work / "held.dfrct", "--split", "test", *restored, "-o", work / "eval.json")
diffract("ablate", "--ckpt", work / "stage2.ckpt", "--data", work / "held.dfrct", "--split", "test",
         "-o", work / "ablation.json")
