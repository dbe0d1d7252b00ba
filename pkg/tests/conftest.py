import os
from types import SimpleNamespace

import pytest

from diffract.cli import load_split, main
from diffract.model import load_checkpoint

os.environ.setdefault("DIFFRACT_THREADS", "1")

# Desk-scale recipe used by the trained-model tests. The quality head is
# cheap to train, so it gets more epochs than the preset's 10.
DESK_SEED = 7
DESK_TRAIN = ["--train", "400", "--val", "0", "--test", "0", "--noise-frac", "0.1"]
DESK_HELD_OUT = ["--train", "1", "--val", "0", "--test", "200", "--noise-frac", "0.5"]
DESK_STAGE1 = ["--batch-size", "4"]
DESK_STAGE2 = ["--epochs", "30", "--batch-size", "16"]

CRITERIA = {}


def record(number, ok, detail):
    """Register the outcome of an acceptance criterion for the summary."""
    CRITERIA[number] = (bool(ok), detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")


def _cli(*argv):
    rc = main([str(a) for a in argv])
    assert rc == 0, f"diffract {' '.join(map(str, argv))} exited {rc}"


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Train the two-stage desk model once per session through the CLI."""
    d = tmp_path_factory.mktemp("desk")
    _cli("gen-data", "--desk", *DESK_TRAIN, "--seed", DESK_SEED, "-o", d / "train.dfrct")
    _cli("gen-data", "--desk", *DESK_HELD_OUT, "--seed", DESK_SEED + 1, "-o", d / "held.dfrct")
    _cli("train", "--stage", "denoiser", "--desk", *DESK_STAGE1, "--data", d / "train.dfrct",
         "--seed", DESK_SEED, "-o", d / "stage1.ckpt")
    _cli("train", "--stage", "quality", "--desk", *DESK_STAGE2, "--data", d / "train.dfrct",
         "--from", d / "stage1.ckpt", "--seed", DESK_SEED, "-o", d / "stage2.ckpt")
    model, head = load_checkpoint(d / "stage2.ckpt")
    held = load_split(d / "held.dfrct", "test").samples
    return SimpleNamespace(dir=d, model=model, head=head, held=held, T=64)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
