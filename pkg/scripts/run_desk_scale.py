#!/usr/bin/env python3
"""Desk-scale experiment: synthesize data, train, evaluate.

Runs the full pipeline from configs/desk_scale.cfg and asserts the
validation accuracy bar (0.95). Everything lands under runs/desk.
"""

import json
import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from skelgru.cli import main  # noqa: E402

CONFIG = str(pathlib.Path(__file__).resolve().parents[1] / "configs" / "desk_scale.cfg")


def run() -> int:
    for argv in (
        ["synth", "--config", CONFIG],
        ["train", "--config", CONFIG],
        ["eval", "--config", CONFIG, "--split", "val"],
        ["eval", "--config", CONFIG, "--split", "test"],
    ):
        code = main(argv)
        if code != 0:
            print(f"step {argv[0]} failed with exit code {code}", file=sys.stderr)
            return code

    log = pathlib.Path("runs/desk/train_log.jsonl")
    best = max(json.loads(line)["val_acc"] for line in log.read_text().splitlines())
    print(f"best validation accuracy: {best:.6f} (bar: 0.95)")
    return 0 if best >= 0.95 else 1


if __name__ == "__main__":
    sys.exit(run())
