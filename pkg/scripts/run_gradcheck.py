#!/usr/bin/env python3
"""Gradient verification: every primitive and every tiny-model parameter."""

import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from skelgru.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main(["gradcheck"]))
