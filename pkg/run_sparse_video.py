#!/usr/bin/env python3
"""
Sparse Video — command-line runner

Thin launcher for `src/sparse_video/cli.py` so the commands work from a checkout
without installing the package.

Usage:
    python run_sparse_video.py gen --clips 4 --out runs/clips
    python run_sparse_video.py run --task oracle-det --tau 0.3 --clips-dir runs/clips --out runs/r1 --viz
    python run_sparse_video.py bench --task oracle-det --clips 4 --jobs 4
    python run_sparse_video.py selftest

Prereqs:
    - pip install -r requirements.txt
    - Optional: copy env.template to `.env` to change SPARSEVID_* defaults

Output:
    - <out>/run.jsonl, <out>/run_summary.json, <out>/predictions.jsonl
    - <out>/viz/clip_*/frame_*_state.ppm, frame_*_ig.pgm (with --viz)
"""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), "src"))
from sparse_video.cli import main  # noqa: E402

if __name__ == "__main__":
    raise SystemExit(main())
