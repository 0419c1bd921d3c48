"""
tests/conftest.py — Shared pytest fixtures.

Small grids and clips (32x64 frames, 16 px blocks, a handful of frames) keep
the closed-loop tests fast; the full-size defaults are exercised by the slow
acceptance tests only.

Usage in a test:

    def test_something(small_cfg, moving_clip):
        pipe = SparseVideoPipeline(small_cfg)
        run = pipe.run_clip(moving_clip)
"""

import numpy as np
import pytest

from config import load_run_config
from sparse_video.block_runtime import BlockGrid
from sparse_video.synthetic import ObjectTrack, SyntheticClipSpec, generate_clip

SMALL_H, SMALL_W, SMALL_BS = 32, 64, 16


@pytest.fixture
def small_cfg():
    """oracle-det on 32x64 frames, 6-frame clips, one warmup clip."""
    return load_run_config(
        None, frame_height=SMALL_H, frame_width=SMALL_W, block_size=SMALL_BS, clip_length=6,
        warmup_clips=1, seed=0, task="oracle-det", object_count=2, max_speed=2, tau=0.5,
        online=True, report_timings=False, policy_inputs=("frame", "state", "output", "actions"),
    )


@pytest.fixture
def small_grid():
    return BlockGrid(SMALL_H, SMALL_W, SMALL_BS, depth=2)


@pytest.fixture
def moving_clip():
    return generate_clip(SyntheticClipSpec.random(5, SMALL_H, SMALL_W, frames=6, object_count=2, max_speed=2))


@pytest.fixture
def static_clip():
    """Two motionless rectangles on the noise texture; every frame is identical."""
    spec = SyntheticClipSpec(
        SMALL_H, SMALL_W, frames=6, background_seed=11,
        objects=[ObjectTrack(0, 1, 4, 4, 12, 8), ObjectTrack(1, 3, 40, 18, 10, 9)],
    )
    return generate_clip(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
