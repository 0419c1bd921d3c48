import os
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import yaml
from dotenv import load_dotenv

# Load .env file from project root
load_dotenv(os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), ".env"))

# Base paths
PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DEFAULT_OUT_DIR = os.getenv("SPARSEVID_OUT", os.path.join(PROJECT_ROOT, "runs"))

# Every environment override uses this prefix (SPARSEVID_TAU, SPARSEVID_SEED, ...)
ENV_PREFIX = "SPARSEVID_"


def _env(name: str, default: str) -> str:
    return os.getenv(f"{ENV_PREFIX}{name}", default)


def _env_bool(name: str, default: bool) -> bool:
    return _env(name, "true" if default else "false").lower() == "true"


def _env_list(name: str, default: str) -> list[str]:
    return [p.strip() for p in _env(name, default).split(",") if p.strip()]


# Reward / policy hyperparameters
TAU = float(_env("TAU", "0.3"))
GAMMA = float(_env("GAMMA", "5.0"))
MU = float(_env("MU", "0.9"))
UPDATE_PERIOD = int(_env("UPDATE_PERIOD", "4"))
LEARNING_RATE = float(_env("LEARNING_RATE", "1e-4"))
WEIGHT_DECAY = float(_env("WEIGHT_DECAY", "1e-3"))
# Only lr and weight decay are fixed by the method; smoothing and eps are conventional
RMS_SMOOTHING = float(_env("RMS_SMOOTHING", "0.99"))
RMS_EPS = float(_env("RMS_EPS", "1e-8"))
ONLINE = _env_bool("ONLINE", True)
LITERAL_MOVING_AVERAGE = _env_bool("LITERAL_MOVING_AVERAGE", False)
POLICY_INPUTS = _env_list("POLICY_INPUTS", "frame,state,output,actions")
POLICY_BACKBONE = _env("POLICY_BACKBONE", "resnet8")

# Block runtime
BLOCK_SIZE = int(_env("BLOCK_SIZE", "16"))
HALO = int(_env("HALO", "1"))

# Clip protocol (desk scale)
FRAME_HEIGHT = int(_env("FRAME_HEIGHT", "64"))
FRAME_WIDTH = int(_env("FRAME_WIDTH", "128"))
CLIP_LENGTH = int(_env("FRAMES", "20"))
WARMUP_CLIPS = int(_env("WARMUP_CLIPS", "40"))
OBJECT_COUNT = int(_env("OBJECT_COUNT", "3"))
MAX_SPEED = int(_env("MAX_SPEED", "3"))
SEED = int(_env("SEED", "0"))

# Task backends
TASK = _env("TASK", "oracle-det")
NUM_CLASSES = int(_env("NUM_CLASSES", "4"))
CLASS_AWARE_MATCHING = _env_bool("CLASS_AWARE_MATCHING", False)
SCORE_THRESHOLD = float(_env("SCORE_THRESHOLD", "0.5"))
NMS_IOU = float(_env("NMS_IOU", "0.5"))

# Reporting
REPORT_TIMINGS = _env_bool("REPORT_TIMINGS", False)
JSONL_SCHEMA_VERSION = 1

TASKS = ("toy-det", "oracle-det", "oracle-inst", "oracle-seg")
POLICY_INPUT_KINDS = ("frame", "prev_frame", "state", "output", "actions")
POLICY_BACKBONES = ("resnet8", "resnet20")

# Downsampling stages of each task backend's sparsified trunk (oracles run no trunk)
TASK_DEPTH = {"toy-det": 2, "oracle-det": 0, "oracle-inst": 0, "oracle-seg": 0}


@dataclass(frozen=True)
class RunConfig:
    """Resolved configuration of one run (defaults come from the environment)."""

    tau: float = TAU
    gamma: float = GAMMA
    mu: float = MU
    block_size: int = BLOCK_SIZE
    halo: int = HALO
    update_period: int = UPDATE_PERIOD
    warmup_clips: int = WARMUP_CLIPS
    seed: int = SEED
    task: str = TASK
    clip_length: int = CLIP_LENGTH
    frame_height: int = FRAME_HEIGHT
    frame_width: int = FRAME_WIDTH
    learning_rate: float = LEARNING_RATE
    weight_decay: float = WEIGHT_DECAY
    rms_smoothing: float = RMS_SMOOTHING
    rms_eps: float = RMS_EPS
    online: bool = ONLINE
    literal_moving_average: bool = LITERAL_MOVING_AVERAGE
    policy_inputs: tuple = field(default_factory=lambda: tuple(POLICY_INPUTS))
    policy_backbone: str = POLICY_BACKBONE
    num_classes: int = NUM_CLASSES
    class_aware_matching: bool = CLASS_AWARE_MATCHING
    report_timings: bool = REPORT_TIMINGS
    score_threshold: float = SCORE_THRESHOLD
    nms_iou: float = NMS_IOU
    object_count: int = OBJECT_COUNT
    max_speed: int = MAX_SPEED

    def with_overrides(self, **overrides) -> "RunConfig":
        """Return a copy with non-None overrides applied."""
        clean = {k: v for k, v in overrides.items() if v is not None}
        if "policy_inputs" in clean:
            clean["policy_inputs"] = tuple(clean["policy_inputs"])
        return replace(self, **clean)

    def validate(self) -> "RunConfig":
        """Raise ValueError naming the first invalid key; return self when valid."""
        if self.update_period < 1:
            raise ValueError(f"update_period must be >= 1, got {self.update_period}")
        for name in ("tau", "mu"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if self.block_size < 1:
            raise ValueError(f"block_size must be >= 1, got {self.block_size}")
        if self.frame_height % self.block_size or self.frame_width % self.block_size:
            raise ValueError(
                f"block_size {self.block_size} must divide the frame extents "
                f"{self.frame_height}x{self.frame_width}"
            )
        if self.task not in TASKS:
            raise ValueError(f"Unknown task backend: {self.task!r}. Use one of {', '.join(TASKS)}.")
        if self.block_size % (2 ** TASK_DEPTH[self.task]):
            raise ValueError(
                f"block_size {self.block_size} must be divisible by 2^{TASK_DEPTH[self.task]} "
                f"for task {self.task!r}"
            )
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")
        if self.halo < 0:
            raise ValueError(f"halo must be >= 0, got {self.halo}")
        if self.clip_length < 1:
            raise ValueError(f"clip_length must be >= 1, got {self.clip_length}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        unknown = [k for k in self.policy_inputs if k not in POLICY_INPUT_KINDS]
        if unknown:
            raise ValueError(f"Unknown policy input(s): {', '.join(unknown)}")
        if "frame" not in self.policy_inputs:
            raise ValueError("policy_inputs must include 'frame'")
        if self.policy_backbone not in POLICY_BACKBONES:
            raise ValueError(
                f"Unknown policy backbone: {self.policy_backbone!r}. Use one of {', '.join(POLICY_BACKBONES)}."
            )
        return self

    def as_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["policy_inputs"] = list(self.policy_inputs)
        return out


_CONFIG_KEYS = {f.name for f in fields(RunConfig)}


def load_run_config(path: Optional[str] = None, **overrides) -> RunConfig:
    """
    Build a RunConfig from env defaults, an optional YAML key/value file and overrides.

    Args:
        path:      YAML file with any subset of RunConfig keys (None → env defaults only).
        overrides: Highest-precedence values (CLI flags); None values are ignored.

    Returns:
        A validated RunConfig.
    """
    values: dict = {}
    if path:
        if not os.path.exists(path):
            raise FileNotFoundError(f"Config file not found: {path}")
        with open(path, "r") as f:
            data = yaml.safe_load(f) or {}
        if not isinstance(data, dict):
            raise ValueError(f"Config file {path} must contain a key/value mapping")
        unknown = sorted(set(data) - _CONFIG_KEYS)
        if unknown:
            raise ValueError(f"Unknown config key(s) in {path}: {', '.join(unknown)}")
        values.update(data)
    cfg = RunConfig().with_overrides(**values).with_overrides(**overrides)
    return cfg.validate()
