"""
tests/test_config.py — Unit tests for run configuration resolution.

Covers precedence (defaults < config file < overrides), YAML file checks and
RunConfig.validate() without touching the process environment.
"""

import os
import tempfile
import unittest

from config import RunConfig, load_run_config


def _write(directory: str, name: str, text: str) -> str:
    path = os.path.join(directory, name)
    with open(path, "w") as f:
        f.write(text)
    return path


# ---------------------------------------------------------------------------
# Section 1 — config files and precedence
# ---------------------------------------------------------------------------

class TestLoadRunConfig(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.dir = self._tmp.name

    def tearDown(self):
        self._tmp.cleanup()

    def test_overrides_beat_file_values(self):
        path = _write(self.dir, "run.yaml", "tau: 0.2\ngamma: 3.0\n")
        self.assertEqual(load_run_config(path).tau, 0.2)
        cfg = load_run_config(path, tau=0.7, gamma=None)
        self.assertEqual((cfg.tau, cfg.gamma), (0.7, 3.0))

    def test_empty_file_gives_defaults(self):
        path = _write(self.dir, "empty.yaml", "")
        self.assertEqual(load_run_config(path), load_run_config(None))

    def test_file_must_be_a_mapping(self):
        path = _write(self.dir, "list.yaml", "- tau\n- gamma\n")
        with self.assertRaisesRegex(ValueError, "mapping"):
            load_run_config(path)

    def test_unknown_key_named(self):
        path = _write(self.dir, "bad.yaml", "tau: 0.3\nbeta: 1\n")
        with self.assertRaisesRegex(ValueError, "beta"):
            load_run_config(path)

    def test_missing_file(self):
        with self.assertRaises(FileNotFoundError):
            load_run_config(os.path.join(self.dir, "absent.yaml"))

    def test_policy_inputs_normalised_to_tuple(self):
        cfg = load_run_config(None, policy_inputs=["frame", "state"])
        self.assertEqual(cfg.policy_inputs, ("frame", "state"))
        self.assertEqual(cfg.as_dict()["policy_inputs"], ["frame", "state"])


# ---------------------------------------------------------------------------
# Section 2 — validation
# ---------------------------------------------------------------------------

class TestValidate(unittest.TestCase):
    CASES = [
        ({"update_period": 0}, "update_period"),
        ({"tau": 1.5}, "tau"),
        ({"mu": -0.1}, "mu"),
        ({"block_size": 24}, "must divide"),
        ({"task": "pose"}, "Unknown task"),
        ({"task": "toy-det", "block_size": 2}, r"2\^2"),
        ({"seed": -1}, "seed"),
        ({"halo": -1}, "halo"),
        ({"clip_length": 0}, "clip_length"),
        ({"num_classes": 1}, "num_classes"),
        ({"policy_inputs": ("frame", "depth")}, "Unknown policy input"),
        ({"policy_inputs": ("state",)}, "must include 'frame'"),
        ({"policy_backbone": "resnet50"}, "Unknown policy backbone"),
    ]

    def test_invalid_values_rejected(self):
        for overrides, pattern in self.CASES:
            with self.subTest(overrides=overrides):
                with self.assertRaisesRegex(ValueError, pattern):
                    load_run_config(None, frame_height=64, frame_width=128, **overrides)

    def test_valid_config_returns_itself(self):
        cfg = RunConfig(frame_height=32, frame_width=64, block_size=16)
        self.assertIs(cfg.validate(), cfg)

    def test_frozen(self):
        with self.assertRaises(AttributeError):
            RunConfig().tau = 0.1


if __name__ == "__main__":
    unittest.main()
