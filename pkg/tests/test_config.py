#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
配置模块测试
验证 ConfigLoader、TailCalSettings 和实验配置模型的行为。
"""

import os
import sys
import tempfile
import unittest
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

from pydantic import ValidationError

from tailcal.config.loader import ConfigLoader, TailCalSettings, initialize_config, get_config
from tailcal.config.schema import (
    CalibrationConfig,
    EvalConfig,
    ExperimentConfig,
    TrainSchedule,
    WorldConfig,
)

REPO_ROOT = Path(__file__).parent.parent


def _write_yaml(text: str) -> str:
    with tempfile.NamedTemporaryFile(mode="w", suffix=".yaml", delete=False, encoding="utf-8") as f:
        f.write(text)
        return f.name


class TestConfigLoader(unittest.TestCase):
    """测试 ConfigLoader"""

    def test_load_valid_yaml(self):
        path = _write_yaml("\n".join([
            "world:",
            "  num_categories: 20",
            "experiment:",
            "  seed: 3",
        ]))
        try:
            loader = ConfigLoader(config_path=path)
            self.assertEqual(loader.get("world.num_categories"), 20)
            self.assertEqual(loader.get("experiment.seed"), 3)
        finally:
            os.unlink(path)

    def test_missing_file_raises(self):
        with self.assertRaises(FileNotFoundError):
            ConfigLoader(config_path="/nonexistent/config.yaml")

    def test_none_path_gives_empty_config(self):
        loader = ConfigLoader(config_path=None)
        self.assertEqual(loader.get_all(), {})

    def test_non_mapping_document_rejected(self):
        path = _write_yaml("- 1\n- 2\n")
        try:
            with self.assertRaises(ValueError):
                ConfigLoader(config_path=path)
        finally:
            os.unlink(path)

    def test_get_nested_key_with_default(self):
        path = _write_yaml("world:\n  seed: 1\n")
        try:
            loader = ConfigLoader(config_path=path)
            self.assertEqual(loader.get("nonexistent.key", "default"), "default")
            self.assertIsNone(loader.get("nonexistent.key"))
        finally:
            os.unlink(path)

    def test_update_creates_missing_levels(self):
        loader = ConfigLoader(config_path=None)
        loader.update("calibration.strategy", "avg")
        self.assertEqual(loader.get("calibration.strategy"), "avg")

    def test_env_var_resolution(self):
        os.environ["TEST_TAILCAL_SEED"] = "7"
        path = _write_yaml("\n".join([
            "experiment:",
            "  seed: $TEST_TAILCAL_SEED",
            "calibration:",
            "  tail_bins: [$TEST_TAILCAL_SEED]",
        ]))
        try:
            loader = ConfigLoader(config_path=path)
            self.assertEqual(loader.get("experiment.seed"), "7")
            self.assertEqual(loader.get("calibration.tail_bins"), ["7"])
        finally:
            os.unlink(path)
            del os.environ["TEST_TAILCAL_SEED"]


class TestTailCalSettings(unittest.TestCase):
    """测试 TailCalSettings"""

    def test_default_values(self):
        settings = TailCalSettings()
        self.assertEqual(settings.project_name, "tailcal")
        self.assertEqual(settings.version, "0.1.0")
        self.assertEqual(settings.log_level, "INFO")

    def test_paths_become_absolute(self):
        settings = TailCalSettings(output_dir="./output")
        self.assertTrue(os.path.isabs(settings.output_dir))

    def test_log_level_normalized(self):
        self.assertEqual(TailCalSettings(log_level="debug").log_level, "DEBUG")
        with self.assertRaises(ValidationError):
            TailCalSettings(log_level="chatty")


class TestGlobalConfig(unittest.TestCase):
    """测试全局配置函数"""

    def test_get_config_returns_loader(self):
        initialize_config()
        config = get_config()
        self.assertIsInstance(config, ConfigLoader)

    def test_explicit_missing_path_raises(self):
        with self.assertRaises(FileNotFoundError):
            initialize_config(config_path="/nonexistent/config.yaml")


class TestExperimentConfig(unittest.TestCase):
    """测试实验配置模型"""

    def test_repo_default_config_parses(self):
        loader = ConfigLoader(str(REPO_ROOT / "config" / "config.yaml"))
        cfg = ExperimentConfig.from_loader(loader)
        self.assertEqual(cfg.world.num_categories, 100)
        self.assertEqual(cfg.world.feature_dim, 32)
        self.assertAlmostEqual(cfg.world.zipf_exponent, 1.6)
        self.assertEqual(cfg.calibration.bin_edges, (10, 100, 1000))
        self.assertEqual(cfg.schedule.lr_stages[0], (0, 0.01))

    def test_defaults_match_repo_config(self):
        loader = ConfigLoader(str(REPO_ROOT / "config" / "config.yaml"))
        self.assertEqual(ExperimentConfig.from_loader(loader).fingerprint(), ExperimentConfig().fingerprint())

    def test_fingerprint_is_stable_and_sensitive(self):
        a = ExperimentConfig(seed=1)
        b = ExperimentConfig(seed=1)
        c = ExperimentConfig(seed=2)
        self.assertEqual(a.fingerprint(), b.fingerprint())
        self.assertNotEqual(a.fingerprint(), c.fingerprint())
        self.assertEqual(len(a.fingerprint()), 64)

    def test_invalid_strategy_rejected(self):
        with self.assertRaises(ValidationError):
            CalibrationConfig(strategy="sum")

    def test_unknown_field_rejected(self):
        with self.assertRaises(ValidationError):
            ExperimentConfig(learning_rate=0.1)

    def test_missing_world_path_rejected(self):
        with self.assertRaises(ValidationError):
            ExperimentConfig(world_path="/nonexistent/world.json")

    def test_world_config_count_constraint(self):
        with self.assertRaises(ValidationError):
            WorldConfig(num_categories=50, total_instances=10)

    def test_schedule_validation(self):
        with self.assertRaises(ValidationError):
            TrainSchedule(lr_stages=[(1, 0.1)])
        with self.assertRaises(ValidationError):
            TrainSchedule(lr_stages=[(0, 0.1), (5, 0.01), (5, 0.001)])

    def test_lr_at_piecewise_constant(self):
        schedule = TrainSchedule()
        self.assertEqual(schedule.lr_at(0), 0.01)
        self.assertEqual(schedule.lr_at(7), 0.01)
        self.assertEqual(schedule.lr_at(8), 0.001)
        self.assertEqual(schedule.lr_at(11), 0.0001)

    def test_eval_thresholds(self):
        cfg = EvalConfig()
        self.assertEqual(cfg.iou_thresholds[0], 0.5)
        self.assertEqual(cfg.iou_thresholds[-1], 0.95)
        self.assertEqual(len(cfg.iou_thresholds), 10)
        self.assertEqual(len(cfg.recall_thresholds), 101)
        with self.assertRaises(ValidationError):
            EvalConfig(iou_thresholds=[0.7, 0.5])

    def test_from_loader_reads_experiment_section(self):
        loader = ConfigLoader(config_path=None)
        loader.update("experiment.training_mode", "balanced")
        loader.update("experiment.seed", 4)
        loader.update("world.num_categories", 8)
        loader.update("world.total_instances", 200)
        cfg = ExperimentConfig.from_loader(loader)
        self.assertEqual(cfg.training_mode, "balanced")
        self.assertEqual(cfg.seed, 4)
        self.assertEqual(cfg.world.num_categories, 8)


if __name__ == "__main__":
    unittest.main()
