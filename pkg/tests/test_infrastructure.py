import unittest
import sys
import os
import json
import logging
import tempfile
from pathlib import Path
from unittest import mock

import numpy as np

# Add project root to sys.path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from config_manager import ConfigManager
from core.exceptions import CflError, InfeasibleError, NumericalError, PeacockLabError, ValidationError
from core.io_schema import (ClampRecord, FpSolveConfig, GalleryProcessSpec, HittingRule, LocalVolSurface,
                            MartingaleKernel, PathEnsemble, PeacockFamily)
from logger_setup import LoggerSetup
from measures import from_atoms, gaussian_measure
from call_surface import bachelier_surface
from path_manager import PathManager
from storage_manager import SCHEMA_VERSION, StorageManager, sanitize


class TempHomeTestCase(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)
        self._env = mock.patch.dict(os.environ, {PathManager.HOME_ENV: str(self.tmp)})
        self._env.start()

    def tearDown(self):
        self._env.stop()
        self._tmp.cleanup()


class TestConfigManager(TempHomeTestCase):
    def test_defaults_without_file(self):
        config = ConfigManager.load()
        self.assertEqual(config, ConfigManager.DEFAULT_CONFIG)
        self.assertIsNot(config, ConfigManager.DEFAULT_CONFIG)

    def test_save_then_load_merges_over_defaults(self):
        self.assertTrue(ConfigManager.save({"seed": 42, "custom": "kept"}))
        self.assertTrue(PathManager.get_config_path().exists())
        config = ConfigManager.load()
        self.assertEqual(config["seed"], 42)
        self.assertEqual(config["custom"], "kept")
        self.assertEqual(config["alpha"], 0.05)

    def test_explicit_path_must_exist_and_parse(self):
        with self.assertRaises(ValidationError):
            ConfigManager.load(self.tmp / "missing.json")
        broken = self.tmp / "broken.json"
        broken.write_text("{seed: ")
        with self.assertRaises(ValidationError):
            ConfigManager.load(broken)

    def test_hash_ignores_key_order(self):
        a = ConfigManager.config_hash({"seed": 1, "alpha": 0.05})
        b = ConfigManager.config_hash({"alpha": 0.05, "seed": 1})
        self.assertEqual(a, b)
        self.assertNotEqual(a, ConfigManager.config_hash({"seed": 2, "alpha": 0.05}))

    def test_data_root_follows_env(self):
        self.assertEqual(PathManager.get_data_dir(), self.tmp)
        self.assertEqual(PathManager.get_runs_dir(), self.tmp / "runs")


class TestStorageManager(TempHomeTestCase):
    def setUp(self):
        super().setUp()
        self.storage = StorageManager(self.tmp / "store")

    def test_default_root(self):
        self.assertEqual(StorageManager().root, self.tmp / "runs")

    def test_measure_round_trip_is_exact(self):
        m = gaussian_measure(0.1, 0.7, n=51)
        back = StorageManager.load_measure(self.storage.save_measure(m, "m.csv"))
        np.testing.assert_array_equal(back.grid, m.grid)
        np.testing.assert_array_equal(back.weights, m.weights)
        self.assertEqual(back.label, "m")

    def test_measure_mass_checked(self):
        path = self.tmp / "bad.csv"
        path.write_text("x,w\n0,0.5\n1,0.4\n")
        with self.assertRaises(ValidationError):
            StorageManager.load_measure(path)
        path.write_text("x,w\n1,0.5000000001\n0,0.5\n")
        m = StorageManager.load_measure(path)
        self.assertEqual(m.grid.tolist(), [0.0, 1.0])
        self.assertAlmostEqual(m.weights.sum(), 1.0, places=14)

    def test_family_round_trip(self):
        fam = PeacockFamily(np.array([1.0, 2.0]), (from_atoms([0.0]), from_atoms([-1.0, 1.0])), "toy")
        manifest = self.storage.save_family(fam, "fam.json")
        self.assertTrue((manifest.parent / "fam_001.csv").exists())
        back = StorageManager.load_family(manifest)
        self.assertEqual(back.label, "toy")
        np.testing.assert_array_equal(back.measures[1].grid, [-1.0, 1.0])

    def test_surface_round_trip(self):
        s = bachelier_surface(0.0, 1.0, [0.5, 1.0], np.linspace(-2.0, 2.0, 5))
        back = StorageManager.load_surface(self.storage.save_surface(s, "s.csv"))
        np.testing.assert_array_equal(back.prices, s.prices)
        np.testing.assert_array_equal(back.strikes, s.strikes)
        self.assertEqual(back.forward, 0.0)
        self.assertEqual(back.meta["source"], "bachelier")

    def test_local_vol_round_trip(self):
        lv = LocalVolSurface(np.array([0.5, 1.0]), np.array([-1.0, 0.0, 1.0]),
                             np.array([[1.0, 1.0, 2.0], [1.0, 1.5, 1.0]]), "additive",
                             (ClampRecord(0, 1, "sigma_max"),), 0.0, 2.0)
        back = StorageManager.load_local_vol(self.storage.save_local_vol(lv, "lv.csv"))
        np.testing.assert_array_equal(back.sigma, lv.sigma)
        self.assertEqual(back.clamp_report, lv.clamp_report)
        self.assertEqual(back.sigma_max, 2.0)

    def test_ensemble_round_trip(self):
        paths = np.arange(12.0).reshape(4, 3) / 7
        ens = PathEnsemble(np.array([0.0, 0.5, 1.0]), paths, 5, "philox4x64-block4096", {"kind": "test"})
        header = self.storage.save_ensemble(ens, "ens")
        self.assertEqual(json.loads(header.read_text())["order"], "column-major")
        back = StorageManager.load_ensemble(header)
        np.testing.assert_array_equal(back.paths, paths)
        self.assertEqual((back.seed, back.meta), (5, {"kind": "test"}))

    def test_kernel_round_trip(self):
        k = MartingaleKernel(np.array([0.0, 0.2]), np.array([-1.0, 0.2, 1.0]),
                             np.array([[0.5, 0.0, 0.5], [0.0, 1.0, 0.0]]), np.array([0.3, 0.7]),
                             np.array([30, 70]), (0,))
        back = StorageManager.load_kernel(self.storage.save_kernel(k, "k"))
        np.testing.assert_array_equal(back.rows, k.rows)
        self.assertEqual(back.sparse_rows, (0,))
        np.testing.assert_array_equal(back.counts, [30, 70])

    def test_reports_carry_schema_version(self):
        path = self.storage.write_json("r.json", {"value": np.float64(1.5)})
        self.assertEqual(StorageManager.read_json(path), {"schema_version": SCHEMA_VERSION, "value": 1.5})
        with self.assertRaises(ValidationError):
            StorageManager.read_json(self.tmp / "absent.json")

    def test_sanitize(self):
        data = sanitize({"a": np.arange(3), "b": float("nan"), 1: (np.int64(2), ClampRecord(0, 1, "x"))})
        self.assertEqual(data, {"a": [0, 1, 2], "b": None, "1": [2, {"i": 0, "j": 1, "reason": "x"}]})


class TestLoggerSetup(TempHomeTestCase):
    def setUp(self):
        super().setUp()
        LoggerSetup.reset()
        self._level = logging.getLogger().level

    def tearDown(self):
        LoggerSetup.reset()
        logging.getLogger().setLevel(self._level)
        super().tearDown()

    def test_same_directory_is_idempotent(self):
        LoggerSetup.setup_logging(log_dir=self.tmp / "logs")
        first = list(LoggerSetup._handlers)
        LoggerSetup.setup_logging(log_dir=self.tmp / "logs", level=logging.DEBUG)
        self.assertEqual(LoggerSetup._handlers, first)
        self.assertEqual(logging.getLogger().level, logging.DEBUG)

    def test_new_directory_moves_the_file_handler(self):
        """A second run in the same process logs to its own directory"""
        LoggerSetup.setup_logging(log_dir=self.tmp / "run1")
        old_file = LoggerSetup._handlers[0]
        LoggerSetup.setup_logging(log_dir=self.tmp / "run2")
        LoggerSetup.get_logger("peacock").info("second run")
        for handler in LoggerSetup._handlers:
            handler.flush()
        self.assertEqual(len(LoggerSetup._handlers), 2)
        self.assertNotIn(old_file, logging.getLogger().handlers)
        self.assertIn("second run", (self.tmp / "run2" / "PeacockLab.log").read_text(encoding="utf-8"))
        self.assertNotIn("second run", (self.tmp / "run1" / "PeacockLab.log").read_text(encoding="utf-8"))


class TestCoreTypes(unittest.TestCase):
    def test_kernel_rows_must_sum_to_one(self):
        with self.assertRaises(ValidationError):
            MartingaleKernel(np.array([0.0]), np.array([-1.0, 1.0]), np.array([[0.5, 0.4]]))

    def test_local_vol_bounds(self):
        with self.assertRaises(ValidationError):
            LocalVolSurface(np.array([1.0]), np.array([0.0, 1.0]), np.array([[1.0, 3.0]]), sigma_max=2.0)

    def test_family_lookup(self):
        fam = PeacockFamily(np.array([0.5, 1.0]), (from_atoms([0.0]), from_atoms([-1.0, 1.0])))
        self.assertEqual(fam.index_of(1.0 + 1e-12), 1)
        with self.assertRaises(ValidationError):
            fam.at(0.75)

    def test_arrays_are_read_only(self):
        fam = PeacockFamily(np.array([0.5]), (from_atoms([0.0]),))
        with self.assertRaises(ValueError):
            fam.times[0] = 2.0

    def test_process_specs(self):
        with self.assertRaises(ValidationError):
            GalleryProcessSpec("levy")
        with self.assertRaises(ValidationError):
            GalleryProcessSpec("easy", steps=410)
        self.assertEqual(GalleryProcessSpec("cantor", steps=360).hitting_rule.kind, "cantor")
        with self.assertRaises(ValidationError):
            HittingRule(kind="cantor", depth=30)

    def test_solver_config(self):
        with self.assertRaises(ValidationError):
            FpSolveConfig(scheme="leapfrog")
        self.assertEqual(FpSolveConfig.from_dict({"grid": [0, 1], "seed": 3}).grid, (0.0, 1.0))


class TestExceptions(unittest.TestCase):
    def test_exit_codes(self):
        self.assertEqual(PeacockLabError("x").exit_code, 1)
        self.assertEqual(ValidationError("x").exit_code, 2)
        self.assertEqual(NumericalError("x").exit_code, 3)
        self.assertEqual(CflError("x").exit_code, 3)
        self.assertEqual(InfeasibleError("x").exit_code, 3)

    def test_payloads(self):
        err = ValidationError("bad", violations=[{"i": 0}], witness=1.5)
        self.assertEqual(err.to_dict(), {"error": "ValidationError", "message": "bad",
                                         "violations": [{"i": 0}], "witness": 1.5})
        self.assertEqual(InfeasibleError("no", {"k": 1}).to_dict()["certificate"], {"k": 1})


if __name__ == '__main__':
    unittest.main()
