import unittest
import sys
import os
from unittest import mock

import numpy as np

# Add project root to sys.path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from core.exceptions import ValidationError
from core.io_schema import PathEnsemble
from dupire import constant_local_vol
from mc_engine import (BLOCK_SIZE, GENERATOR_ID, THREADS_ENV, BrownianProcess, LocalVolProcess, block_generator,
                       conditional_price, empirical_kernel, empirical_marginal, increment_second_moment,
                       martingale_report, mean_estimate, proportion_estimate, resolve_workers, run_blocks,
                       simulate_localvol, simulate_process)
from measures import from_atoms, gaussian_measure, w1_distance

TIMES = [0.0, 0.5, 1.0]


class TestBlocks(unittest.TestCase):
    def test_adding_paths_keeps_the_prefix(self):
        """5000 paths are the first rows of the 9000-path run"""
        small = simulate_process(BrownianProcess(), 0.0, TIMES, 5000, seed=3)
        large = simulate_process(BrownianProcess(), 0.0, TIMES, 9000, seed=3)
        np.testing.assert_array_equal(small.paths, large.paths[:5000])
        self.assertEqual(large.generator_id, GENERATOR_ID)

    def test_worker_count_does_not_change_paths(self):
        one = simulate_process(BrownianProcess(), 0.0, TIMES, 3 * BLOCK_SIZE, seed=5, max_workers=1)
        four = simulate_process(BrownianProcess(), 0.0, TIMES, 3 * BLOCK_SIZE, seed=5, max_workers=4)
        np.testing.assert_array_equal(one.paths, four.paths)

    def test_seeds_differ(self):
        a = simulate_process(BrownianProcess(), 0.0, TIMES, 100, seed=1)
        b = simulate_process(BrownianProcess(), 0.0, TIMES, 100, seed=2)
        self.assertFalse(np.array_equal(a.paths, b.paths))

    def test_seed_range(self):
        with self.assertRaises(ValidationError):
            block_generator(-1, 0)
        with self.assertRaises(ValidationError):
            block_generator(2 ** 64, 0)

    def test_empty_run_rejected(self):
        with self.assertRaises(ValidationError):
            run_blocks(0, 0, lambda gen, size: np.zeros(size))

    def test_threads_env(self):
        cpus = os.cpu_count() or 1
        with mock.patch.dict(os.environ, {THREADS_ENV: "2"}):
            self.assertEqual(resolve_workers(), min(2, cpus))
        with mock.patch.dict(os.environ, {THREADS_ENV: "many"}):
            self.assertEqual(resolve_workers(), min(4, cpus))
        self.assertEqual(resolve_workers(1), 1)


class TestProcesses(unittest.TestCase):
    def test_multiplicative_local_vol_is_relative(self):
        lv = constant_local_vol(0.2, [0.0, 1.0], [50.0, 150.0], "multiplicative")
        np.testing.assert_allclose(LocalVolProcess(lv).sigma(0.5, np.array([100.0])), [20.0])
        self.assertEqual(LocalVolProcess(lv).get_info()["convention"], "multiplicative")

    def test_brownian_increments(self):
        """E[(W_1 - W_0.5)^2] = 0.5"""
        ens = simulate_process(BrownianProcess(), 0.0, TIMES, 50000, seed=7)
        est = increment_second_moment(ens, 0.5, 1.0)
        self.assertAlmostEqual(est.value, 0.5, delta=0.02)
        self.assertTrue(martingale_report(ens).holds)


class TestEstimators(unittest.TestCase):
    def test_constant_samples_give_degenerate_interval(self):
        est = mean_estimate(np.zeros(10))
        self.assertEqual((est.value, est.ci_low, est.ci_high), (0.0, 0.0, 0.0))
        self.assertFalse(est.excludes(0.0))

    def test_wilson_interval(self):
        est = proportion_estimate(0, 100)
        self.assertEqual(est.value, 0.0)
        self.assertAlmostEqual(est.ci_low, 0.0, places=12)
        self.assertGreater(est.ci_high, 0.0)
        with self.assertRaises(ValidationError):
            proportion_estimate(0, 0)

    def test_binned_marginal_keeps_the_mean(self):
        ens = simulate_process(BrownianProcess(), 1.0, TIMES, 4000, seed=9)
        binned = empirical_marginal(ens, 1.0, bins=30)
        self.assertLessEqual(binned.size, 30)
        self.assertAlmostEqual(binned.mean, ens.at(1.0).mean(), places=10)


class TestEmpiricalKernel(unittest.TestCase):
    def setUp(self):
        x0 = np.repeat([0.0, 1.0], 100)
        x1 = x0 + np.tile([-1.0, 1.0], 100)
        self.ens = PathEnsemble(np.array([0.0, 1.0]), np.column_stack((x0, x1)), 0, "synthetic")

    def test_atoms_get_their_own_rows(self):
        k = empirical_kernel(self.ens, 0.0, 1.0)
        np.testing.assert_allclose(k.source_grid, [0.0, 1.0])
        np.testing.assert_allclose(k.target_grid, [-1.0, 0.0, 1.0, 2.0])
        np.testing.assert_allclose(k.rows, [[0.5, 0.0, 0.5, 0.0], [0.0, 0.5, 0.0, 0.5]])
        np.testing.assert_allclose(k.martingale_defect(), 0.0, atol=1e-15)
        self.assertEqual(k.sparse_rows, ())

    def test_sparse_rows_flagged(self):
        k = empirical_kernel(self.ens, 0.0, 1.0, min_count=150)
        self.assertEqual(k.sparse_rows, (0, 1))

    def test_time_order(self):
        with self.assertRaises(ValidationError):
            empirical_kernel(self.ens, 1.0, 0.0)

    def test_conditional_price(self):
        est = conditional_price(self.ens, 0.0, 0.0, z=1.0)
        self.assertAlmostEqual(est.value, 1.0)
        with self.assertRaises(ValidationError):
            conditional_price(self.ens, 0.0, 0.0, z=0.5)
        with self.assertRaises(ValidationError):
            conditional_price(self.ens, 1.0, 0.0, z=0.0)


class TestEnsembleLaws(unittest.TestCase):
    """Ensemble-level checks against Brownian motion, 1e5 paths"""

    N = 100000

    @classmethod
    def setUpClass(cls):
        lv = constant_local_vol(1.0, TIMES, [-5.0, 5.0])
        cls.ens = simulate_localvol(lv, 0.0, cls.N, seed=21)

    def test_zero_vol_paths_are_constant(self):
        lv = constant_local_vol(0.0, TIMES, [-5.0, 5.0])
        ens = simulate_localvol(lv, gaussian_measure(0.0, 1.0, n=101), 2000, seed=4)
        np.testing.assert_array_equal(ens.paths, np.repeat(ens.paths[:, :1], len(TIMES), axis=1))
        self.assertGreater(np.ptp(ens.paths[:, 0]), 0.0)

    def test_unit_vol_terminal_variance(self):
        """var(X_1) = 1 within 3 sqrt(2/n)"""
        self.assertAlmostEqual(float(np.var(self.ens.at(1.0))), 1.0, delta=3 * np.sqrt(2 / self.N))

    def test_unit_vol_marginal_is_standard_normal(self):
        exact = gaussian_measure(0.0, 1.0, n=4001)
        self.assertLess(w1_distance(empirical_marginal(self.ens, 1.0), exact), 0.01)

    def test_kernel_rows_are_gaussian(self):
        """Well-populated rows of the 0.5 -> 1 kernel are N(x, 0.5)"""
        k = empirical_kernel(self.ens, 0.5, 1.0, source_bins=20)
        full = np.flatnonzero(k.counts >= 10000)
        self.assertGreaterEqual(full.size, 3)
        for i in full:
            row = k.rows[i]
            law = from_atoms(k.target_grid[row > 0], row[row > 0])
            exact = gaussian_measure(k.source_grid[i], np.sqrt(0.5), n=4001)
            self.assertLess(w1_distance(law, exact), 0.02)

    def test_conditional_price_at_the_money(self):
        """E[(W_1)_+ | W_0.5 = 0] = sqrt(0.5) phi(0) = 0.282"""
        est = conditional_price(self.ens, 0.5, 0.0, z=0.0, bandwidth=0.05, T=1.0)
        self.assertAlmostEqual(est.value, np.sqrt(0.5) / np.sqrt(2 * np.pi), delta=0.02)
        self.assertGreater(est.n, 3000)


if __name__ == '__main__':
    unittest.main()
