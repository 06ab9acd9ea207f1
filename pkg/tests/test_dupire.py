import unittest
import sys
import os

import numpy as np

# Add project root to sys.path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from call_surface import bachelier_surface, black_scholes_surface, gaussian_surface
from core.exceptions import ValidationError
from core.io_schema import CallSurface
from dupire import (DupireConfig, calibrate, constant_local_vol, implied_diffusion_check, local_vol_additive,
                    local_vol_multiplicative, time_derivative, time_value_rate)


class TestTimeDerivative(unittest.TestCase):
    def test_central_exact_on_quadratics(self):
        """Three-point stencils (ends included) are exact for t^2 on a nonuniform grid"""
        times = np.array([0.1, 0.25, 0.3, 0.6, 0.65, 1.0])
        prices = (times ** 2)[:, None]
        np.testing.assert_allclose(time_derivative(prices, times)[:, 0], 2 * times, atol=1e-12)

    def test_forward_exact_on_lines(self):
        times = np.array([0.0, 0.5, 2.0])
        prices = (3 * times + 1)[:, None]
        np.testing.assert_allclose(time_derivative(prices, times, "forward")[:, 0], [3.0, 3.0, 3.0])

    def test_single_row_is_zero(self):
        self.assertEqual(time_derivative(np.ones((1, 4)), np.array([1.0])).tolist(), [[0.0] * 4])

    def test_end_rows_fall_back_to_first_order(self):
        """A flat start followed by a jump makes the one-sided stencil negative"""
        times = np.array([0.0, 1.0, 2.0])
        prices = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.5, 0.5, 0.5]])
        surface = CallSurface(times, np.array([-1.0, 0.0, 1.0]), prices)
        self.assertLess(time_derivative(prices, times)[0, 1], 0.0)
        rate = time_value_rate(surface, DupireConfig())
        self.assertEqual(rate[0].tolist(), [0.0, 0.0, 0.0])
        np.testing.assert_allclose(rate[-1], [0.75, 0.75, 0.75])


class TestAdditiveCalibration(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.times = np.linspace(0.1, 1.1, 101)
        cls.strikes = np.linspace(-6.0, 6.0, 201)
        cls.surface = bachelier_surface(0.0, 1.0, cls.times, cls.strikes)
        cls.lv = local_vol_additive(cls.surface)

    def _region(self, stds, t_min=0.3):
        t = self.times[:, None]
        x = self.strikes[None, :]
        return (t >= t_min) & (np.abs(x) <= stds * np.sqrt(t))

    def test_default_config_accepts_short_maturity_tails(self):
        """Row 0 at t=0.1, k=-1.74: exact C_t is 1.7e-7, the one-sided stencil undershoots"""
        j = int(np.argmin(np.abs(self.strikes + 1.74)))
        self.assertLess(time_derivative(self.surface.prices, self.times)[0, j], 0.0)
        rate = time_value_rate(self.surface, DupireConfig())
        forward = (self.surface.prices[1, j] - self.surface.prices[0, j]) / (self.times[1] - self.times[0])
        self.assertGreater(rate[0, j], 0.0)
        self.assertAlmostEqual(rate[0, j], forward, delta=1e-12)
        self.assertTrue(np.all(rate >= 0.0))
        self.assertTrue(np.all(np.isfinite(self.lv.sigma)))

    def test_constant_vol_recovered_in_the_core(self):
        """sigma = 1 to 1e-3 within one standard deviation from t = 0.3 on"""
        err = np.abs(self.lv.sigma - 1.0)[self._region(1.0)]
        self.assertLess(err.max(), 1e-3)

    def test_constant_vol_near_the_first_maturity(self):
        """Within one standard deviation on every row the time stencil keeps the error under 2.5e-3"""
        err = np.abs(self.lv.sigma - 1.0)[self._region(1.0, t_min=0.0)]
        self.assertLess(err.max(), 2.5e-3)

    def test_constant_vol_recovered_to_three_std(self):
        err = np.abs(self.lv.sigma - 1.0)[self._region(3.0)]
        self.assertLess(err.max(), 1e-2)

    def test_clamps_only_in_the_far_wings(self):
        """Only underflowing C_xx nodes beyond 3 std get floored"""
        self.assertEqual({c.reason for c in self.lv.clamp_report}, {"cxx_floor"})
        for c in self.lv.clamp_report:
            self.assertGreater(abs(self.strikes[c.j]), 3.0 * np.sqrt(self.times[c.i]))
        self.assertEqual(self.lv.convention, "additive")

    def test_time_dependent_variance(self):
        """Total variance t^2 has local vol sqrt(2t)"""
        times = np.linspace(0.5, 1.5, 101)
        strikes = np.linspace(-6.0, 6.0, 241)
        lv = calibrate(gaussian_surface(0.0, times ** 2, times, strikes))
        mask = np.abs(strikes[None, :]) <= times[:, None]
        expected = np.broadcast_to(np.sqrt(2 * times)[:, None], lv.sigma.shape)
        np.testing.assert_allclose(lv.sigma[mask], expected[mask], rtol=2e-3)

    def test_decreasing_prices_rejected(self):
        prices = self.surface.prices.copy()
        prices[[10, 11]] = prices[[11, 10]]
        with self.assertRaises(ValidationError) as ctx:
            local_vol_additive(CallSurface(self.times, self.strikes, prices, forward=0.0))
        self.assertTrue(ctx.exception.violations)
        self.assertEqual({v["i"] for v in ctx.exception.violations}, {11})

    def test_sigma_max_clamps_are_reported(self):
        lv = local_vol_additive(self.surface, DupireConfig(sigma_max=0.5))
        self.assertLessEqual(lv.sigma.max(), 0.5)
        self.assertTrue(lv.clamp_report)
        self.assertIn("sigma_max", {c.reason for c in lv.clamp_report})
        core = [c for c in lv.clamp_report if abs(self.strikes[c.j]) <= np.sqrt(self.times[c.i])]
        self.assertTrue(all(c.reason == "sigma_max" for c in core))

    def test_convention_mismatch(self):
        with self.assertRaises(ValidationError):
            local_vol_multiplicative(self.surface)


class TestMultiplicativeCalibration(unittest.TestCase):
    def test_black_scholes_vol_recovered(self):
        times = np.linspace(0.1, 1.1, 101)
        strikes = np.linspace(50.0, 200.0, 301)
        lv = calibrate(black_scholes_surface(100.0, 0.2, times, strikes))
        self.assertEqual(lv.convention, "multiplicative")
        mask = (times[:, None] >= 0.3) & (np.abs(strikes[None, :] - 100.0) <= 10.0)
        self.assertLess(np.abs(lv.sigma - 0.2)[mask].max(), 2e-3)


class TestDiagnostics(unittest.TestCase):
    def _residual(self, n_strikes):
        times = np.linspace(0.5, 1.5, 201)
        strikes = np.linspace(-6.0, 6.0, n_strikes)
        surface = bachelier_surface(0.0, 1.0, times, strikes)
        return implied_diffusion_check(surface, constant_local_vol(1.0, times, strikes))

    def test_residual_shrinks_with_refinement(self):
        """Halving the strike step cuts the residual by at least 3x"""
        coarse = self._residual(61)
        fine = self._residual(121)
        self.assertGreater(coarse.max_abs / fine.max_abs, 3.0)
        self.assertEqual(set(fine.to_dict()), {"max_abs", "l2"})

    def test_calibrated_surface_has_small_residual(self):
        times = np.linspace(0.2, 1.0, 41)
        strikes = np.linspace(-5.0, 5.0, 101)
        surface = bachelier_surface(0.0, 1.0, times, strikes)
        lv = calibrate(surface)
        residual = implied_diffusion_check(surface, lv).residual
        mask = np.ones_like(residual, dtype=bool)
        for c in lv.clamp_report:
            mask[c.i, c.j - 1] = False
        self.assertLess(np.abs(residual[mask]).max(), 1e-10)

    def test_grid_mismatch(self):
        surface = bachelier_surface(0.0, 1.0, [0.5, 1.0], np.linspace(-3, 3, 7))
        with self.assertRaises(ValidationError):
            implied_diffusion_check(surface, constant_local_vol(1.0, [0.5, 1.0], np.linspace(-3, 3, 9)))

    def test_config_from_dict_ignores_other_keys(self):
        cfg = DupireConfig.from_dict({"sigma_max": 3.0, "seed": 7})
        self.assertEqual(cfg.sigma_max, 3.0)
        with self.assertRaises(ValidationError):
            DupireConfig(time_stencil="backward")


if __name__ == '__main__':
    unittest.main()
