import unittest
import sys
import os

import numpy as np

# Add project root to sys.path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from call_surface import (bachelier_surface, black_scholes_surface, extract_density, gaussian_surface,
                          implied_forward, lognormal_surface, second_differences, surface_from_family,
                          validate_surface)
from core.exceptions import ValidationError
from core.io_schema import CallSurface, PeacockFamily
from measures import from_atoms, gaussian_measure

TIMES = np.linspace(0.1, 1.0, 10)
STRIKES = np.linspace(-5.0, 5.0, 201)


class TestClosedForms(unittest.TestCase):
    def test_zero_variance_is_intrinsic(self):
        s = gaussian_surface(1.0, [0.0, 1.0], [0.5, 1.0], STRIKES)
        np.testing.assert_allclose(s.prices[0], np.maximum(1.0 - STRIKES, 0.0))

    def test_at_the_money_bachelier(self):
        """ATM price is vol * sqrt(t / 2pi)"""
        s = bachelier_surface(0.0, 2.0, TIMES, STRIKES)
        np.testing.assert_allclose(s.prices[:, 100], 2.0 * np.sqrt(TIMES / (2 * np.pi)), rtol=1e-12)
        self.assertEqual(s.meta["source"], "bachelier")

    def test_black_scholes_at_the_money(self):
        """Zero-rate ATM call is s0 (2N(vol sqrt(t)/2) - 1)"""
        from scipy.stats import norm
        s = black_scholes_surface(100.0, 0.2, [1.0], [90.0, 100.0, 110.0])
        self.assertAlmostEqual(s.prices[0, 1], 100.0 * (2 * norm.cdf(0.1) - 1), places=10)
        self.assertEqual(s.convention, "multiplicative")

    def test_lognormal_rejects_nonpositive_strikes(self):
        with self.assertRaises(ValidationError):
            lognormal_surface(1.0, [0.1], [1.0], [0.0, 1.0])

    def test_family_surface_matches_call_function(self):
        fam = PeacockFamily(np.array([1.0, 2.0]),
                            (from_atoms([0.0]), from_atoms([-1.0, 1.0])))
        s = surface_from_family(fam, strikes=[-1.0, 0.0, 1.0])
        np.testing.assert_allclose(s.prices, [[1.0, 0.0, 0.0], [1.0, 0.5, 0.0]])
        self.assertEqual(implied_forward(s), 0.0)

    def test_family_surface_requires_peacock(self):
        fam = PeacockFamily(np.array([1.0, 2.0]),
                            (from_atoms([-1.0, 1.0]), from_atoms([0.0])))
        with self.assertRaises(ValidationError) as ctx:
            surface_from_family(fam)
        self.assertEqual(ctx.exception.witness["times"], (1.0, 2.0))

    def test_implied_forward_from_lowest_strike(self):
        s = CallSurface(np.array([1.0]), np.array([-2.0, 0.0, 2.0]), np.array([[2.5, 0.8, 0.1]]))
        self.assertAlmostEqual(implied_forward(s), 0.5)


class TestValidation(unittest.TestCase):
    def setUp(self):
        self.surface = bachelier_surface(0.0, 1.0, TIMES, STRIKES)

    def test_closed_form_passes(self):
        report = validate_surface(self.surface)
        self.assertTrue(report.passed)
        self.assertEqual(report.to_dict(), {"passed": True, "violations": []})

    def test_bump_reports_convexity_and_monotonicity(self):
        """A 10% dent at one node breaks convexity at its neighbours and time monotonicity at the node"""
        prices = self.surface.prices.copy()
        prices[5, 100] *= 0.9
        s = CallSurface(TIMES, STRIKES, prices, forward=0.0)
        report = validate_surface(s)
        self.assertFalse(report.passed)
        self.assertEqual(report.kinds(), ["convexity", "monotonicity"])
        convexity = {(v.i, v.j) for v in report.violations if v.kind == "convexity"}
        self.assertEqual(convexity, {(5, 99), (5, 101)})
        monotonicity = [(v.i, v.j) for v in report.violations if v.kind == "monotonicity"]
        self.assertEqual(monotonicity, [(5, 100)])

    def test_swapped_rows_break_monotonicity(self):
        prices = self.surface.prices.copy()
        prices[[2, 3]] = prices[[3, 2]]
        report = validate_surface(CallSurface(TIMES, STRIKES, prices, forward=0.0))
        self.assertEqual(report.kinds(), ["monotonicity"])
        self.assertTrue(all(v.i == 3 for v in report.violations))

    def test_intrinsic_violation(self):
        prices = self.surface.prices.copy()
        prices[0, 0] = 1.0
        report = validate_surface(CallSurface(TIMES, STRIKES, prices, forward=0.0))
        self.assertIn("intrinsic", report.kinds())

    def test_second_differences_on_uniform_grid(self):
        row = np.array([4.0, 1.0, 0.0, 1.0])
        np.testing.assert_allclose(second_differences(row, np.arange(4.0)), [2.0, 2.0])


class TestDensityExtraction(unittest.TestCase):
    def test_exact_inversion_of_atoms(self):
        """Prices of a measure on the strike grid invert to the same measure"""
        strikes = np.arange(-30, 31) / 10
        m = from_atoms([-1.0, 0.0, 2.0], [0.2, 0.5, 0.3])
        s = surface_from_family(PeacockFamily(np.array([1.0]), (m,)), strikes=strikes)
        out = extract_density(s, 0)
        expected = np.zeros(strikes.size)
        expected[[20, 30, 50]] = [0.2, 0.5, 0.3]
        np.testing.assert_allclose(out.measure.weights, expected, atol=1e-12)
        self.assertAlmostEqual(out.interior_mass, 1.0, places=12)
        self.assertAlmostEqual(out.renormalization, 1.0, places=12)

    def test_gaussian_density_recovered(self):
        grid = np.linspace(-8.0, 8.0, 641)
        fam = PeacockFamily(np.array([1.0]), (gaussian_measure(0.0, 1.0, grid=grid),))
        out = extract_density(surface_from_family(fam, strikes=grid), 0)
        np.testing.assert_allclose(out.measure.weights, fam.measures[0].weights, atol=1e-12)

    def test_concave_row_raises_with_violations(self):
        s = CallSurface(np.array([1.0]), np.array([0.0, 1.0, 2.0, 3.0]), np.array([[1.0, 0.8, 0.3, 0.0]]))
        with self.assertRaises(ValidationError) as ctx:
            extract_density(s, 0)
        self.assertEqual(ctx.exception.violations[0]["j"], 1)

    def test_needs_three_strikes(self):
        s = CallSurface(np.array([1.0]), np.array([0.0, 1.0]), np.array([[0.5, 0.1]]))
        with self.assertRaises(ValidationError):
            extract_density(s, 0)


if __name__ == '__main__':
    unittest.main()
