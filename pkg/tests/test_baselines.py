import math
import unittest
import unittest.mock

import numpy as np
import torch
from parameterized import parameterized
from scipy.stats import norm

from nofis.baselines import (ESTIMATORS, AisConfig, McConfig, SssConfig, SusConfig, adaptive_is_estimate, mc_estimate,
                             sss_estimate, sus_estimate)
from nofis.baselines import adaptive_is
from nofis.baselines.adaptive_is import GaussianMixture
from nofis.baselines.scaled_sigma import fit_scaling_model
from nofis.errors import ConvergenceError, ExtrapolationError, InvalidArgumentError, InvalidStateError
from nofis.problem import Bound
from nofis.problems import FunctionProblem, Halfspace, Ring

dtype = torch.float64

HALFSPACE_P = norm.cdf(-1.8)


def whole_space_problem():
    return FunctionProblem(lambda x: 0 * x[:, 0] - 1, 2, Bound(upper=0.0), gradient_mode='analytic')


class TestMonteCarlo(unittest.TestCase):

    def setUp(self) -> None:
        self.generator = torch.Generator().manual_seed(41)

    def test_whole_space(self):
        report = mc_estimate(whole_space_problem(), McConfig(n=1000), self.generator)
        self.assertEqual(report.p_est, 1.0)
        self.assertEqual(report.std_error, 0.0)

    def test_halfspace(self):
        problem = Halfspace()
        report = mc_estimate(problem, McConfig(n=200_000), self.generator)
        self.assertEqual(report.calls, 200_000)
        self.assertEqual(problem.calls, 200_000)
        self.assertLessEqual(abs(report.p_est - HALFSPACE_P), 3 * report.std_error)

    def test_unbiased_over_repeats(self):
        problem = Halfspace()
        estimates = np.array([mc_estimate(problem, McConfig(n=2000), self.generator).p_est for _ in range(200)])
        grand_error = estimates.std(ddof=1) / math.sqrt(len(estimates))
        self.assertLessEqual(abs(estimates.mean() - HALFSPACE_P), 3 * grand_error)
        self.assertEqual(problem.calls, 200 * 2000)

    def test_batches(self):
        problem = Halfspace()
        with unittest.mock.patch('nofis.baselines.monte_carlo.MAX_BATCH', 300):
            report = mc_estimate(problem, McConfig(n=1000), self.generator)
        self.assertEqual(problem.calls, 1000)
        self.assertEqual(report.hits, round(report.p_est * 1000))

    def test_invalid(self):
        with self.assertRaises(InvalidArgumentError):
            McConfig(n=0)


class TestSubsetSimulation(unittest.TestCase):

    def setUp(self) -> None:
        self.generator = torch.Generator().manual_seed(42)

    def test_common_event_is_monte_carlo(self):
        problem = Halfspace(threshold=0.0)
        config = SusConfig(n_level=2000)
        report = sus_estimate(problem, config, self.generator)
        self.assertEqual(report.details['thresholds'], [])
        self.assertEqual(report.calls, 2000)
        self.assertAlmostEqual(report.p_est, 0.5, delta=0.05)

    def test_halfspace(self):
        problem = Halfspace()
        config = SusConfig(n_level=2000)
        report = sus_estimate(problem, config, self.generator)
        levels = len(report.details['thresholds']) + 1
        self.assertEqual(report.calls, config.calls(levels))
        self.assertEqual(problem.calls, 2000 + (levels - 1) * 1800)
        self.assertLess(abs(math.log10(report.p_est) - math.log10(HALFSPACE_P)), 0.3)
        self.assertIsNotNone(report.std_error)

    def test_stagnation(self):
        constant = FunctionProblem(lambda x: 0 * x[:, 0] + 1, 2, Bound(upper=0.0), gradient_mode='analytic')
        with self.assertRaises(ConvergenceError):
            sus_estimate(constant, SusConfig(n_level=100), self.generator)

    def test_call_count_mismatch(self):
        with unittest.mock.patch.object(SusConfig, 'calls', return_value=-1):
            with self.assertRaises(InvalidStateError):
                sus_estimate(Halfspace(threshold=0.0), SusConfig(n_level=200), self.generator)

    def test_level_limit(self):
        with self.assertRaises(ConvergenceError):
            sus_estimate(Halfspace(threshold=10.0), SusConfig(n_level=200, max_levels=2), self.generator)

    @parameterized.expand([
        ('p0', {'p0': 1.0}),
        ('fractional_seeds', {'p0': 0.1, 'n_level': 105}),
        ('single_seed', {'p0': 0.1, 'n_level': 10}),
        ('proposal', {'proposal_std': 0.0}),
    ])
    def test_invalid(self, _, kwargs):
        with self.assertRaises(InvalidArgumentError):
            SusConfig(**kwargs)

    def test_call_formula(self):
        config = SusConfig(p0=0.1, n_level=1000)
        self.assertEqual(config.calls(1), 1000)
        self.assertEqual(config.calls(4), 1000 + 3 * 900)


class TestScaledSigma(unittest.TestCase):

    def setUp(self) -> None:
        self.generator = torch.Generator().manual_seed(43)

    def test_fit_recovers_model(self):
        alpha, beta, gamma = -2.0, 1.3, 4.5
        scales = [1.5, 2.0, 2.5, 3.0]
        probabilities = [math.exp(alpha + beta * math.log(s) - gamma / s ** 2) for s in scales]
        coefficients, residuals = fit_scaling_model(scales, probabilities)
        self.assertTrue(np.allclose(coefficients, (alpha, beta, gamma)))
        self.assertTrue(np.allclose(residuals, 0.0, atol=1e-10))

    def test_halfspace(self):
        problem = Halfspace()
        report = sss_estimate(problem, SssConfig(samples_per_scale=20_000), self.generator)
        self.assertEqual(report.calls, 80_000)
        self.assertEqual(problem.calls, 80_000)
        self.assertLess(abs(math.log(report.p_est / HALFSPACE_P)), math.log(3))

    def test_decay_term_is_positive(self):
        report = sss_estimate(Halfspace(), SssConfig(samples_per_scale=20_000), self.generator)
        # log P(s) bends like the Gaussian tail -t^2 / 2s^2
        self.assertGreater(report.details['gamma'], 0.0)

    def test_scale_invariant_event(self):
        problem = FunctionProblem(lambda x: -x[:, 0], 2, Bound(upper=0.0), gradient_mode='analytic')
        report = sss_estimate(problem, SssConfig(samples_per_scale=20_000), self.generator)
        self.assertAlmostEqual(report.p_est, 0.5, delta=0.15)
        self.assertLess(abs(report.details['gamma']), 1.0)

    def test_too_few_informative_scales(self):
        with self.assertRaises(ExtrapolationError):
            sss_estimate(Halfspace(threshold=30.0), SssConfig(samples_per_scale=1000), self.generator)

    @parameterized.expand([((1.5, 2.0),), ((0.5, 2.0, 3.0),), ((2.0, 1.5, 3.0),)])
    def test_invalid_scales(self, scales):
        with self.assertRaises(InvalidArgumentError):
            SssConfig(scales=scales)


class TestAdaptiveIS(unittest.TestCase):

    def setUp(self) -> None:
        self.generator = torch.Generator().manual_seed(44)

    def test_common_band(self):
        problem = Ring(lower=1.0, upper=2.5)
        config = AisConfig(components=1, iterations=2, samples_per_iteration=2000, final_samples=5000)
        report = adaptive_is_estimate(problem, config, self.generator)
        self.assertEqual(report.calls, config.budget)
        self.assertEqual(problem.calls, 2 * 2000 + 5000)
        self.assertLessEqual(abs(report.p_est - problem.analytic_probability()), 4 * report.std_error)
        self.assertEqual(report.details['thresholds'][0], 0.0)

    def test_mixture_sampling(self):
        mixture = GaussianMixture(torch.tensor([0.25, 0.75], dtype=dtype),
                                  torch.tensor([[-2.0, 0.0], [2.0, 1.0]], dtype=dtype),
                                  torch.stack([0.5 * torch.eye(2, dtype=dtype), torch.eye(2, dtype=dtype)]))
        x = mixture.sample(40_000, self.generator)
        expected_mean = torch.tensor([1.0, 0.75], dtype=dtype)
        self.assertTrue(torch.allclose(torch.mean(x, dim=0), expected_mean, atol=0.05))
        self.assertEqual(mixture.log_prob(x).shape, (40_000,))

    def test_floor_escalation(self):
        mixture = GaussianMixture.initial(1, 2, self.generator)
        x = torch.randn(50, 2, generator=self.generator, dtype=dtype)
        w = torch.full((50,), 1 / 50, dtype=dtype)
        with unittest.mock.patch('nofis.baselines.adaptive_is._weighted_em', side_effect=[None, None, mixture]) as em:
            refitted = adaptive_is._refit(mixture, x, w, AisConfig(covariance_floor=1e-6))
        self.assertIs(refitted, mixture)
        self.assertTrue(np.allclose([c.args[3] for c in em.call_args_list], [1e-6, 1e-5, 1e-4]))

    def test_floor_escalation_gives_up(self):
        problem = Ring(lower=1.0, upper=2.5)
        config = AisConfig(components=1, iterations=2, samples_per_iteration=200, final_samples=100)
        with unittest.mock.patch('nofis.baselines.adaptive_is._weighted_em', return_value=None) as em:
            with self.assertRaises(ConvergenceError):
                adaptive_is_estimate(problem, config, self.generator)
        self.assertTrue(np.allclose([c.args[3] for c in em.call_args_list], [1e-6, 1e-5, 1e-4, 1e-3]))
        self.assertEqual(problem.calls, 200)

    @parameterized.expand([
        ('components', {'components': 0}),
        ('elite', {'elite_fraction': 0.9}),
        ('floor', {'covariance_floor': 0.0}),
    ])
    def test_invalid(self, _, kwargs):
        with self.assertRaises(InvalidArgumentError):
            AisConfig(**kwargs)


class TestRegistry(unittest.TestCase):

    def test_estimators(self):
        self.assertEqual(sorted(ESTIMATORS), ['ais', 'mc', 'sss', 'sus'])
        for name, (config_cls, estimate) in ESTIMATORS.items():
            self.assertTrue(callable(estimate))
            config_cls()

    def test_report_method(self):
        _, estimate = ESTIMATORS['mc']
        report = estimate(whole_space_problem(), McConfig(n=10), torch.Generator().manual_seed(45))
        self.assertEqual(report.method, 'mc')


if __name__ == '__main__':
    unittest.main(verbosity=2)
