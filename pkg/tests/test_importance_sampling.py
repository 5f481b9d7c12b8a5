import math
import os
import tempfile
import unittest

import torch
from scipy.stats import norm

from nofis.errors import InvalidArgumentError
from nofis.flow import FlowModel, checkpoint_load
from nofis.importance_sampling import build_model, importance_estimate, run_nofis
from nofis.problem import Bound, ThresholdSchedule
from nofis.problems import Cube, FunctionProblem, Halfspace, Leaf, Ring
from nofis.training import TrainConfig

dtype = torch.float64


class TestImportanceEstimate(unittest.TestCase):

    def setUp(self) -> None:
        self.generator = torch.Generator().manual_seed(51)

    def test_whole_space_is_certain(self):
        problem = FunctionProblem(lambda x: 0 * x[:, 0] - 1, 2, Bound(upper=0.0), gradient_mode='analytic')
        report = importance_estimate(FlowModel(2, 2, 2, hidden=(4,)), problem, 100, self.generator)
        self.assertEqual(report.p_est, 1.0)
        self.assertEqual(report.hits, 100)
        self.assertEqual(report.std_error, 0.0)
        self.assertEqual(report.weights.max_log_weight, 0.0)
        self.assertAlmostEqual(report.weights.effective_sample_size, 100.0)

    def test_identity_model_is_monte_carlo(self):
        # grand mean over repeated identity-proposal estimates is unbiased for the analytic tail
        problem = Halfspace()
        model = FlowModel(1, 1, 2, hidden=(4,))
        n_is, repeats = 10_000, 1000
        estimates = [importance_estimate(model, problem, n_is, self.generator).p_est for _ in range(repeats)]
        p = norm.cdf(-1.8)
        grand_std_error = math.sqrt(p * (1 - p) / (n_is * repeats))
        self.assertLessEqual(abs(sum(estimates) / repeats - p), 3 * grand_std_error)
        self.assertEqual(problem.calls, n_is * repeats)

    def test_running_estimates(self):
        report = importance_estimate(FlowModel(2, 1, 2, hidden=(4,)), Ring(lower=1.0, upper=2.5), 100,
                                     self.generator)
        self.assertEqual([n for n, _ in report.running_estimates], [1, 2, 4, 8, 16, 32, 64, 100])
        self.assertAlmostEqual(report.running_estimates[-1][1], report.p_est, places=14)

    def test_zero_hits_warns(self):
        problem = Cube()
        with self.assertWarns(UserWarning):
            report = importance_estimate(FlowModel(6, 1, 2, hidden=(4,)), problem, 50, self.generator)
        self.assertEqual(report.p_est, 0.0)
        self.assertTrue(report.zero_hits)
        self.assertIsNone(report.log10_p_est)
        self.assertEqual(len(report.warnings), 1)
        self.assertIsNone(report.weights.max_weight_share)

    def test_dimension_mismatch(self):
        with self.assertRaises(InvalidArgumentError):
            importance_estimate(FlowModel(3, 1, 2, hidden=(4,)), Leaf(), 10, self.generator)

    def test_sample_count(self):
        with self.assertRaises(InvalidArgumentError):
            importance_estimate(FlowModel(2, 1, 2, hidden=(4,)), Leaf(), 0, self.generator)


class TestRunNofis(unittest.TestCase):

    def setUp(self) -> None:
        self.generator = torch.Generator().manual_seed(52)
        self.config = TrainConfig(steps=4, layers_per_step=2, epochs=2, batch_size=20, n_is=10, hidden=(8,))

    def test_explicit_schedule_calls(self):
        leaf = Leaf()
        schedule = ThresholdSchedule.from_values([15, 8, 3, 0], leaf.bound)
        report, model = run_nofis(leaf, self.config, schedule, generator=self.generator)
        self.assertEqual(report.calls, 4 * 2 * 20 + 10)
        self.assertEqual(report.training_calls, 160)
        self.assertEqual(report.pilot_calls, 0)
        self.assertEqual(leaf.calls, report.calls)
        self.assertEqual(report.schedule, [[None, 15.0], [None, 8.0], [None, 3.0], [None, 0.0]])
        self.assertEqual(len(report.steps), 4)
        self.assertEqual(model.num_layers, 8)

    def test_suggested_schedule_calls(self):
        leaf = Leaf()
        report, _ = run_nofis(leaf, self.config, pilot_n=1000, generator=self.generator)
        self.assertEqual(report.pilot_calls, 1000)
        self.assertEqual(report.calls, 1000 + 160 + 10)
        self.assertEqual(report.schedule[-1], [None, 0.0])

    def test_checkpoint(self):
        ring = Ring()
        config = TrainConfig(steps=1, layers_per_step=2, epochs=2, batch_size=20, n_is=10, hidden=(8,))
        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, 'ring.ckpt')
            _, model = run_nofis(ring, config, ThresholdSchedule((ring.bound,)), generator=self.generator,
                                 checkpoint_path=path)
            loaded = checkpoint_load(path)
        for p, q in zip(model.parameters(), loaded.parameters()):
            self.assertTrue(torch.equal(p, q))

    def test_seeded_runs_repeat(self):
        ring = Ring()
        config = TrainConfig(steps=1, layers_per_step=2, epochs=3, batch_size=20, n_is=50, hidden=(8,), seed=7)
        first, _ = run_nofis(Ring(), config, ThresholdSchedule((ring.bound,)))
        second, _ = run_nofis(Ring(), config, ThresholdSchedule((ring.bound,)))
        self.assertEqual(first, second)

    def test_build_model(self):
        model = build_model(Leaf(), self.config, self.generator)
        self.assertEqual((model.dim, model.steps, model.layers_per_step, model.hidden), (2, 4, 2, (8,)))


if __name__ == '__main__':
    unittest.main(verbosity=2)
