import math
import unittest

import torch
from parameterized import parameterized

from nofis.diffcore import (DenseNet, GradientBundle, grad_check, make_optimizer_state, net_backward, net_forward,
                            optimizer_step)
from nofis.errors import InvalidArgumentError, InvalidStateError, TrainingDivergenceError

dtype = torch.float64


def _set_layer(net, i, weight, bias):
    with torch.no_grad():
        net.weights[i].copy_(torch.tensor(weight, dtype=dtype))
        net.biases[i].copy_(torch.tensor(bias, dtype=dtype))


class TestDenseNet(unittest.TestCase):

    def setUp(self) -> None:
        self.generator = torch.Generator().manual_seed(1)

    def test_zero_net(self):
        net = DenseNet([3, 5, 2])
        with torch.no_grad():
            for p in net.parameters():
                p.zero_()
        x = torch.randn(7, 3, dtype=dtype, generator=self.generator)
        output, _ = net_forward(net, x)
        self.assertTrue(torch.equal(output, torch.zeros(7, 2, dtype=dtype)))

    def test_zero_output_initialization(self):
        net = DenseNet([2, 8, 8, 3], generator=self.generator)
        output, _ = net_forward(net, torch.randn(4, 2, dtype=dtype, generator=self.generator))
        self.assertTrue(torch.equal(output, torch.zeros(4, 3, dtype=dtype)))
        self.assertGreater(float(torch.max(torch.abs(net.weights[0]))), 0.0)

    def test_identity_linear_layer(self):
        net = DenseNet([3, 3])
        _set_layer(net, 0, torch.eye(3).tolist(), [0.0, 0.0, 0.0])
        v = torch.tensor([[0.3, -1.2, 4.0]], dtype=dtype)
        output, _ = net_forward(net, v)
        self.assertTrue(torch.equal(output, v))

    def test_hand_evaluated_net(self):
        net = DenseNet([2, 3, 1])
        w1 = [[0.2, -0.4], [0.7, 0.1], [-0.5, 0.3]]
        b1 = [0.05, -0.1, 0.2]
        w2 = [[1.5, -0.8, 0.6]]
        b2 = [0.25]
        _set_layer(net, 0, w1, b1)
        _set_layer(net, 1, w2, b2)
        x = (0.5, -0.3)
        hidden = [math.tanh(w[0] * x[0] + w[1] * x[1] + b) for w, b in zip(w1, b1)]
        expected = sum(a * h for a, h in zip(w2[0], hidden)) + b2[0]
        output, _ = net_forward(net, torch.tensor([x], dtype=dtype))
        self.assertAlmostEqual(output.item(), expected, places=14)

    def test_shape_mismatch(self):
        net = DenseNet([3, 4, 1])
        with self.assertRaises(InvalidArgumentError):
            net_forward(net, torch.zeros(5, 2, dtype=dtype))


class TestBackward(unittest.TestCase):

    def setUp(self) -> None:
        self.generator = torch.Generator().manual_seed(2)
        self.net = DenseNet([2, 6, 6, 2], zero_output=False, generator=self.generator)
        self.x = torch.randn(5, 2, dtype=dtype, generator=self.generator)

    def test_zero_upstream(self):
        _, cache = net_forward(self.net, self.x)
        input_grad, grads = net_backward(self.net, cache, torch.zeros(5, 2, dtype=dtype))
        self.assertEqual(float(torch.max(torch.abs(input_grad))), 0.0)
        self.assertEqual(grads.max_abs(), 0.0)

    def test_linear_layer(self):
        net = DenseNet([3, 1], zero_output=False, generator=self.generator)
        x = torch.tensor([[0.4, -2.0, 1.5]], dtype=dtype)
        _, cache = net_forward(net, x)
        input_grad, grads = net_backward(net, cache, torch.ones(1, 1, dtype=dtype))
        self.assertTrue(torch.allclose(grads['weights.0'], x))
        self.assertTrue(torch.allclose(grads['biases.0'], torch.ones(1, dtype=dtype)))
        self.assertTrue(torch.allclose(input_grad, net.weights[0].detach()))

    def test_bundle_matches_parameters(self):
        _, cache = net_forward(self.net, self.x)
        _, grads = net_backward(self.net, cache, torch.ones(5, 2, dtype=dtype))
        self.assertIsInstance(grads, GradientBundle)
        self.assertEqual(list(grads), [name for name, _ in self.net.named_parameters()])
        for (name, p) in self.net.named_parameters():
            self.assertEqual(grads[name].shape, p.shape)
        self.assertTrue(grads.is_finite())

    def test_cache_reuse(self):
        _, cache = net_forward(self.net, self.x)
        first, _ = net_backward(self.net, cache, torch.ones(5, 2, dtype=dtype))
        second, _ = net_backward(self.net, cache, torch.ones(5, 2, dtype=dtype))
        self.assertTrue(torch.equal(first, second))

    def test_stale_cache(self):
        _, cache = net_forward(self.net, self.x)
        _, grads = net_backward(self.net, cache, torch.ones(5, 2, dtype=dtype))
        state = make_optimizer_state(self.net.parameters(), modules=[self.net])
        optimizer_step(list(self.net.parameters()), grads, state)
        with self.assertRaises(InvalidStateError):
            net_backward(self.net, cache, torch.ones(5, 2, dtype=dtype))

    def test_foreign_cache(self):
        other = DenseNet([2, 6, 6, 2], generator=self.generator)
        _, cache = net_forward(other, self.x)
        with self.assertRaises(InvalidStateError):
            net_backward(self.net, cache, torch.ones(5, 2, dtype=dtype))

    def test_upstream_shape_mismatch(self):
        _, cache = net_forward(self.net, self.x)
        with self.assertRaises(InvalidArgumentError):
            net_backward(self.net, cache, torch.ones(5, 3, dtype=dtype))


class TestOptimizerStep(unittest.TestCase):

    def setUp(self) -> None:
        self.param = torch.nn.Parameter(torch.tensor([1.0, -2.0, 0.5], dtype=dtype))
        self.state = make_optimizer_state([self.param], lr=1e-2)

    def _bundle(self, values):
        return GradientBundle([('p', torch.tensor(values, dtype=dtype))])

    def test_zero_gradient(self):
        before = self.param.detach().clone()
        optimizer_step([self.param], self._bundle([0.0, 0.0, 0.0]), self.state)
        self.assertTrue(torch.equal(self.param.detach(), before))
        self.assertEqual(self.state.step_count, 1)

    def test_first_update_has_step_size(self):
        before = self.param.detach().clone()
        optimizer_step([self.param], self._bundle([3.0, -0.2, 40.0]), self.state)
        displacement = self.param.detach() - before
        expected = torch.tensor([-1e-2, 1e-2, -1e-2], dtype=dtype)
        self.assertTrue(torch.allclose(displacement, expected, atol=1e-8))

    def test_descent_direction(self):
        before = self.param.detach().clone()
        for _ in range(50):
            optimizer_step([self.param], self._bundle([1.0, -1.0, 2.0]), self.state)
        displacement = self.param.detach() - before
        self.assertTrue(bool(torch.all(displacement[[0, 2]] < 0)))
        self.assertTrue(bool(displacement[1] > 0))
        self.assertEqual(self.state.step_count, 50)

    @parameterized.expand([('nan', math.nan), ('inf', math.inf)])
    def test_non_finite_gradient(self, _, bad):
        before = self.param.detach().clone()
        with self.assertRaises(TrainingDivergenceError) as raised:
            optimizer_step([self.param], self._bundle([0.1, bad, 0.1]), self.state)
        self.assertEqual(raised.exception.optimizer_step, 0)
        self.assertTrue(torch.equal(self.param.detach(), before))

    def test_wrong_count(self):
        with self.assertRaises(InvalidArgumentError):
            optimizer_step([self.param], GradientBundle(), self.state)


class TestGradCheck(unittest.TestCase):

    def setUp(self) -> None:
        self.generator = torch.Generator().manual_seed(3)

    def test_zero_net(self):
        net = DenseNet([2, 4, 1])
        with torch.no_grad():
            for p in net.parameters():
                p.zero_()
        self.assertLess(grad_check(net, torch.randn(3, 2, dtype=dtype, generator=self.generator)), 1e-8)

    @parameterized.expand([([2, 5, 1],), ([3, 4, 4, 2],), ([1, 8, 3],)])
    def test_random_net(self, sizes):
        net = DenseNet(sizes, zero_output=False, generator=self.generator)
        x = torch.randn(4, sizes[0], dtype=dtype, generator=self.generator)
        self.assertLessEqual(grad_check(net, x, 1e-5), 1e-4)

    def test_subsampled_entries(self):
        net = DenseNet([4, 32, 32, 2], zero_output=False, generator=self.generator)
        x = torch.randn(3, 4, dtype=dtype, generator=self.generator)
        self.assertLessEqual(grad_check(net, x, max_entries=20, generator=self.generator), 1e-4)

    def test_corrupted_backward(self):
        net = DenseNet([2, 5, 1], zero_output=False, generator=self.generator)
        x = torch.randn(4, 2, dtype=dtype, generator=self.generator)

        def doubled(net, cache, upstream):
            input_grad, grads = net_backward(net, cache, upstream)
            return input_grad, GradientBundle((name, 2 * g) for name, g in grads.items())

        self.assertGreater(grad_check(net, x, backward=doubled), 1e-1)

    @parameterized.expand([(0.0,), (-1e-5,), (0.1,)])
    def test_invalid_epsilon(self, epsilon):
        net = DenseNet([2, 1])
        with self.assertRaises(InvalidArgumentError):
            grad_check(net, torch.zeros(1, 2, dtype=dtype), epsilon)


if __name__ == '__main__':
    unittest.main(verbosity=2)
