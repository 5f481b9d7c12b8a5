"""Small dense networks, their gradients and the adaptive-moment optimizer used to train them.

The reverse pass is torch's: `net_forward` records the graph, the returned cache keeps it alive
and `net_backward` replays it for an arbitrary output gradient.
"""
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import torch

from nofis.errors import InvalidArgumentError, InvalidStateError, TrainingDivergenceError

dtype = torch.float64
device = 'cpu'

DEFAULT_LR = 1e-3
DEFAULT_BETAS = (0.9, 0.999)
DEFAULT_EPS = 1e-8

# gradients smaller than this are compared in absolute terms by grad_check
_GRAD_FLOOR = 1e-3


class DenseNet(torch.nn.Module):
    """Feedforward network: tanh on hidden layers, identity on the output layer.

    Layer i holds a weight of shape [sizes[i+1], sizes[i]] and a bias of shape [sizes[i+1]].
    """
    def __init__(self, layer_sizes: Sequence[int], *, zero_output=True, generator: torch.Generator = None):
        """
        :param layer_sizes: input size, hidden sizes..., output size
        :param zero_output: initialize the last layer to zero, so the net outputs 0 everywhere
        :param generator: random stream for the uniform fan-in initialization of earlier layers
        """
        super().__init__()
        if len(layer_sizes) < 2 or any(int(s) < 0 for s in layer_sizes):
            raise InvalidArgumentError('layer_sizes must list at least an input and an output size, got {}'
                                       .format(list(layer_sizes)))
        self.layer_sizes = [int(s) for s in layer_sizes]
        self.weights = torch.nn.ParameterList()
        self.biases = torch.nn.ParameterList()
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            self.weights.append(torch.nn.Parameter(torch.zeros(fan_out, fan_in, dtype=dtype, device=device)))
            self.biases.append(torch.nn.Parameter(torch.zeros(fan_out, dtype=dtype, device=device)))
        # bumped whenever parameters change in place, invalidates older forward caches
        self.generation = 0
        self.reset_parameters(zero_output=zero_output, generator=generator)

    def reset_parameters(self, *, zero_output=True, generator=None):
        with torch.no_grad():
            for i, (weight, bias) in enumerate(zip(self.weights, self.biases)):
                if zero_output and i == len(self.weights) - 1:
                    weight.zero_()
                    bias.zero_()
                    continue
                bound = 1.0 / math.sqrt(max(weight.shape[1], 1))
                weight.uniform_(-bound, bound, generator=generator)
                bias.uniform_(-bound, bound, generator=generator)
        self.generation += 1

    @property
    def input_size(self):
        return self.layer_sizes[0]

    @property
    def output_size(self):
        return self.layer_sizes[-1]

    def forward(self, x):
        h = x
        last = len(self.weights) - 1
        for i, (weight, bias) in enumerate(zip(self.weights, self.biases)):
            h = torch.nn.functional.linear(h, weight, bias)
            if i < last:
                h = torch.tanh(h)
        return h


class GradientBundle(OrderedDict):
    """Parameter name -> gradient tensor, shaped like the parameters of the owning module."""

    @classmethod
    def from_grads(cls, named_parameters, grads):
        bundle = cls()
        for (name, param), grad in zip(named_parameters, grads):
            bundle[name] = torch.zeros_like(param) if grad is None else grad.detach()
        return bundle

    @classmethod
    def zeros_like(cls, module: torch.nn.Module):
        return cls((name, torch.zeros_like(p)) for name, p in module.named_parameters())

    def is_finite(self):
        return all(bool(torch.all(torch.isfinite(g))) for g in self.values())

    def max_abs(self):
        return max((float(torch.max(torch.abs(g))) for g in self.values() if g.numel()), default=0.0)


@dataclass
class ForwardCache:
    net: DenseNet
    input: torch.Tensor
    output: torch.Tensor
    generation: int


@dataclass
class OptimizerState:
    """Adam moments live inside `optimizer`; `step_count` counts applied updates."""
    optimizer: torch.optim.Optimizer
    lr: float = DEFAULT_LR
    betas: tuple = DEFAULT_BETAS
    eps: float = DEFAULT_EPS
    step_count: int = 0
    modules: list = field(default_factory=list, repr=False)


def make_optimizer_state(params: Iterable[torch.nn.Parameter], *, lr=DEFAULT_LR, betas=DEFAULT_BETAS,
                         eps=DEFAULT_EPS, modules=()) -> OptimizerState:
    params = list(params)
    if not params:
        raise InvalidArgumentError('optimizer needs at least one parameter')
    optimizer = torch.optim.Adam(params, lr=lr, betas=betas, eps=eps)
    return OptimizerState(optimizer=optimizer, lr=lr, betas=tuple(betas), eps=eps, modules=list(modules))


def net_forward(net: DenseNet, x: torch.Tensor):
    """Evaluates the net and keeps what the backward pass needs.

    :return: output of shape [n, sizes[-1]] and a cache for `net_backward`
    """
    if x.dim() != 2 or x.shape[1] != net.input_size:
        raise InvalidArgumentError('net expects inputs of shape [n, {}], got {}'
                                   .format(net.input_size, list(x.shape)))
    leaf = x.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        output = net(leaf)
    return output.detach(), ForwardCache(net=net, input=leaf, output=output, generation=net.generation)


def net_backward(net: DenseNet, cache: ForwardCache, upstream_grad: torch.Tensor):
    """Pulls `upstream_grad` (d loss / d output) back to the input and to every parameter."""
    if cache.net is not net or cache.generation != net.generation:
        raise InvalidStateError('forward cache does not belong to the current state of this net')
    if upstream_grad.shape != cache.output.shape:
        raise InvalidArgumentError('upstream gradient shape {} does not match output shape {}'
                                   .format(list(upstream_grad.shape), list(cache.output.shape)))
    named = list(net.named_parameters())
    grads = torch.autograd.grad(cache.output, [cache.input] + [p for _, p in named],
                                grad_outputs=upstream_grad, retain_graph=True, allow_unused=True)
    input_grad = torch.zeros_like(cache.input) if grads[0] is None else grads[0]
    return input_grad.detach(), GradientBundle.from_grads(named, grads[1:])


def optimizer_step(params: Sequence[torch.nn.Parameter], grads: Optional[GradientBundle], state: OptimizerState):
    """One Adam update of `params` with `grads` (given in the same order as `params`).

    Parameters whose gradient is None in the bundle are left to the optimizer as-is.
    """
    params = list(params)
    if grads is not None:
        if len(grads) != len(params):
            raise InvalidArgumentError('got {} gradients for {} parameters'.format(len(grads), len(params)))
        for param, grad in zip(params, grads.values()):
            if grad.shape != param.shape:
                raise InvalidArgumentError('gradient shape {} does not match parameter shape {}'
                                           .format(list(grad.shape), list(param.shape)))
            param.grad = grad.clone()
    for param in params:
        if param.grad is not None and not bool(torch.all(torch.isfinite(param.grad))):
            raise TrainingDivergenceError('non-finite gradient at optimizer step {}'.format(state.step_count),
                                          optimizer_step=state.step_count)
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.step_count += 1
    for module in state.modules:
        for net in module.modules():
            if isinstance(net, DenseNet):
                net.generation += 1
    return params, state


def _loss_of(net, x, upstream):
    return torch.sum(net(x) * upstream)


def grad_check(net: DenseNet, x: torch.Tensor, epsilon=1e-5, *, upstream_grad=None,
               backward: Callable = None, max_entries=None, generator=None) -> float:
    """Worst relative discrepancy between `backward` and central differences.

    The scalar checked is sum(net(x) * upstream_grad), upstream_grad defaulting to ones.
    Relative errors use max(|analytic|, |numeric|, 1e-3) as denominator.
    :param backward: replacement for `net_backward`, used for negative controls
    :param max_entries: if given, only that many randomly chosen entries per parameter are probed
    """
    if not 0 < epsilon <= 1e-2:
        raise InvalidArgumentError('epsilon must lie in (0, 1e-2], got {}'.format(epsilon))
    backward = net_backward if backward is None else backward
    _, cache = net_forward(net, x)
    if upstream_grad is None:
        upstream_grad = torch.ones_like(cache.output)
    _, analytic = backward(net, cache, upstream_grad)

    worst = 0.0
    with torch.no_grad():
        for name, param in net.named_parameters():
            flat = param.view(-1)
            indices = range(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                indices = torch.randperm(flat.numel(), generator=generator)[:max_entries].tolist()
            grad = analytic[name].reshape(-1)
            for i in indices:
                original = flat[i].item()
                flat[i] = original + epsilon
                plus = _loss_of(net, x, upstream_grad).item()
                flat[i] = original - epsilon
                minus = _loss_of(net, x, upstream_grad).item()
                flat[i] = original
                numeric = (plus - minus) / (2 * epsilon)
                a = grad[i].item()
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), _GRAD_FLOOR))
    return worst
