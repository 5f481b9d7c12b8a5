"""Rare-event problems: a characteristic function g, an admissible interval for g(x) and call accounting.

The event is Omega = {x : lower <= g(x) <= upper} under a standard normal x. Every evaluation of g
that goes through a problem is counted, finite-difference gradients included.
"""
import math
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import more_itertools
import torch

from nofis.errors import InvalidArgumentError, ScheduleError
from nofis.utils import as_batch, standard_normal_sample

dtype = torch.float64
device = 'cpu'

GRADIENT_MODES = ('analytic', 'finite_difference')
DEFAULT_FD_STEP = 1e-5

# a pilot quantile is trusted only if at least this many samples lie below it
_MIN_PILOT_HITS = 10
# base mass below the first suggested level
FIRST_LEVEL_FRACTION = 0.75


@dataclass(frozen=True)
class Bound:
    """Closed interval [lower, upper] for g(x); either side may be infinite."""
    lower: float = -math.inf
    upper: float = math.inf

    def __post_init__(self):
        if math.isnan(self.lower) or math.isnan(self.upper) or self.lower > self.upper:
            raise InvalidArgumentError('invalid bound [{}, {}]'.format(self.lower, self.upper))

    @property
    def kind(self):
        if math.isfinite(self.lower) and math.isfinite(self.upper):
            return 'band'
        if math.isfinite(self.upper):
            return 'upper'
        if math.isfinite(self.lower):
            return 'lower'
        return 'everything'

    def contains(self, gval):
        gval = torch.as_tensor(gval, dtype=dtype)
        return (gval >= self.lower) & (gval <= self.upper)

    def violation(self, gval):
        """max(g - upper, lower - g): nonpositive exactly inside the bound."""
        gval = torch.as_tensor(gval, dtype=dtype)
        return torch.maximum(gval - self.upper, self.lower - gval)

    def widen(self, margin):
        """The bound {g : violation(g) <= margin}."""
        return Bound(self.lower - margin, self.upper + margin)

    def strictly_inside(self, other: 'Bound'):
        """True if this interval is a proper subset of `other`."""
        return other.lower <= self.lower and self.upper <= other.upper and self != other

    def to_list(self):
        return [None if math.isinf(self.lower) else self.lower, None if math.isinf(self.upper) else self.upper]


@dataclass(frozen=True)
class ThresholdSchedule:
    """Strictly shrinking levels; the last one is the bound of the problem itself."""
    levels: Tuple[Bound, ...]

    def __post_init__(self):
        object.__setattr__(self, 'levels', tuple(self.levels))
        if not self.levels:
            raise ScheduleError('a schedule needs at least one level')
        for m, (outer, inner) in enumerate(more_itertools.pairwise(self.levels), start=1):
            if not inner.strictly_inside(outer):
                raise ScheduleError('level {} {} is not strictly inside level {} {}'
                                    .format(m + 1, inner.to_list(), m, outer.to_list()))

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, m):
        return self.levels[m]

    def __iter__(self):
        return iter(self.levels)

    @classmethod
    def from_values(cls, values: Sequence, bound: Bound) -> 'ThresholdSchedule':
        """Reads thresholds the way the bound kind suggests.

        Upper bounds take upper thresholds, lower bounds take lower thresholds, bands take [l, u] pairs.
        """
        levels = []
        for value in values:
            if bound.kind == 'band':
                if not isinstance(value, (list, tuple)) or len(value) != 2:
                    raise ScheduleError('band problems need [lower, upper] pairs, got {!r}'.format(value))
                levels.append(Bound(float(value[0]), float(value[1])))
            elif bound.kind == 'upper':
                levels.append(Bound(bound.lower, float(value)))
            elif bound.kind == 'lower':
                levels.append(Bound(float(value), bound.upper))
            else:
                raise ScheduleError('cannot build thresholds for an unbounded event')
        schedule = cls(tuple(levels))
        if schedule.levels[-1] != bound:
            raise ScheduleError('last level {} differs from the event bound {}'
                                .format(schedule.levels[-1].to_list(), bound.to_list()))
        return schedule


@dataclass(frozen=True)
class GoldenValue:
    value: float
    provenance: str
    std_error: Optional[float] = None


class CallCounter:
    """Monotone counter of g evaluations, safe to share between threads."""
    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    def add(self, n):
        with self._lock:
            self._count += int(n)

    @property
    def value(self):
        with self._lock:
            return self._count


class _FiniteDifferenceG(torch.autograd.Function):
    """g with a central-difference backward; each backward sample costs 2 * dim counted calls."""

    @staticmethod
    def forward(ctx, x, problem):
        ctx.save_for_backward(x)
        ctx.problem = problem
        problem.counter.add(x.shape[0])
        return problem.g_function(x)

    @staticmethod
    def backward(ctx, grad_output):
        x, = ctx.saved_tensors
        grad = ctx.problem.finite_difference_gradient(x)
        return grad * grad_output.unsqueeze(-1), None


class RareEventProblem(ABC):
    """P[lower <= g(x) <= upper] for x ~ N(0, I_dim).

    Subclasses implement `g_function` on batches of shape [n, dim] with torch operations, so
    analytic gradients come from autograd.
    """
    name = None

    def __init__(self, dim, bound: Bound, *, golden: GoldenValue = None, gradient_mode='analytic',
                 fd_step=DEFAULT_FD_STEP):
        if dim < 1:
            raise InvalidArgumentError('dimension must be positive, got {}'.format(dim))
        if gradient_mode not in GRADIENT_MODES:
            raise InvalidArgumentError('gradient mode must be one of {}, got {!r}'.format(GRADIENT_MODES, gradient_mode))
        self.dim = int(dim)
        self.bound = bound
        self.golden = golden
        self.gradient_mode = gradient_mode
        self.fd_step = fd_step
        self.counter = CallCounter()

    @abstractmethod
    def g_function(self, x: torch.Tensor) -> torch.Tensor:
        """g on a batch [n, dim], returning [n]. Uncounted."""
        raise NotImplementedError

    def __repr__(self):
        return '{}(dim={}, bound={})'.format(type(self).__name__, self.dim, self.bound.to_list())

    @property
    def calls(self):
        return self.counter.value

    def _checked_batch(self, x):
        x = as_batch(x)
        if x.shape[-1] != self.dim:
            raise InvalidArgumentError('{} expects points of dimension {}, got {}'
                                       .format(self.name, self.dim, x.shape[-1]))
        if not bool(torch.all(torch.isfinite(x))):
            raise InvalidArgumentError('g is only defined for finite inputs')
        return x

    def evaluate(self, x) -> torch.Tensor:
        """Counted g on a batch, without gradient tracking."""
        x = self._checked_batch(x)
        self.counter.add(x.shape[0])
        with torch.no_grad():
            return self.g_function(x)

    def evaluate_differentiable(self, x: torch.Tensor) -> torch.Tensor:
        """Counted g whose result carries a gradient with respect to x.

        In finite-difference mode the gradient is only computed (and paid for) when backpropagated.
        """
        if x.dim() != 2 or x.shape[-1] != self.dim:
            raise InvalidArgumentError('{} expects a batch of shape [n, {}], got {}'
                                       .format(self.name, self.dim, list(x.shape)))
        if not bool(torch.all(torch.isfinite(x.detach()))):
            raise InvalidArgumentError('g is only defined for finite inputs')
        if self.gradient_mode == 'finite_difference':
            return _FiniteDifferenceG.apply(x, self)
        self.counter.add(x.shape[0])
        return self.g_function(x)

    def gradient(self, x) -> torch.Tensor:
        x = self._checked_batch(x)
        if self.gradient_mode == 'finite_difference':
            return self.finite_difference_gradient(x)
        leaf = x.detach().clone().requires_grad_(True)
        with torch.enable_grad():
            value = self.g_function(leaf)
            grad, = torch.autograd.grad(value.sum(), leaf, allow_unused=True)
        return torch.zeros_like(x) if grad is None else grad

    def finite_difference_gradient(self, x) -> torch.Tensor:
        """Central differences with step fd_step; adds 2 * dim counted calls per point."""
        x = x.detach()
        n = x.shape[0]
        shifts = self.fd_step * torch.eye(self.dim, dtype=dtype, device=device)
        probes = torch.cat([x.unsqueeze(1) + shifts, x.unsqueeze(1) - shifts], dim=1).reshape(-1, self.dim)
        self.counter.add(probes.shape[0])
        with torch.no_grad():
            values = self.g_function(probes).reshape(n, 2, self.dim)
        return (values[:, 0] - values[:, 1]) / (2 * self.fd_step)

    def membership(self, gval):
        return self.bound.contains(gval)


def eval_g(problem: RareEventProblem, x):
    """Counted g at a single point (float) or at a batch (tensor)."""
    values = problem.evaluate(x)
    return values.item() if torch.as_tensor(x).dim() == 1 else values


def eval_grad_g(problem: RareEventProblem, x):
    grad = problem.gradient(x)
    return grad[0] if torch.as_tensor(x).dim() == 1 else grad


def membership(problem: RareEventProblem, gval):
    inside = problem.membership(gval)
    return bool(inside) if inside.dim() == 0 else inside


def suggest_schedule(problem: RareEventProblem, steps, pilot_n=1000, generator=None, *,
                     first_fraction=FIRST_LEVEL_FRACTION) -> ThresholdSchedule:
    """Levels whose probabilities shrink roughly tenfold per step, from a counted pilot run.

    The first level sits at the `first_fraction` quantile of the violation max(g - u, l - g) over
    pilot_n base samples, so it holds most of the base mass. Level m sits at the
    first_fraction * 10^-(m - 1) quantile as long as at least 10 samples back it and it is positive.
    Past that point the margins shrink geometrically in (1 + margin) down to the bound itself.
    """
    if steps < 1:
        raise InvalidArgumentError('steps must be positive, got {}'.format(steps))
    if not 0 < first_fraction < 1:
        raise InvalidArgumentError('first_fraction must lie in (0, 1), got {}'.format(first_fraction))
    if steps == 1:
        return ThresholdSchedule((problem.bound,))
    if pilot_n < 1000:
        raise InvalidArgumentError('pilot_n must be at least 1000, got {}'.format(pilot_n))

    x = standard_normal_sample(pilot_n, problem.dim, generator)
    v = problem.bound.violation(problem.evaluate(x))
    if bool(torch.all(v == v[0])):
        raise ScheduleError('pilot run is degenerate: all {} samples give the same g value'.format(pilot_n))
    v_sorted, _ = torch.sort(v)

    margins = []
    for m in range(1, steps):
        rank = math.ceil(pilot_n * first_fraction * 10.0 ** (1 - m))
        if rank < _MIN_PILOT_HITS:
            break
        margin = v_sorted[rank - 1].item()
        if margin <= 0 or (margins and margin >= margins[-1]):
            break
        margins.append(margin)

    if not margins:
        # even the first level is unresolved: start from the pilot median of the positive violations
        positive = v_sorted[v_sorted > 0]
        if positive.numel() == 0:
            raise ScheduleError('pilot run found no sample outside the event, no thresholds to build')
        margins.append(torch.median(positive).item())

    resolved = len(margins)
    remaining = steps - resolved
    top = math.log1p(margins[-1])
    for j in range(1, remaining):
        margins.append(math.expm1(top * (remaining - j) / remaining))
    return ThresholdSchedule(tuple(problem.bound.widen(c) for c in margins) + (problem.bound,))
