import torch

from nofis.problem import Bound, GoldenValue, RareEventProblem


class Rosenbrock(RareEventProblem):
    """sum_i 100 (x_{i+1} - x_i^2)^2 + (x_i - 1)^2 inside the thin band [3.48, 3.52]."""
    name = 'rosen'

    def __init__(self, dim=10, lower=3.48, upper=3.52, **kwargs):
        default = dim == 10 and (lower, upper) == (3.48, 3.52)
        kwargs.setdefault('golden', GoldenValue(4.69e-4, 'paper-table') if default else None)
        super().__init__(dim, Bound(lower, upper), **kwargs)

    def g_function(self, x):
        head, tail = x[:, :-1], x[:, 1:]
        return torch.sum(100 * torch.square(tail - torch.square(head)) + torch.square(head - 1), dim=-1)
