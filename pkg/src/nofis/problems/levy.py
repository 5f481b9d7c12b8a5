import math

import torch

from nofis.problem import Bound, GoldenValue, RareEventProblem


class Levy(RareEventProblem):
    """Levy function with w = 1 + (x - 1) / 4, inside the band [0, 6]."""
    name = 'levy'

    def __init__(self, dim=20, lower=0.0, upper=6.0, **kwargs):
        default = dim == 20 and (lower, upper) == (0.0, 6.0)
        kwargs.setdefault('golden', GoldenValue(3.70e-6, 'paper-table') if default else None)
        super().__init__(dim, Bound(lower, upper), **kwargs)

    def g_function(self, x):
        w = 1 + (x - 1) / 4
        first = torch.square(torch.sin(math.pi * w[:, 0]))
        body = torch.sum(torch.square(w[:, :-1] - 1) * (1 + 10 * torch.square(torch.sin(math.pi * w[:, :-1] + 1))),
                         dim=-1)
        last = torch.square(w[:, -1] - 1) * (1 + torch.square(torch.sin(2 * math.pi * w[:, -1])))
        return first + body + last
