import torch
from scipy.stats import norm

from nofis.problem import Bound, GoldenValue, RareEventProblem

OFFSET = 1.8


class Cube(RareEventProblem):
    """g(x) = max_i (1.8 - x_i): the event is the orthant corner {x_i >= 1.8 for all i}."""
    name = 'cube'

    def __init__(self, dim=6, **kwargs):
        kwargs.setdefault('golden', GoldenValue(2.15e-9, 'paper-table') if dim == 6 else None)
        super().__init__(dim, Bound(upper=0.0), **kwargs)

    def g_function(self, x):
        # torch.max routes the gradient to the first maximal coordinate
        return torch.max(OFFSET - x, dim=-1).values

    def analytic_probability(self):
        return float(norm.cdf(self.bound.upper - OFFSET) ** self.dim)
