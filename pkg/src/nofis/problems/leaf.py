import math

import torch

from nofis.problem import Bound, GoldenValue, RareEventProblem

CENTER = 3.8


class Leaf(RareEventProblem):
    """Two unit discs centred at (3.8, 3.8) and (-3.8, -3.8).

    g(x) = min(|x - c|^2, |x + c|^2) - 1, so the level {g <= a} is a pair of discs of radius sqrt(a + 1).
    """
    name = 'leaf'

    def __init__(self, upper=0.0, **kwargs):
        kwargs.setdefault('golden', GoldenValue(4.74e-6, 'paper-table') if upper == 0 else None)
        super().__init__(2, Bound(upper=upper), **kwargs)
        self.center = torch.tensor([CENTER, CENTER], dtype=torch.float64)

    def g_function(self, x):
        to_first = torch.sum(torch.square(x - self.center), dim=-1)
        to_second = torch.sum(torch.square(x + self.center), dim=-1)
        return torch.minimum(to_first, to_second) - 1

    def quadrature_boxes(self):
        radius = math.sqrt(self.bound.upper + 1)
        return [(c - radius, c + radius, c - radius, c + radius) for c in (CENTER, -CENTER)]
