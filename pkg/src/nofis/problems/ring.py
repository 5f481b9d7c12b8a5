import math

import torch

from nofis.problem import Bound, RareEventProblem


class Ring(RareEventProblem):
    """g(x) = x1^2 + x2^2 inside a band, an annulus under the two dimensional normal."""
    name = 'ring'

    def __init__(self, lower=16.0, upper=20.25, **kwargs):
        super().__init__(2, Bound(lower, upper), **kwargs)

    def g_function(self, x):
        return torch.sum(torch.square(x), dim=-1)

    def analytic_probability(self):
        # the squared radius of a 2-D standard normal is exponential with rate 1/2
        return math.exp(-self.bound.lower / 2) - math.exp(-self.bound.upper / 2)

    def quadrature_boxes(self):
        r = math.sqrt(self.bound.upper)
        return [(-r, r, -r, r)]
