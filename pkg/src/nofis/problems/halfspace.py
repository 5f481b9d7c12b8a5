from scipy.stats import norm

from nofis.problem import Bound, GoldenValue, RareEventProblem


class Halfspace(RareEventProblem):
    """g(x) = t - x_1 below 0: the one dimensional tail {x >= t}."""
    name = 'halfspace1d'

    def __init__(self, threshold=1.8, **kwargs):
        self.threshold = float(threshold)
        kwargs.setdefault('golden', GoldenValue(float(norm.cdf(-self.threshold)), 'analytic'))
        super().__init__(1, Bound(upper=0.0), **kwargs)

    def g_function(self, x):
        return self.threshold - x[:, 0]

    def analytic_probability(self):
        return float(norm.cdf(-self.threshold))
