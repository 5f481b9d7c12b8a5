from typing import Callable

import torch

from nofis.errors import InvalidArgumentError
from nofis.problem import Bound, RareEventProblem


class FunctionProblem(RareEventProblem):
    """A user supplied g, treated as a black box.

    `g` receives a float64 tensor [n, dim] and returns n values. Gradients default to counted
    finite differences; pass gradient_mode='analytic' when g is written with torch operations.
    """
    def __init__(self, g: Callable, dim, bound: Bound, *, name='function', gradient_mode='finite_difference',
                 **kwargs):
        super().__init__(dim, bound, gradient_mode=gradient_mode, **kwargs)
        self.g = g
        self.name = name

    def g_function(self, x):
        values = self.g(x)
        if not isinstance(values, torch.Tensor):
            values = torch.as_tensor(values, dtype=torch.float64)
        values = values.to(torch.float64).reshape(-1)
        if values.shape[0] != x.shape[0]:
            raise InvalidArgumentError('g returned {} values for {} points'.format(values.shape[0], x.shape[0]))
        return values
