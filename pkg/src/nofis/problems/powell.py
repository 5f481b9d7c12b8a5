import torch

from nofis.errors import InvalidArgumentError
from nofis.problem import Bound, GoldenValue, RareEventProblem


class Powell(RareEventProblem):
    """Powell singular function summed over consecutive blocks of four coordinates, below 4."""
    name = 'powell'

    def __init__(self, dim=40, upper=4.0, **kwargs):
        if dim % 4:
            raise InvalidArgumentError('Powell needs a dimension divisible by 4, got {}'.format(dim))
        default = dim == 40 and upper == 4.0
        kwargs.setdefault('golden', GoldenValue(3.15e-5, 'paper-table') if default else None)
        super().__init__(dim, Bound(upper=upper), **kwargs)

    def g_function(self, x):
        x1, x2, x3, x4 = x[:, 0::4], x[:, 1::4], x[:, 2::4], x[:, 3::4]
        terms = (torch.square(x1 + 10 * x2) + 5 * torch.square(x3 - x4)
                 + torch.pow(x2 - 2 * x3, 4) + 10 * torch.pow(x1 - x4, 4))
        return torch.sum(terms, dim=-1)
