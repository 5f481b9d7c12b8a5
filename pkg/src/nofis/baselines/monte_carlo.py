import logging
import math
from dataclasses import dataclass

import torch

from nofis.errors import InvalidArgumentError
from nofis.problem import RareEventProblem
from nofis.report import EstimateReport
from nofis.utils import standard_normal_sample

logger = logging.getLogger(__name__)

# batches keep memory flat for the 1e7-sample oracles
MAX_BATCH = 1_000_000


@dataclass(frozen=True)
class McConfig:
    n: int = 50_000

    def __post_init__(self):
        if self.n < 1:
            raise InvalidArgumentError('n must be at least 1, got {}'.format(self.n))


def mc_estimate(problem: RareEventProblem, config: McConfig, generator=None) -> EstimateReport:
    """Fraction of base samples inside the event; the standard error is binomial."""
    hits = 0
    remaining = config.n
    while remaining:
        batch = min(remaining, MAX_BATCH)
        x = standard_normal_sample(batch, problem.dim, generator)
        hits += int(torch.sum(problem.membership(problem.evaluate(x))))
        remaining -= batch
    p_est = hits / config.n
    logger.debug('%s: %d of %d Monte Carlo samples hit the event', problem.name, hits, config.n)
    return EstimateReport(p_est=p_est, calls=config.n, method='mc', hits=hits,
                          std_error=math.sqrt(p_est * (1 - p_est) / config.n))
