"""Scaled-sigma sampling: Monte Carlo under inflated base spreads, extrapolated back to s = 1."""
import logging
import math
from dataclasses import dataclass

import more_itertools
import numpy as np
import torch

from nofis.errors import ExtrapolationError, InvalidArgumentError
from nofis.problem import RareEventProblem
from nofis.report import EstimateReport
from nofis.utils import standard_normal_sample

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SssConfig:
    scales: tuple = (1.5, 2.0, 2.5, 3.0)
    samples_per_scale: int = 10_000

    def __post_init__(self):
        object.__setattr__(self, 'scales', tuple(float(s) for s in self.scales))
        if len(self.scales) < 3:
            raise InvalidArgumentError('at least 3 scales are needed, got {}'.format(len(self.scales)))
        if any(s <= 1 for s in self.scales) or any(a >= b for a, b in more_itertools.pairwise(self.scales)):
            raise InvalidArgumentError('scales must be > 1 and strictly increasing, got {}'.format(list(self.scales)))
        if self.samples_per_scale < 1:
            raise InvalidArgumentError('samples_per_scale must be at least 1, got {}'.format(self.samples_per_scale))


def fit_scaling_model(scales, probabilities):
    """Least squares fit of log P(s) = alpha + beta log s - gamma / s^2.

    :return: (alpha, beta, gamma) and the residuals of the fit
    """
    s = np.asarray(scales, dtype=np.float64)
    design = np.stack([np.ones_like(s), np.log(s), -1.0 / np.square(s)], axis=1)
    target = np.log(np.asarray(probabilities, dtype=np.float64))
    coefficients, *_ = np.linalg.lstsq(design, target, rcond=None)
    return tuple(float(c) for c in coefficients), (target - design @ coefficients).tolist()


def sss_estimate(problem: RareEventProblem, config: SssConfig, generator=None) -> EstimateReport:
    n = config.samples_per_scale
    hits = []
    for scale in config.scales:
        x = scale * standard_normal_sample(n, problem.dim, generator)
        hits.append(int(torch.sum(problem.membership(problem.evaluate(x)))))
    informative = [(s, h / n) for s, h in zip(config.scales, hits) if h > 0]
    logger.debug('%s: scaled-sigma hits %s', problem.name, dict(zip(config.scales, hits)))
    if len(informative) < 3:
        raise ExtrapolationError('only {} of {} scales produced hits, 3 are needed to extrapolate'
                                 .format(len(informative), len(config.scales)))

    (alpha, beta, gamma), residuals = fit_scaling_model(*zip(*informative))
    p_est = math.exp(alpha - gamma)
    return EstimateReport(p_est=p_est, calls=n * len(config.scales), method='sss',
                          details={'alpha': alpha, 'beta': beta, 'gamma': gamma, 'residuals': residuals,
                                   'hits': hits, 'scales': list(config.scales)})
