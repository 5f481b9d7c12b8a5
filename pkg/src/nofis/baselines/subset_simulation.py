"""Subset simulation with the modified (component-wise) Metropolis sampler."""
import logging
import math
from dataclasses import dataclass

import torch

from nofis.errors import ConvergenceError, InvalidArgumentError, InvalidStateError
from nofis.problem import RareEventProblem
from nofis.report import EstimateReport
from nofis.utils import standard_normal_sample

logger = logging.getLogger(__name__)

dtype = torch.float64


@dataclass(frozen=True)
class SusConfig:
    p0: float = 0.1
    n_level: int = 1000
    proposal_std: float = 1.0
    max_levels: int = 20

    def __post_init__(self):
        if not 0 < self.p0 < 1:
            raise InvalidArgumentError('p0 must lie in (0, 1), got {}'.format(self.p0))
        seeds = self.n_level * self.p0
        if abs(seeds - round(seeds)) > 1e-9 or round(seeds) < 2:
            raise InvalidArgumentError('n_level * p0 must be an integer of at least 2, got {}'.format(seeds))
        if self.n_level % round(seeds):
            raise InvalidArgumentError('n_level must be a multiple of n_level * p0 = {}'.format(round(seeds)))
        if not self.proposal_std > 0:
            raise InvalidArgumentError('proposal_std must be positive, got {}'.format(self.proposal_std))
        if self.max_levels < 1:
            raise InvalidArgumentError('max_levels must be at least 1, got {}'.format(self.max_levels))

    @property
    def n_seeds(self):
        return round(self.n_level * self.p0)

    def calls(self, levels):
        """Counted calls of a run that sampled `levels` times; seeds are not re-evaluated."""
        return self.n_level + (levels - 1) * (self.n_level - self.n_seeds)


def _modified_metropolis(problem, seeds, seed_v, threshold, chain_length, proposal_std, generator):
    """Grows one chain per seed inside {violation <= threshold}; returns all chain states."""
    states, values = [seeds], [seed_v]
    current, current_v = seeds, seed_v
    for _ in range(chain_length - 1):
        step = proposal_std * torch.randn(current.shape, generator=generator, dtype=dtype)
        candidate = current + step
        # per-component accept/reject against the standard normal marginals
        log_ratio = 0.5 * (torch.square(current) - torch.square(candidate))
        u = torch.rand(current.shape, generator=generator, dtype=dtype)
        candidate = torch.where(torch.log(u) < log_ratio, candidate, current)
        candidate_v = problem.bound.violation(problem.evaluate(candidate))
        accept = candidate_v <= threshold
        current = torch.where(accept.unsqueeze(-1), candidate, current)
        current_v = torch.where(accept, candidate_v, current_v)
        states.append(current)
        values.append(current_v)
    return torch.cat(states), torch.cat(values)


def sus_estimate(problem: RareEventProblem, config: SusConfig, generator=None) -> EstimateReport:
    """p0^(L-1) times the hit fraction of the last level, levels at the p0 quantile of the violation."""
    n, n_seeds = config.n_level, config.n_seeds
    chain_length = n // n_seeds
    start = problem.calls

    x = standard_normal_sample(n, problem.dim, generator)
    v = problem.bound.violation(problem.evaluate(x))
    thresholds = []
    for level in range(config.max_levels):
        order = torch.argsort(v)
        threshold = v[order[n_seeds - 1]].item()
        if threshold <= 0:
            fraction = float(torch.mean((v <= 0).to(dtype)))
            break
        if thresholds and threshold >= thresholds[-1]:
            raise ConvergenceError('subset simulation stagnated at level {}: threshold {:.6g} does not decrease'
                                   .format(level + 1, threshold))
        thresholds.append(threshold)
        logger.debug('%s: subset level %d at violation %.6g', problem.name, level + 1, threshold)
        seeds = order[:n_seeds]
        x, v = _modified_metropolis(problem, x[seeds], v[seeds], threshold, chain_length, config.proposal_std,
                                    generator)
    else:
        raise ConvergenceError('subset simulation did not reach the event within {} levels'.format(config.max_levels))

    intermediate = len(thresholds)
    p_est = config.p0 ** intermediate * fraction
    std_error = None
    if fraction > 0:
        # independent-level approximation of the coefficient of variation
        cov2 = intermediate * (1 - config.p0) / (n * config.p0) + (1 - fraction) / (n * fraction)
        std_error = p_est * math.sqrt(cov2)
    calls = problem.calls - start
    if calls != config.calls(intermediate + 1):
        raise InvalidStateError('subset simulation spent {} calls, expected {} for {} levels'
                                .format(calls, config.calls(intermediate + 1), intermediate + 1))
    return EstimateReport(p_est=p_est, calls=calls, method='sus', std_error=std_error,
                          details={'thresholds': thresholds, 'final_fraction': fraction})
