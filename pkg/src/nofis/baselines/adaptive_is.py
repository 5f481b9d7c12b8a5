"""Cross-entropy adaptive importance sampling with a Gaussian mixture proposal."""
import logging
import math
from dataclasses import dataclass

import torch
from torch.distributions import Categorical, MixtureSameFamily, MultivariateNormal

from nofis.errors import ConvergenceError, InvalidArgumentError
from nofis.problem import RareEventProblem
from nofis.report import EstimateReport, WeightStatistics
from nofis.utils import standard_normal_log_prob

logger = logging.getLogger(__name__)

dtype = torch.float64

EM_SWEEPS = 3
FLOOR_ESCALATIONS = 3
# components whose weighted responsibility falls below this keep their previous parameters
_DEAD_COMPONENT = 1e-12


@dataclass(frozen=True)
class AisConfig:
    components: int = 2
    elite_fraction: float = 0.1
    iterations: int = 5
    samples_per_iteration: int = 5000
    final_samples: int = 10_000
    covariance_floor: float = 1e-6

    def __post_init__(self):
        if self.components < 1:
            raise InvalidArgumentError('components must be at least 1, got {}'.format(self.components))
        if not 0 < self.elite_fraction <= 0.5:
            raise InvalidArgumentError('elite_fraction must lie in (0, 0.5], got {}'.format(self.elite_fraction))
        for name in ('iterations', 'samples_per_iteration', 'final_samples'):
            if getattr(self, name) < 1:
                raise InvalidArgumentError('{} must be at least 1, got {}'.format(name, getattr(self, name)))
        if not self.covariance_floor > 0:
            raise InvalidArgumentError('covariance_floor must be positive, got {}'.format(self.covariance_floor))

    @property
    def budget(self):
        return self.iterations * self.samples_per_iteration + self.final_samples


@dataclass
class GaussianMixture:
    weights: torch.Tensor  # [K]
    means: torch.Tensor  # [K, D]
    covariances: torch.Tensor  # [K, D, D]

    @classmethod
    def initial(cls, components, dim, generator=None):
        means = 0.5 * torch.randn(components, dim, generator=generator, dtype=dtype)
        covariances = torch.eye(dim, dtype=dtype).repeat(components, 1, 1)
        return cls(torch.full((components,), 1.0 / components, dtype=dtype), means, covariances)

    def distribution(self):
        return MixtureSameFamily(mixture_distribution=Categorical(probs=self.weights),
                                 component_distribution=MultivariateNormal(self.means, covariance_matrix=self.covariances))

    def log_prob(self, x):
        return self.distribution().log_prob(x)

    def sample(self, n, generator=None):
        components = torch.multinomial(self.weights, n, replacement=True, generator=generator)
        chol = torch.linalg.cholesky(self.covariances)
        noise = torch.randn(n, self.means.shape[1], 1, generator=generator, dtype=dtype)
        return self.means[components] + (chol[components] @ noise).squeeze(-1)


def _weighted_em(mixture: GaussianMixture, x, w, floor):
    """EM sweeps for a mixture fitted to samples x with weights w.

    :return: the refitted mixture, or None if a covariance is not positive definite
    """
    dim = x.shape[1]
    eye = torch.eye(dim, dtype=dtype)
    for _ in range(EM_SWEEPS):
        component_log_prob = MultivariateNormal(mixture.means, covariance_matrix=mixture.covariances) \
            .log_prob(x.unsqueeze(1))  # [n, K]
        log_joint = component_log_prob + torch.log(mixture.weights)
        responsibility = torch.softmax(log_joint, dim=1) * w.unsqueeze(1)  # [n, K]
        mass = responsibility.sum(dim=0)
        alive = mass > _DEAD_COMPONENT

        means = mixture.means.clone()
        covariances = mixture.covariances.clone()
        safe_mass = torch.where(alive, mass, torch.ones_like(mass))
        new_means = (responsibility.T @ x) / safe_mass.unsqueeze(1)
        centered = x.unsqueeze(1) - new_means.unsqueeze(0)  # [n, K, D]
        new_cov = torch.einsum('nk,nki,nkj->kij', responsibility, centered, centered) / safe_mass.view(-1, 1, 1)
        means[alive] = new_means[alive]
        covariances[alive] = new_cov[alive] + floor * eye

        weights = torch.clamp(mass / mass.sum(), min=1e-6)
        mixture = GaussianMixture(weights / weights.sum(), means, covariances)
        _, info = torch.linalg.cholesky_ex(mixture.covariances)
        if bool(torch.any(info > 0)):
            return None
    return mixture


def _refit(mixture, x, w, config):
    floor = config.covariance_floor
    for attempt in range(FLOOR_ESCALATIONS + 1):
        refitted = _weighted_em(mixture, x, w, floor)
        if refitted is not None:
            return refitted
        logger.debug('degenerate mixture covariance, raising the floor to %.1e', floor * 10)
        floor *= 10
    raise ConvergenceError('mixture covariance stayed degenerate after {} floor escalations'.format(FLOOR_ESCALATIONS))


def adaptive_is_estimate(problem: RareEventProblem, config: AisConfig, generator=None) -> EstimateReport:
    """Refits the mixture on the elite (or, once reached, in-event) samples with weights p/q.

    All configured iterations run, so the call count always equals the configured budget.
    """
    mixture = GaussianMixture.initial(config.components, problem.dim, generator)
    thresholds = []
    for iteration in range(config.iterations):
        x = mixture.sample(config.samples_per_iteration, generator)
        v = problem.bound.violation(problem.evaluate(x))
        rank = max(1, math.ceil(config.elite_fraction * config.samples_per_iteration))
        threshold = max(torch.sort(v).values[rank - 1].item(), 0.0)
        thresholds.append(threshold)
        elite = v <= threshold
        log_w = standard_normal_log_prob(x[elite]) - mixture.log_prob(x[elite])
        w = torch.softmax(log_w, dim=0)
        mixture = _refit(mixture, x[elite], w, config)
        logger.debug('%s: cross-entropy iteration %d at violation %.6g', problem.name, iteration + 1, threshold)

    x = mixture.sample(config.final_samples, generator)
    log_w = standard_normal_log_prob(x) - mixture.log_prob(x)
    inside = problem.membership(problem.evaluate(x))
    terms = torch.where(inside, torch.exp(log_w), torch.zeros_like(log_w))
    total = float(torch.sum(terms))
    weights = WeightStatistics(
        max_weight_share=float(torch.max(terms)) / total if total > 0 else None,
        effective_sample_size=total ** 2 / float(torch.sum(torch.square(terms))) if total > 0 else 0.0,
        min_log_weight=float(torch.min(log_w)),
        max_log_weight=float(torch.max(log_w)))
    n = config.final_samples
    return EstimateReport(p_est=float(torch.mean(terms)), calls=config.budget, method='ais',
                          std_error=float(torch.std(terms)) / math.sqrt(n) if n > 1 else None,
                          hits=int(torch.sum(inside)), n_is=n, weights=weights,
                          details={'thresholds': thresholds, 'mixture_weights': mixture.weights.tolist()})
