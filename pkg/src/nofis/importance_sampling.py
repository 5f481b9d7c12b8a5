"""Importance-sampling estimate of P[Omega] with a trained flow as proposal, and the full NOFIS run."""
import logging
import math
import warnings
from typing import Optional

import torch

from nofis.errors import InvalidArgumentError, InvalidStateError, NumericalOverflowError
from nofis.flow import FlowModel, checkpoint_save, flow_forward
from nofis.problem import RareEventProblem, ThresholdSchedule, suggest_schedule
from nofis.report import EstimateReport, WeightStatistics
from nofis.training import TrainConfig, train
from nofis.utils import make_generator, standard_normal_log_prob, standard_normal_sample

logger = logging.getLogger(__name__)

dtype = torch.float64


def _doubling_points(n):
    points = []
    k = 1
    while k < n:
        points.append(k)
        k *= 2
    points.append(n)
    return points


def importance_estimate(model: FlowModel, problem: RareEventProblem, n_is, generator=None, *, upto=None):
    """Mean of 1[x in Omega] p(x) / q(x) over n_is samples of the flow.

    log q comes from the forward pass as log p(z0) - cum_logdet, so no inverse is needed. Spends
    exactly n_is counted calls.
    """
    if n_is < 1:
        raise InvalidArgumentError('n_is must be positive, got {}'.format(n_is))
    if model.dim != problem.dim:
        raise InvalidArgumentError('model dimension {} differs from problem dimension {}'
                                   .format(model.dim, problem.dim))
    z0 = standard_normal_sample(n_is, model.dim, generator)
    with torch.no_grad():
        x, cum_logdet, _ = flow_forward(model, z0, upto)
    log_w = standard_normal_log_prob(x) - (standard_normal_log_prob(z0) - cum_logdet)
    if not bool(torch.all(torch.isfinite(log_w))):
        raise NumericalOverflowError('non-finite importance weight')

    calls_before = problem.calls
    inside = problem.membership(problem.evaluate(x))
    terms = torch.where(inside, torch.exp(log_w), torch.zeros_like(log_w))
    hits = int(torch.sum(inside))

    p_est = float(torch.mean(terms))
    std_error = float(torch.std(terms) / math.sqrt(n_is)) if n_is > 1 else None
    total = float(torch.sum(terms))
    weights = WeightStatistics(
        max_weight_share=float(torch.max(terms)) / total if total > 0 else None,
        effective_sample_size=total ** 2 / float(torch.sum(torch.square(terms))) if total > 0 else 0.0,
        min_log_weight=float(torch.min(log_w)),
        max_log_weight=float(torch.max(log_w)))
    running_sum = torch.cumsum(terms, dim=0)
    running = [(n, float(running_sum[n - 1]) / n) for n in _doubling_points(n_is)]

    report = EstimateReport(p_est=p_est, calls=problem.calls - calls_before, method='nofis', std_error=std_error,
                            hits=hits, n_is=n_is, weights=weights, running_estimates=running)
    if hits == 0:
        message = 'no importance sample out of {} hit the event, the estimate is 0'.format(n_is)
        warnings.warn(message, stacklevel=2)
        report.warnings.append(message)
    return report


def build_model(problem: RareEventProblem, config: TrainConfig, generator=None) -> FlowModel:
    return FlowModel(problem.dim, config.steps, config.layers_per_step, config.hidden, config.scale_clamp,
                     generator=generator)


def run_nofis(problem: RareEventProblem, config: TrainConfig, schedule: Optional[ThresholdSchedule] = None, *,
              pilot_n=1000, generator=None, checkpoint_path=None):
    """Schedule, model, staged training and the final estimate, in one call.

    Without an explicit `schedule`, levels come from `suggest_schedule` and its pilot calls are
    reported separately as `pilot_calls`.
    :return: the EstimateReport and the trained model
    """
    generator = make_generator(config.seed) if generator is None else generator
    start = problem.calls
    if schedule is None:
        schedule = suggest_schedule(problem, config.steps, pilot_n, generator)
        logger.info('suggested schedule: %s', [level.to_list() for level in schedule])
    pilot_calls = problem.calls - start

    model = build_model(problem, config, generator)
    model, diagnostics = train(model, problem, schedule, config, generator)
    training_calls = problem.calls - start - pilot_calls
    if problem.gradient_mode == 'analytic' and training_calls != config.training_calls:
        raise InvalidStateError('training spent {} calls, expected M * E * N = {}'
                                .format(training_calls, config.training_calls))
    if checkpoint_path is not None:
        checkpoint_save(model, checkpoint_path)

    report = importance_estimate(model, problem, config.n_is, generator)
    report.training_calls = training_calls
    report.pilot_calls = pilot_calls
    report.calls = problem.calls - start
    report.steps = diagnostics
    report.schedule = [level.to_list() for level in schedule]
    logger.info('%s: P_est = %.4g (%d hits of %d) with %d calls', problem.name, report.p_est, report.hits,
                report.n_is, report.calls)
    return report, model
