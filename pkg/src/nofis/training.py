"""Staged KL training of a coupling flow towards tempered versions of the rare event.

Step m trains layers (m-1)K+1 ... mK so that q_mK approaches

    p_m(x) ∝ p(x) exp(min(τ (u_m - g(x)), τ (g(x) - l_m), 0)),

a smoothed restriction of the base density to the m-th level of the threshold schedule.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import torch

from nofis.diffcore import DEFAULT_LR, GradientBundle, make_optimizer_state, optimizer_step
from nofis.errors import InvalidArgumentError, NumericalOverflowError, TrainingDivergenceError
from nofis.flow import DEFAULT_HIDDEN, DEFAULT_LAYERS_PER_STEP, DEFAULT_SCALE_CLAMP, FlowModel, flow_forward
from nofis.problem import Bound, RareEventProblem, ThresholdSchedule
from nofis.utils import as_batch, standard_normal_log_prob, standard_normal_sample

logger = logging.getLogger(__name__)

dtype = torch.float64

OBJECTIVES = ('staged', 'terminal', 'mean')
LOSSES = ('reverse', 'forward')


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters of one NOFIS run.

    steps (M), layers_per_step (K), epochs (E) and batch_size (N) fix the training cost at
    M * E * N counted calls; n_is more calls are spent by the final estimate.
    """
    steps: int
    layers_per_step: int = DEFAULT_LAYERS_PER_STEP
    epochs: int = 20
    batch_size: int = 400
    temperature: float = 10.0
    n_is: int = 50
    freeze: bool = True
    learning_rate: float = DEFAULT_LR
    seed: int = 0
    objective: str = 'staged'
    loss: str = 'reverse'
    hidden: tuple = DEFAULT_HIDDEN
    scale_clamp: float = DEFAULT_SCALE_CLAMP

    def __post_init__(self):
        for name in ('steps', 'layers_per_step', 'epochs', 'batch_size', 'n_is'):
            if getattr(self, name) < 1:
                raise InvalidArgumentError('{} must be at least 1, got {}'.format(name, getattr(self, name)))
        if not self.temperature > 0:
            raise InvalidArgumentError('temperature must be positive, got {}'.format(self.temperature))
        if not self.learning_rate > 0:
            raise InvalidArgumentError('learning_rate must be positive, got {}'.format(self.learning_rate))
        if self.objective not in OBJECTIVES:
            raise InvalidArgumentError('objective must be one of {}, got {!r}'.format(OBJECTIVES, self.objective))
        if self.loss not in LOSSES:
            raise InvalidArgumentError('loss must be one of {}, got {!r}'.format(LOSSES, self.loss))
        if any(h < 1 for h in self.hidden):
            raise InvalidArgumentError('hidden sizes must be positive, got {}'.format(list(self.hidden)))
        object.__setattr__(self, 'hidden', tuple(self.hidden))

    @property
    def training_calls(self):
        return self.steps * self.epochs * self.batch_size


@dataclass
class StepDiagnostics:
    """Per-epoch training trace of one anchor."""
    step: int
    level: list
    losses: List[float] = field(default_factory=list)
    hit_fractions: List[float] = field(default_factory=list)
    mean_g: List[float] = field(default_factory=list)

    def record(self, evaluation: 'LossEvaluation'):
        self.losses.append(evaluation.loss)
        self.hit_fractions.append(evaluation.hit_fraction)
        self.mean_g.append(evaluation.mean_g)


@dataclass
class LossEvaluation:
    loss: float
    # loss + mean log p(z0): the empirical KL divergence including its constant term
    kl_estimate: float
    hit_fraction: float
    mean_g: float
    gradients: GradientBundle = field(repr=False, metadata={'serialize': False})


def tempered_exponent(level: Bound, temperature, gval):
    """min(τ (u - g), τ (g - l), 0), with a zero subgradient on the boundary."""
    if not temperature > 0:
        raise InvalidArgumentError('temperature must be positive, got {}'.format(temperature))
    exponent = -temperature * level.violation(gval)
    # NaN g values stay NaN so that training reports them as a divergence
    return torch.where(exponent >= 0, torch.zeros_like(exponent), exponent)


def tempered_logdensity(problem: RareEventProblem, level: Bound, temperature, x, gval):
    """Unnormalized log p_m(x) for a level of `problem`; gval = g(x) is not re-evaluated."""
    x = as_batch(x)
    gval = torch.as_tensor(gval, dtype=dtype)
    return tempered_exponent(level, temperature, gval) + standard_normal_log_prob(x)


def _layer_parameters(model: FlowModel, first, last):
    """Named parameters of layers first+1 ... last."""
    prefixes = tuple('layers.{}.'.format(i) for i in range(first, last))
    return [(name, p) for name, p in model.named_parameters() if name.startswith(prefixes)]


def _trainable_range(model: FlowModel, m, freeze):
    return (model.anchor(m - 1) if freeze else 0), model.anchor(m)


def _push(model, z0, m, freeze):
    """z_mK and the cumulative log-determinant, tracking gradients only for trainable layers."""
    first, upto = _trainable_range(model, m, freeze)
    try:
        with torch.no_grad():
            z_frozen, logdet_frozen, _ = flow_forward(model, z0, first)
        with torch.enable_grad():
            z, logdet, _ = flow_forward(model, z_frozen, upto, start=first)
    except NumericalOverflowError as e:
        raise TrainingDivergenceError('flow overflow in layer {} during step {}'.format(e.layer_index, m),
                                      step=m) from e
    return z, logdet_frozen + logdet


def _level_statistics(level, gval):
    gval = gval.detach()
    return float(torch.mean(level.contains(gval).to(dtype))), float(torch.mean(gval))


def _reverse_objective(model, m, problem, level, temperature, z0, freeze):
    """The differentiable reverse-KL loss, its KL estimate and batch statistics."""
    with torch.enable_grad():
        z, cum_logdet = _push(model, z0, m, freeze)
        gval = problem.evaluate_differentiable(z)
        objective = -torch.mean(cum_logdet) - torch.mean(tempered_logdensity(problem, level, temperature, z, gval))
    kl = objective.item() + torch.mean(standard_normal_log_prob(z0)).item()
    return objective, kl, _level_statistics(level, gval)


def _forward_objective(model, m, problem, level, temperature, z0, freeze):
    """Self-normalized reweighting of D[p_m || q_mK] with samples from q_mK.

    The value is sum_n w~_n log w_n - log mean w; the gradient follows sum_n w~_n log w_n with the
    normalized weights w~ held fixed.
    """
    with torch.enable_grad():
        z, cum_logdet = _push(model, z0, m, freeze)
        gval = problem.evaluate_differentiable(z)
        log_q = standard_normal_log_prob(z0) - cum_logdet
        log_w = tempered_logdensity(problem, level, temperature, z, gval) - log_q
        normalized = torch.softmax(log_w.detach(), dim=0)
        surrogate = torch.sum(normalized * log_w)
    n = log_w.shape[0]
    value = surrogate.item() - (torch.logsumexp(log_w.detach(), dim=0).item() - math.log(n))
    return surrogate, value, _level_statistics(level, gval)


_OBJECTIVE_FUNCTIONS = {'reverse': _reverse_objective, 'forward': _forward_objective}


def _evaluate_loss(kind, model, m, problem, schedule, temperature, z0, freeze):
    if not temperature > 0:
        raise InvalidArgumentError('temperature must be positive, got {}'.format(temperature))
    if not 1 <= m <= min(model.steps, len(schedule)):
        raise InvalidArgumentError('step must lie in [1, {}], got {}'.format(min(model.steps, len(schedule)), m))
    level = schedule[m - 1]
    objective, value, (hit_fraction, mean_g) = _OBJECTIVE_FUNCTIONS[kind](
        model, m, problem, level, temperature, z0, freeze)
    if not math.isfinite(objective.item()):
        raise TrainingDivergenceError('non-finite {} KL loss in step {}'.format(kind, m), step=m)

    first, upto = _trainable_range(model, m, freeze)
    trainable = _layer_parameters(model, first, upto)
    grads = torch.autograd.grad(objective, [p for _, p in trainable], allow_unused=True)
    gradients = GradientBundle.zeros_like(model)
    gradients.update(GradientBundle.from_grads(trainable, grads))
    loss = objective.item() if kind == 'reverse' else value
    return LossEvaluation(loss=loss, kl_estimate=value, hit_fraction=hit_fraction, mean_g=mean_g, gradients=gradients)


def reverse_kl_loss(model: FlowModel, m, problem: RareEventProblem, schedule: ThresholdSchedule, temperature,
                    z0: torch.Tensor, *, freeze=True) -> LossEvaluation:
    """-mean log|det J_{1:mK}| - mean log p_m(z_mK) on a base batch z0, with gradients.

    Spends len(z0) counted calls. With `freeze`, only layers of step m receive nonzero gradients.
    """
    return _evaluate_loss('reverse', model, m, problem, schedule, temperature, z0, freeze)


def forward_kl_loss(model: FlowModel, m, problem: RareEventProblem, schedule: ThresholdSchedule, temperature,
                    z0: torch.Tensor, *, freeze=True) -> LossEvaluation:
    return _evaluate_loss('forward', model, m, problem, schedule, temperature, z0, freeze)


def _select(gradients: GradientBundle, named_params):
    return GradientBundle((name, gradients[name]) for name, _ in named_params)


def _mean_evaluation(config, model, problem, schedule, z0):
    """Loss averaged over all anchors, every anchor paying its own N calls."""
    loss_fn = _OBJECTIVE_FUNCTIONS[config.loss]
    objectives, evaluations = [], []
    for m in range(1, config.steps + 1):
        level = schedule[m - 1]
        objective, value, (hit_fraction, mean_g) = loss_fn(model, m, problem, level, config.temperature, z0, False)
        if not math.isfinite(objective.item()):
            raise TrainingDivergenceError('non-finite {} KL loss at anchor {}'.format(config.loss, m), step=m)
        objectives.append(objective)
        loss = objective.item() if config.loss == 'reverse' else value
        evaluations.append(LossEvaluation(loss, value, hit_fraction, mean_g, None))
    total = torch.stack(objectives).mean()
    named = list(model.named_parameters())
    grads = torch.autograd.grad(total, [p for _, p in named], allow_unused=True)
    return GradientBundle.from_grads(named, grads), evaluations


def _run_epochs(config, model, problem, schedule, m, freeze, epochs, named_params, diagnostics, generator,
                all_diagnostics):
    state = make_optimizer_state([p for _, p in named_params], lr=config.learning_rate, modules=[model])
    params = [p for _, p in named_params]
    loss_fn = reverse_kl_loss if config.loss == 'reverse' else forward_kl_loss
    for epoch in range(epochs):
        z0 = standard_normal_sample(config.batch_size, model.dim, generator)
        try:
            evaluation = loss_fn(model, m, problem, schedule, config.temperature, z0, freeze=freeze)
            optimizer_step(params, _select(evaluation.gradients, named_params), state)
        except TrainingDivergenceError as e:
            raise TrainingDivergenceError(str(e), step=m, epoch=epoch, optimizer_step=state.step_count,
                                          diagnostics=all_diagnostics) from e
        diagnostics.record(evaluation)
        logger.debug('step %d epoch %d: loss %.6g, hit fraction %.3f, mean g %.6g',
                     m, epoch, evaluation.loss, evaluation.hit_fraction, evaluation.mean_g)


def train(model: FlowModel, problem: RareEventProblem, schedule: ThresholdSchedule, config: TrainConfig,
          generator: Optional[torch.Generator] = None):
    """Trains `model` in place and returns it with one StepDiagnostics per anchor.

    The staged objective runs M steps of E epochs; each epoch draws a fresh batch of N base samples.
    """
    if len(schedule) != config.steps:
        raise InvalidArgumentError('schedule has {} levels but the config asks for {} steps'
                                   .format(len(schedule), config.steps))
    if model.steps != config.steps or model.layers_per_step != config.layers_per_step:
        raise InvalidArgumentError('model has {} x {} layers, config asks for {} x {}'.format(
            model.steps, model.layers_per_step, config.steps, config.layers_per_step))
    if model.dim != problem.dim:
        raise InvalidArgumentError('model dimension {} differs from problem dimension {}'
                                   .format(model.dim, problem.dim))

    diagnostics = []
    if config.objective == 'staged':
        for m in range(1, config.steps + 1):
            first, upto = _trainable_range(model, m, config.freeze)
            step = StepDiagnostics(m, schedule[m - 1].to_list())
            diagnostics.append(step)
            _run_epochs(config, model, problem, schedule, m, config.freeze, config.epochs,
                        _layer_parameters(model, first, upto), step, generator, diagnostics)
            logger.info('step %d/%d (level %s): loss %.6g -> %.6g, hit fraction %.3f',
                        m, config.steps, step.level, step.losses[0], step.losses[-1], step.hit_fractions[-1])
    elif config.objective == 'terminal':
        m = config.steps
        step = StepDiagnostics(m, schedule[m - 1].to_list())
        diagnostics.append(step)
        _run_epochs(config, model, problem, schedule, m, False, config.steps * config.epochs,
                    _layer_parameters(model, 0, model.num_layers), step, generator, diagnostics)
        logger.info('terminal objective: loss %.6g -> %.6g', step.losses[0], step.losses[-1])
    else:
        diagnostics.extend(StepDiagnostics(m, schedule[m - 1].to_list()) for m in range(1, config.steps + 1))
        named = list(model.named_parameters())
        state = make_optimizer_state([p for _, p in named], lr=config.learning_rate, modules=[model])
        for epoch in range(config.epochs):
            z0 = standard_normal_sample(config.batch_size, model.dim, generator)
            try:
                gradients, evaluations = _mean_evaluation(config, model, problem, schedule, z0)
                optimizer_step([p for _, p in named], gradients, state)
            except TrainingDivergenceError as e:
                raise TrainingDivergenceError(str(e), step=e.step, epoch=epoch, optimizer_step=state.step_count,
                                              diagnostics=diagnostics) from e
            for step, evaluation in zip(diagnostics, evaluations):
                step.record(evaluation)
        logger.info('mean objective: final losses %s', [round(step.losses[-1], 6) for step in diagnostics])
    return model, diagnostics


def temperature_lower_bound(problem: RareEventProblem, level: Bound, x_in, x_out, *, g_in=None, g_out=None):
    """Smallest τ for which p_m(x_in) >= p_m(x_out): log(p(x_out) / p(x_in)) / violation(g(x_out)).

    Costs one counted call per point whose g value is not supplied. Nonpositive bounds are reported as 0.
    """
    x_in, x_out = as_batch(x_in), as_batch(x_out)
    g_in = problem.evaluate(x_in) if g_in is None else torch.as_tensor(g_in, dtype=dtype).reshape(-1)
    g_out = problem.evaluate(x_out) if g_out is None else torch.as_tensor(g_out, dtype=dtype).reshape(-1)
    if not bool(torch.all(level.contains(g_in))):
        raise InvalidArgumentError('x_in must lie inside the level')
    excess = level.violation(g_out)
    if not bool(torch.all(excess > 0)):
        raise InvalidArgumentError('x_out must lie outside the level')
    ratio = standard_normal_log_prob(x_out) - standard_normal_log_prob(x_in)
    bound = torch.clamp(ratio / excess, min=0.0)
    return bound.item() if bound.numel() == 1 else bound


def temperature_lower_bound_sweep(problem: RareEventProblem, level: Bound, n_pairs, generator=None, *, pool_n=None):
    """Largest pairwise temperature bound over random inside/outside pairs of base samples.

    Spends pool_n (default 10 * n_pairs) counted calls.
    """
    if n_pairs < 1:
        raise InvalidArgumentError('n_pairs must be positive, got {}'.format(n_pairs))
    pool_n = 10 * n_pairs if pool_n is None else pool_n
    x = standard_normal_sample(pool_n, problem.dim, generator)
    gval = problem.evaluate(x)
    inside = level.contains(gval)
    if not bool(torch.any(inside)) or bool(torch.all(inside)):
        raise InvalidArgumentError('the pool of {} samples does not straddle the level'.format(pool_n))
    x_in, g_in = x[inside], gval[inside]
    x_out, g_out = x[~inside], gval[~inside]
    i = torch.randint(x_in.shape[0], (n_pairs,), generator=generator)
    j = torch.randint(x_out.shape[0], (n_pairs,), generator=generator)
    bounds = temperature_lower_bound(problem, level, x_in[i], x_out[j], g_in=g_in[i], g_out=g_out[j])
    return float(torch.max(torch.as_tensor(bounds)))
