"""Experiment orchestration: reference probabilities, error metric, repeated trials and density grids."""
import json
import logging
import math
import os
import statistics
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import more_itertools
import numpy as np
import torch

from nofis.baselines import ESTIMATORS
from nofis.errors import BudgetExceededError, InvalidArgumentError, NofisError, UnsupportedModeError
from nofis.flow import FlowModel, flow_logdensity
from nofis.importance_sampling import run_nofis
from nofis.problem import Bound, GoldenValue, RareEventProblem, ThresholdSchedule
from nofis.problems import make_problem
from nofis.report import EstimateReport
from nofis.utils import derive_seed, dump_json, make_generator, standard_normal_log_prob, standard_normal_sample

logger = logging.getLogger(__name__)

dtype = torch.float64

LOG_FLOOR = 1e-20
GOLDEN_MODES = ('paper', 'analytic', 'quadrature2d', 'mc')
DEFAULT_MC_ORACLE_N = 10_000_000
QUADRATURE_STEP = 0.002
_ORACLE_BATCH = 1_000_000
ORACLE_SEED = 20240521


def log_error(p_est, p_golden):
    """|log10 max(p_est, 1e-20) - log10 p_golden|"""
    if not p_golden > 0:
        raise InvalidArgumentError('golden probability must be positive, got {}'.format(p_golden))
    if p_est < 0:
        raise InvalidArgumentError('estimate must be nonnegative, got {}'.format(p_est))
    return abs(math.log10(max(p_est, LOG_FLOOR)) - math.log10(p_golden))


def _quadrature(problem: RareEventProblem, step=QUADRATURE_STEP):
    """Midpoint rule for P[Omega] over the problem's bounding boxes (or [-8, 8]^2)."""
    if problem.dim != 2:
        raise UnsupportedModeError('quadrature needs a 2-D problem, {} has dimension {}'
                                   .format(problem.name, problem.dim))
    boxes = problem.quadrature_boxes() if hasattr(problem, 'quadrature_boxes') else [(-8.0, 8.0, -8.0, 8.0)]
    total = 0.0
    for xmin, xmax, ymin, ymax in boxes:
        nx, ny = math.ceil((xmax - xmin) / step), math.ceil((ymax - ymin) / step)
        hx, hy = (xmax - xmin) / nx, (ymax - ymin) / ny
        xs = xmin + hx * (torch.arange(nx, dtype=dtype) + 0.5)
        ys = ymin + hy * (torch.arange(ny, dtype=dtype) + 0.5)
        rows_per_chunk = max(1, _ORACLE_BATCH // ny)
        for rows in more_itertools.chunked(range(nx), rows_per_chunk):
            gx, gy = torch.meshgrid(xs[rows[0]:rows[-1] + 1], ys, indexing='ij')
            points = torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=1)
            with torch.no_grad():
                inside = problem.bound.contains(problem.g_function(points))
            density = torch.exp(standard_normal_log_prob(points))
            total += float(torch.sum(torch.where(inside, density, torch.zeros_like(density)))) * hx * hy
    return total


def _monte_carlo(problem: RareEventProblem, n, generator):
    hits = 0
    for batch in more_itertools.chunked(range(n), _ORACLE_BATCH):
        x = standard_normal_sample(len(batch), problem.dim, generator)
        with torch.no_grad():
            hits += int(torch.sum(problem.bound.contains(problem.g_function(x))))
    p = hits / n
    return p, math.sqrt(p * (1 - p) / n)


class GoldenCache:
    """JSON file of reference probabilities keyed by 'problem|mode|n'."""
    def __init__(self, path):
        self.path = path
        self._lock = threading.Lock()
        self._entries = {}
        if path is not None and os.path.exists(path):
            with open(path) as file:
                self._entries = json.load(file)

    @staticmethod
    def key(problem_name, mode, n=None):
        return '{}|{}|{}'.format(problem_name, mode, '' if n is None else n)

    def get(self, key) -> Optional[GoldenValue]:
        with self._lock:
            entry = self._entries.get(key)
        return None if entry is None else GoldenValue(entry['value'], entry['provenance'], entry.get('std_error'))

    def put(self, key, golden: GoldenValue):
        with self._lock:
            self._entries[key] = {'value': golden.value, 'provenance': golden.provenance,
                                  'std_error': golden.std_error}
            if self.path is not None:
                dump_json(self._entries, self.path)


def golden_oracle(problem: RareEventProblem, mode='paper', *, n=None, generator=None, cache: GoldenCache = None,
                  step=QUADRATURE_STEP) -> GoldenValue:
    """Reference probability of `problem` with its provenance.

    Oracle evaluations of g bypass the call counter. Without a `generator`, the 'mc' oracle draws
    from a stream seeded by ORACLE_SEED and n. An 'mc' value that disagrees with the
    tabulated one by more than three standard errors is logged and used instead.
    """
    if mode not in GOLDEN_MODES:
        raise UnsupportedModeError('golden mode must be one of {}, got {!r}'.format(GOLDEN_MODES, mode))
    if mode == 'mc' and n is None:
        n = DEFAULT_MC_ORACLE_N
    key = GoldenCache.key(problem.name, mode, n if mode == 'mc' else None)
    if cache is not None:
        cached = cache.get(key)
        if cached is not None:
            return cached

    if mode == 'paper':
        if problem.golden is None:
            raise UnsupportedModeError('no tabulated reference for {}'.format(problem.name))
        golden = problem.golden
    elif mode == 'analytic':
        if not hasattr(problem, 'analytic_probability'):
            raise UnsupportedModeError('{} has no closed-form probability'.format(problem.name))
        golden = GoldenValue(problem.analytic_probability(), 'analytic')
    elif mode == 'quadrature2d':
        golden = GoldenValue(_quadrature(problem, step), 'quadrature2d')
    else:
        if generator is None:
            generator = make_generator(derive_seed(ORACLE_SEED, n))
        value, std_error = _monte_carlo(problem, n, generator)
        golden = GoldenValue(value, 'mc({})'.format(n), std_error)
        table = problem.golden
        if table is not None and table.provenance == 'paper-table' and abs(value - table.value) > 3 * std_error:
            logger.warning('%s: Monte Carlo reference %.4g differs from the tabulated %.4g by more than '
                           '3 standard errors, using the Monte Carlo value', problem.name, value, table.value)
    if cache is not None:
        cache.put(key, golden)
    return golden


@dataclass
class MethodSpec:
    """A named estimator with its configuration; NOFIS also carries its schedule."""
    name: str
    config: object
    schedule: Optional[Sequence] = None
    pilot_n: int = 1000

    def __post_init__(self):
        if self.name != 'nofis' and self.name not in ESTIMATORS:
            raise InvalidArgumentError('unknown method {!r}'.format(self.name))

    def budget(self, problem: RareEventProblem = None):
        """Largest number of counted calls one trial may spend.

        On a finite-difference `problem` every NOFIS training sample also pays 2 * dim gradient calls.
        """
        if self.name == 'nofis':
            training_calls = self.config.training_calls
            if problem is not None and problem.gradient_mode == 'finite_difference':
                training_calls *= 1 + 2 * problem.dim
            return training_calls + self.config.n_is + (self.pilot_n if self.schedule is None else 0)
        if self.name == 'mc':
            return self.config.n
        if self.name == 'sus':
            return self.config.calls(self.config.max_levels)
        if self.name == 'sss':
            return self.config.samples_per_scale * len(self.config.scales)
        return self.config.budget

    def run(self, problem: RareEventProblem, generator, checkpoint_path=None) -> EstimateReport:
        if self.name == 'nofis':
            schedule = None
            if self.schedule is not None:
                schedule = ThresholdSchedule.from_values(self.schedule, problem.bound)
            report, _ = run_nofis(problem, self.config, schedule, pilot_n=self.pilot_n, generator=generator,
                                  checkpoint_path=checkpoint_path)
            return report
        _, estimate = ESTIMATORS[self.name]
        return estimate(problem, self.config, generator)


@dataclass
class TrialResult:
    method: str
    problem: str
    seed: int
    p_est: Optional[float]
    calls: int
    log_error: Optional[float]
    wall_time: float = field(compare=False)
    error: Optional[str] = None
    report: Optional[EstimateReport] = None

    @property
    def ok(self):
        return self.error is None


@dataclass
class AggregateReport:
    method: str
    problem: str
    golden: GoldenValue
    trials: List[TrialResult]
    trial_count: int = 0
    failures: int = 0
    mean_log_error: Optional[float] = None
    median_log_error: Optional[float] = None
    std_log_error: Optional[float] = None
    mean_calls: Optional[float] = None

    def __post_init__(self):
        if not self.trials:
            raise InvalidArgumentError('an aggregate needs at least one trial')
        self.recompute()

    def recompute(self):
        good = [t for t in self.trials if t.ok]
        errors = [t.log_error for t in good]
        self.trial_count = len(self.trials)
        self.failures = self.trial_count - len(good)
        self.mean_log_error = statistics.fmean(errors) if errors else None
        self.median_log_error = statistics.median(errors) if errors else None
        self.std_log_error = statistics.pstdev(errors) if errors else None
        self.mean_calls = statistics.fmean(t.calls for t in good) if good else None
        return self


def _run_one(spec: MethodSpec, problem_factory, index, base_seed, golden, checkpoint_dir):
    seed = derive_seed(base_seed, index)
    generator = make_generator(seed)
    problem = problem_factory()
    checkpoint_path = None
    if checkpoint_dir is not None and spec.name == 'nofis':
        checkpoint_path = os.path.join(checkpoint_dir, '{}_{}_trial{}.ckpt'.format(problem.name, spec.name, index))
    start = time.perf_counter()
    try:
        report = spec.run(problem, generator, checkpoint_path)
        budget = spec.budget(problem)
        if problem.calls > budget:
            raise BudgetExceededError('{} spent {} calls, {} over its budget of {}'.format(
                spec.name, problem.calls, problem.calls - budget, budget), overage=problem.calls - budget)
    except NofisError as e:
        logger.warning('%s trial %d on %s failed: %s', spec.name, index, problem.name, e)
        return TrialResult(spec.name, problem.name, seed, None, problem.calls, None,
                           time.perf_counter() - start, error='{}: {}'.format(type(e).__name__, e))
    return TrialResult(spec.name, problem.name, seed, report.p_est, problem.calls,
                       log_error(report.p_est, golden.value), time.perf_counter() - start, report=report)


def run_trials(spec: MethodSpec, problem: Union[str, Callable[[], RareEventProblem]], repeats, base_seed,
               golden: GoldenValue, *, workers=1, checkpoint_dir=None) -> AggregateReport:
    """`repeats` independent trials, each with a fresh problem and a seed derived from base_seed.

    Failed trials are kept as rows with their error instead of aborting the batch.
    """
    if repeats < 1:
        raise InvalidArgumentError('repeats must be at least 1, got {}'.format(repeats))
    problem_factory = (lambda: make_problem(problem)) if isinstance(problem, str) else problem
    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)

    def trial(index):
        return _run_one(spec, problem_factory, index, base_seed, golden, checkpoint_dir)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trials = list(pool.map(trial, range(repeats)))
    else:
        trials = [trial(i) for i in range(repeats)]
    aggregate = AggregateReport(spec.name, trials[0].problem, golden, trials)
    logger.info('%s on %s: %d trials, %d failed, mean log10 error %s', spec.name, aggregate.problem,
                aggregate.trial_count, aggregate.failures,
                'n/a' if aggregate.mean_log_error is None else '{:.3f}'.format(aggregate.mean_log_error))
    return aggregate


@dataclass(frozen=True)
class Grid:
    xmin: float = -8.0
    xmax: float = 8.0
    ymin: float = -8.0
    ymax: float = 8.0
    steps: int = 200

    def __post_init__(self):
        if self.steps < 50:
            raise InvalidArgumentError('a heatmap needs at least 50 steps per axis, got {}'.format(self.steps))
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise InvalidArgumentError('empty grid [{}, {}] x [{}, {}]'.format(self.xmin, self.xmax, self.ymin, self.ymax))

    @property
    def cell_area(self):
        return (self.xmax - self.xmin) * (self.ymax - self.ymin) / (self.steps - 1) ** 2

    def points(self):
        xs = torch.linspace(self.xmin, self.xmax, self.steps, dtype=dtype)
        ys = torch.linspace(self.ymin, self.ymax, self.steps, dtype=dtype)
        gx, gy = torch.meshgrid(xs, ys, indexing='ij')
        return torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=1)


@dataclass
class Heatmap:
    grid: Grid
    points: torch.Tensor  # [steps^2, 2]
    density: torch.Tensor  # [steps^2]

    def total_mass(self):
        return float(torch.sum(self.density)) * self.grid.cell_area


def optimal_proposal(problem: RareEventProblem, golden: GoldenValue):
    """Density p(x) 1[x in Omega] / P[Omega], the zero-variance proposal. Uncounted."""
    def density(points):
        with torch.no_grad():
            inside = problem.bound.contains(problem.g_function(points))
        values = torch.exp(standard_normal_log_prob(points)) / golden.value
        return torch.where(inside, values, torch.zeros_like(values))
    return density


def heatmap(source: Union[FlowModel, Callable], grid: Grid = Grid(), *, upto=None) -> Heatmap:
    """Density of a 2-D flow (q after `upto` layers) or of a callable density on an inclusive grid."""
    points = grid.points()
    if isinstance(source, FlowModel):
        if source.dim != 2:
            raise UnsupportedModeError('heatmaps need a 2-D model, got dimension {}'.format(source.dim))
        density = torch.exp(flow_logdensity(source, points, upto))
    else:
        density = torch.as_tensor(source(points), dtype=dtype).reshape(-1)
    return Heatmap(grid, points, density)


def mass_inside(table: Heatmap, problem: RareEventProblem, level: Optional[Bound] = None):
    """Fraction of the grid mass lying in {g in level} (the problem's bound by default). Uncounted."""
    level = problem.bound if level is None else level
    with torch.no_grad():
        inside = level.contains(problem.g_function(table.points))
    total = float(torch.sum(table.density))
    return float(torch.sum(table.density[inside])) / total if total > 0 else 0.0


def write_heatmap_csv(table: Heatmap, path):
    rows = torch.cat([table.points, table.density.unsqueeze(1)], dim=1).numpy()
    np.savetxt(path, rows, delimiter=',', header='x,y,density', comments='', fmt='%.17g')


def write_report(path, config_echo, aggregates: Sequence[AggregateReport]):
    """Run report: config echo, one block per method with its golden value, aggregate and per-trial rows."""
    methods = []
    for aggregate in sorted(aggregates, key=lambda a: a.method):
        methods.append({
            'method': aggregate.method,
            'problem': aggregate.problem,
            'golden': aggregate.golden,
            'aggregate': {
                'trial_count': aggregate.trial_count,
                'failures': aggregate.failures,
                'mean_log_error': aggregate.mean_log_error,
                'median_log_error': aggregate.median_log_error,
                'std_log_error': aggregate.std_log_error,
                'mean_calls': aggregate.mean_calls,
            },
            'trials': aggregate.trials,
        })
    dump_json({'config': config_echo, 'methods': methods}, path)


def format_table(aggregates: Sequence[AggregateReport]):
    """calls / log error per method, one line each."""
    lines = ['{:<8} {:<12} {:>12} {:>10} {:>10} {:>8}'.format('method', 'problem', 'mean calls', 'mean err',
                                                              'median', 'failed')]
    for a in sorted(aggregates, key=lambda a: a.method):
        lines.append('{:<8} {:<12} {:>12} {:>10} {:>10} {:>8}'.format(
            a.method, a.problem, '-' if a.mean_calls is None else '{:.1f}'.format(a.mean_calls),
            '-' if a.mean_log_error is None else '{:.3f}'.format(a.mean_log_error),
            '-' if a.median_log_error is None else '{:.3f}'.format(a.median_log_error),
            '{}/{}'.format(a.failures, a.trial_count)))
    return '\n'.join(lines)
