"""JSON run configurations, validated in full before any problem is evaluated.

Example::

    {
      "problem": "leaf",
      "method": "nofis",
      "nofis": { "steps": 4, "epochs": 20, "batch_size": 400, "n_is": 50 },
      "schedule": [15, 8, 3, 0],
      "golden": { "mode": "paper" },
      "repeats": 10,
      "seed": 0
    }
"""
import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Optional, Tuple

from nofis.baselines import AisConfig, McConfig, SssConfig, SusConfig
from nofis.errors import CatalogError, ConfigError, NofisError, ScheduleError
from nofis.harness import GOLDEN_MODES, MethodSpec
from nofis.problem import ThresholdSchedule
from nofis.problems import make_problem
from nofis.training import TrainConfig
from nofis.utils import to_jsonable

METHODS = ('nofis', 'mc', 'sus', 'sss', 'ais')
METHOD_CONFIGS = {'nofis': TrainConfig, 'mc': McConfig, 'sus': SusConfig, 'sss': SssConfig, 'ais': AisConfig}
OUTPUT_DIR_ENV = 'NOFIS_OUTPUT_DIR'

_TOP_LEVEL_KEYS = {'problem', 'problem_options', 'method', 'methods', 'schedule', 'golden', 'repeats', 'seed',
                   'output_dir', 'checkpoint', 'workers', *METHODS}


@dataclass(frozen=True)
class ScheduleSpec:
    """Explicit thresholds, or None with a pilot size for the suggested schedule."""
    values: Optional[tuple] = None
    pilot_n: int = 1000

    @property
    def auto(self):
        return self.values is None


@dataclass(frozen=True)
class GoldenSpec:
    mode: str = 'paper'
    n: Optional[int] = None


@dataclass(frozen=True)
class RunConfig:
    problem: str
    methods: Tuple[str, ...]
    method_configs: dict = field(default_factory=dict)
    problem_options: dict = field(default_factory=dict)
    schedule: ScheduleSpec = ScheduleSpec()
    golden: GoldenSpec = GoldenSpec()
    repeats: int = 1
    seed: int = 0
    output_dir: Optional[str] = None
    checkpoint: bool = False
    workers: int = 1

    @classmethod
    def from_file(cls, path) -> 'RunConfig':
        with open(path) as file:
            try:
                raw = json.load(file)
            except json.JSONDecodeError as e:
                raise ConfigError('', '{} is not valid JSON: {}'.format(path, e)) from e
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw) -> 'RunConfig':
        if not isinstance(raw, dict):
            raise ConfigError('', 'a run config must be a JSON object')
        unknown = sorted(set(raw) - _TOP_LEVEL_KEYS)
        if unknown:
            raise ConfigError(unknown[0], 'unknown key')

        problem = _require(raw, 'problem', str)
        problem_options = raw.get('problem_options', {})
        if not isinstance(problem_options, dict):
            raise ConfigError('problem_options', 'expected an object')
        try:
            bound = make_problem(problem, **problem_options).bound
        except CatalogError as e:
            raise ConfigError('problem', str(e)) from None
        except (TypeError, NofisError) as e:
            raise ConfigError('problem_options', str(e)) from None

        methods = _methods(raw)
        schedule = _schedule(raw.get('schedule', {'auto': {}}), bound)
        method_configs = {}
        for method in methods:
            block = dict(raw.get(method, {}))
            if method == 'nofis' and 'steps' not in block and not schedule.auto:
                block['steps'] = len(schedule.values)
            method_configs[method] = _build(METHOD_CONFIGS[method], block, method)
        if 'nofis' in methods and not schedule.auto and len(schedule.values) != method_configs['nofis'].steps:
            raise ConfigError('schedule', 'has {} levels but nofis.steps is {}'
                              .format(len(schedule.values), method_configs['nofis'].steps))

        config = cls(problem=problem, methods=methods, method_configs=method_configs,
                     problem_options=dict(problem_options), schedule=schedule, golden=_golden(raw.get('golden', {})),
                     repeats=_positive_int(raw, 'repeats', 1), seed=_int(raw, 'seed', 0),
                     output_dir=raw.get('output_dir'), checkpoint=bool(raw.get('checkpoint', False)),
                     workers=_positive_int(raw, 'workers', 1))
        if config.output_dir is not None and not isinstance(config.output_dir, str):
            raise ConfigError('output_dir', 'expected a string')
        return config

    def replace(self, **changes) -> 'RunConfig':
        return dataclasses.replace(self, **changes)

    def resolved_output_dir(self):
        return self.output_dir or os.environ.get(OUTPUT_DIR_ENV) or 'nofis_output'

    def method_spec(self, method) -> MethodSpec:
        return MethodSpec(method, self.method_configs[method], self.schedule.values, self.schedule.pilot_n)

    def make_problem(self):
        return make_problem(self.problem, **self.problem_options)

    def to_dict(self):
        """Config echo for reports; from_dict(to_dict()) rebuilds an equal config."""
        echo = {'problem': self.problem, 'problem_options': dict(self.problem_options), 'methods': list(self.methods)}
        for method, block in self.method_configs.items():
            echo[method] = to_jsonable(block)
        echo['schedule'] = {'auto': {'pilot_n': self.schedule.pilot_n}} if self.schedule.auto \
            else [list(v) if isinstance(v, tuple) else v for v in self.schedule.values]
        golden = {'mode': self.golden.mode}
        if self.golden.n is not None:
            golden['n'] = self.golden.n
        echo.update(golden=golden, repeats=self.repeats, seed=self.seed, output_dir=self.output_dir,
                    checkpoint=self.checkpoint, workers=self.workers)
        return echo


def _require(raw, key, kind):
    if key not in raw:
        raise ConfigError(key, 'missing required field')
    if not isinstance(raw[key], kind):
        raise ConfigError(key, 'expected {}, got {!r}'.format(kind.__name__, raw[key]))
    return raw[key]


def _int(raw, key, default, path=None):
    value = raw.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(path or key, 'expected an integer, got {!r}'.format(value))
    return value


def _positive_int(raw, key, default, path=None):
    value = _int(raw, key, default, path)
    if value < 1:
        raise ConfigError(path or key, 'must be at least 1, got {}'.format(value))
    return value


def _methods(raw):
    if 'method' in raw and 'methods' in raw:
        raise ConfigError('methods', 'give either method or methods, not both')
    if 'method' in raw:
        methods = [_require(raw, 'method', str)]
    else:
        methods = raw.get('methods', ['nofis'])
        if not isinstance(methods, list) or not methods or not all(isinstance(m, str) for m in methods):
            raise ConfigError('methods', 'expected a non-empty list of method names')
    for i, method in enumerate(methods):
        if method not in METHODS:
            raise ConfigError('methods[{}]'.format(i) if 'methods' in raw else 'method',
                              'unknown method {!r}, expected one of {}'.format(method, list(METHODS)))
    for method in METHODS:
        if method in raw and method not in methods:
            raise ConfigError(method, 'configuration block for a method that is not run')
    return tuple(methods)


def _schedule(raw, bound) -> ScheduleSpec:
    if isinstance(raw, dict):
        if set(raw) != {'auto'} or not isinstance(raw['auto'], dict) or set(raw['auto']) - {'pilot_n'}:
            raise ConfigError('schedule', 'expected a list of thresholds or {"auto": {"pilot_n": n}}')
        pilot_n = _int(raw['auto'], 'pilot_n', 1000, 'schedule.auto.pilot_n')
        if pilot_n < 1000:
            raise ConfigError('schedule.auto.pilot_n', 'must be at least 1000, got {}'.format(pilot_n))
        return ScheduleSpec(None, pilot_n)
    if not isinstance(raw, list) or not raw:
        raise ConfigError('schedule', 'expected a non-empty list of thresholds')
    values = tuple(tuple(v) if isinstance(v, list) else v for v in raw)
    try:
        ThresholdSchedule.from_values(values, bound)
    except (ScheduleError, NofisError, TypeError, ValueError) as e:
        raise ConfigError('schedule', str(e)) from None
    return ScheduleSpec(values)


def _golden(raw) -> GoldenSpec:
    if not isinstance(raw, dict) or set(raw) - {'mode', 'n'}:
        raise ConfigError('golden', 'expected {"mode": ..., "n": ...}')
    mode = raw.get('mode', 'paper')
    if mode not in GOLDEN_MODES:
        raise ConfigError('golden.mode', 'unknown mode {!r}, expected one of {}'.format(mode, list(GOLDEN_MODES)))
    n = raw.get('n')
    if n is not None:
        n = _positive_int(raw, 'n', None, 'golden.n')
    return GoldenSpec(mode, n)


def _build(config_cls, block, path):
    """Instantiates a method config dataclass, mapping every failure to a dotted field path."""
    if not isinstance(block, dict):
        raise ConfigError(path, 'expected an object')
    names = {f.name: f for f in dataclasses.fields(config_cls)}
    for key, value in block.items():
        if key not in names:
            raise ConfigError('{}.{}'.format(path, key), 'unknown key')
        expected = names[key].type
        if expected in (int, 'int') and (isinstance(value, bool) or not isinstance(value, int)):
            raise ConfigError('{}.{}'.format(path, key), 'expected an integer, got {!r}'.format(value))
        if expected in (float, 'float') and (isinstance(value, bool) or not isinstance(value, (int, float))):
            raise ConfigError('{}.{}'.format(path, key), 'expected a number, got {!r}'.format(value))
        if expected in (bool, 'bool') and not isinstance(value, bool):
            raise ConfigError('{}.{}'.format(path, key), 'expected true or false, got {!r}'.format(value))
        if expected in (tuple, 'tuple') and not isinstance(value, list):
            raise ConfigError('{}.{}'.format(path, key), 'expected a list, got {!r}'.format(value))
    try:
        return config_cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in block.items()})
    except TypeError as e:
        raise ConfigError(path, str(e)) from None
    except NofisError as e:
        # messages start with the offending field name
        first = str(e).split(' ', 1)[0]
        raise ConfigError('{}.{}'.format(path, first) if first in names else path, str(e)) from None
