"""Command-line front end: ``nofis run``, ``nofis compare`` and ``nofis visualize``.

Exit codes: 0 success, 1 config error, 2 runtime or convergence error, 3 I/O error.
"""
import argparse
import logging
import os
import sys

from nofis.config import METHODS, RunConfig
from nofis.errors import CheckpointFormatError, ConfigError, NofisError
from nofis.flow import checkpoint_load
from nofis.harness import (GoldenCache, Grid, format_table, golden_oracle, heatmap, run_trials, write_heatmap_csv,
                           write_report)
from nofis.utils import derive_seed, make_generator

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_IO = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='nofis', description='Rare-event probability estimation.')
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_true', help='log per-epoch progress')
    verbosity.add_argument('-q', '--quiet', action='store_true', help='log warnings only')
    commands = parser.add_subparsers(dest='command', required=True)

    for name, help_text in (('run', 'run one method for the configured number of trials'),
                            ('compare', 'run every configured method and print a combined table')):
        command = commands.add_parser(name, help=help_text)
        command.add_argument('--config', required=True, help='JSON run configuration')
        command.add_argument('--seed', type=int, help='override the base seed')
        command.add_argument('--out', help='output directory (default: config, then $NOFIS_OUTPUT_DIR)')
        command.add_argument('--repeats', type=int, help='override the number of trials')
        command.add_argument('--method', choices=METHODS, help='restrict the run to this method')

    visualize = commands.add_parser('visualize', help='tabulate the density of a 2-D checkpoint on a grid')
    visualize.add_argument('--checkpoint', required=True)
    visualize.add_argument('--xmin', type=float, default=Grid.xmin)
    visualize.add_argument('--xmax', type=float, default=Grid.xmax)
    visualize.add_argument('--ymin', type=float, default=Grid.ymin)
    visualize.add_argument('--ymax', type=float, default=Grid.ymax)
    visualize.add_argument('--steps', type=int, default=Grid.steps)
    visualize.add_argument('--upto', type=int,
                           help='use only the first UPTO layers (m * layers_per_step for the m-th anchor)')
    visualize.add_argument('--out', required=True, help='CSV file to write')
    return parser


def _load_config(args) -> RunConfig:
    config = RunConfig.from_file(args.config)
    changes = {}
    if args.seed is not None:
        changes['seed'] = args.seed
    if args.repeats is not None:
        if args.repeats < 1:
            raise ConfigError('repeats', 'must be at least 1, got {}'.format(args.repeats))
        changes['repeats'] = args.repeats
    if args.out is not None:
        changes['output_dir'] = args.out
    if args.method is not None:
        if args.method not in config.methods:
            raise ConfigError('method', '{!r} has no configuration block in {}'.format(args.method, args.config))
        changes['methods'] = (args.method,)
        changes['method_configs'] = {args.method: config.method_configs[args.method]}
    return config.replace(**changes) if changes else config


def _run_methods(config: RunConfig):
    out = config.resolved_output_dir()
    os.makedirs(out, exist_ok=True)
    problem = config.make_problem()
    cache = GoldenCache(os.path.join(out, 'golden_cache.json'))
    golden = golden_oracle(problem, config.golden.mode, n=config.golden.n,
                           generator=make_generator(derive_seed(config.seed, 2 ** 31)), cache=cache)
    logger.info('%s: golden probability %.4g (%s)', problem.name, golden.value, golden.provenance)

    checkpoint_dir = os.path.join(out, 'checkpoints') if config.checkpoint else None
    aggregates = []
    for method in config.methods:
        aggregates.append(run_trials(config.method_spec(method), config.make_problem, config.repeats, config.seed,
                                     golden, workers=config.workers, checkpoint_dir=checkpoint_dir))
    return out, aggregates


def cmd_run(args) -> int:
    config = _load_config(args)
    if len(config.methods) != 1:
        raise ConfigError('methods', 'run takes exactly one method, got {}; use compare or --method'
                          .format(list(config.methods)))
    out, aggregates = _run_methods(config)
    path = os.path.join(out, 'report_{}_{}.json'.format(config.problem, config.methods[0]))
    write_report(path, config.to_dict(), aggregates)
    print(format_table(aggregates))
    logger.info('report written to %s', path)
    return EXIT_RUNTIME if aggregates[0].failures else EXIT_OK


def cmd_compare(args) -> int:
    """Failed trials are recorded in the report; the command itself still succeeds."""
    config = _load_config(args)
    out, aggregates = _run_methods(config)
    path = os.path.join(out, 'report_{}_compare.json'.format(config.problem))
    write_report(path, config.to_dict(), aggregates)
    print(format_table(aggregates))
    logger.info('report written to %s', path)
    return EXIT_OK


def cmd_visualize(args) -> int:
    model = checkpoint_load(args.checkpoint)
    grid = Grid(args.xmin, args.xmax, args.ymin, args.ymax, args.steps)
    table = heatmap(model, grid, upto=args.upto)
    write_heatmap_csv(table, args.out)
    logger.info('heatmap of %d cells written to %s, total mass %.4f', len(table.density), args.out,
                table.total_mass())
    return EXIT_OK


COMMANDS = {'run': cmd_run, 'compare': cmd_compare, 'visualize': cmd_visualize}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        logger.error('invalid configuration: %s', e)
        return EXIT_CONFIG
    except (OSError, CheckpointFormatError) as e:
        logger.error('%s', e)
        return EXIT_IO
    except NofisError as e:
        logger.error('%s: %s', type(e).__name__, e)
        return EXIT_RUNTIME


if __name__ == '__main__':
    sys.exit(main())
