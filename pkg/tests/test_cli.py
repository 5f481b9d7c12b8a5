import contextlib
import io
import json
import os
import tempfile
import unittest

import numpy as np
from parameterized import parameterized

from nofis.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_RUNTIME, build_parser, main
from nofis.config import RunConfig
from nofis.flow import FlowModel, checkpoint_save

from test_config import CONFIG_DIR

SMOKE = os.path.join(CONFIG_DIR, 'halfspace_smoke.json')


def run_main(argv):
    stdout = io.StringIO()
    with contextlib.redirect_stdout(stdout):
        code = main(['-q'] + argv)
    return code, stdout.getvalue()


class TestCli(unittest.TestCase):

    def setUp(self) -> None:
        self.directory = tempfile.TemporaryDirectory()
        self.out = self.directory.name

    def tearDown(self) -> None:
        self.directory.cleanup()

    def write_config(self, raw, name='config.json'):
        path = os.path.join(self.out, name)
        with open(path, 'w') as file:
            json.dump(raw, file)
        return path

    def test_run(self):
        code, stdout = run_main(['run', '--config', SMOKE, '--method', 'mc', '--repeats', '2', '--out', self.out])
        self.assertEqual(code, EXIT_OK)
        with open(os.path.join(self.out, 'report_halfspace1d_mc.json')) as file:
            report = json.load(file)
        self.assertEqual(report['config']['methods'], ['mc'])
        self.assertEqual(report['methods'][0]['aggregate']['trial_count'], 2)
        self.assertTrue(stdout.splitlines()[1].startswith('mc'))
        self.assertTrue(os.path.exists(os.path.join(self.out, 'golden_cache.json')))

    def test_seed_override_changes_only_the_seed(self):
        raw = {'problem': 'halfspace1d', 'method': 'mc', 'mc': {'n': 1000}, 'golden': {'mode': 'analytic'}}
        path = self.write_config(raw)
        code, _ = run_main(['run', '--config', path, '--seed', '11', '--out', self.out])
        self.assertEqual(code, EXIT_OK)
        with open(os.path.join(self.out, 'report_halfspace1d_mc.json')) as file:
            echo = json.load(file)['config']
        expected = RunConfig.from_file(path).replace(seed=11, output_dir=self.out).to_dict()
        self.assertEqual(echo, json.loads(json.dumps(expected)))

    def test_compare(self):
        code, stdout = run_main(['compare', '--config', SMOKE, '--repeats', '1', '--out', self.out])
        self.assertEqual(code, EXIT_OK)
        with open(os.path.join(self.out, 'report_halfspace1d_compare.json')) as file:
            report = json.load(file)
        self.assertEqual([block['method'] for block in report['methods']], ['nofis', 'mc'])
        self.assertEqual(report['methods'][0]['trials'][0]['report']['calls'], 10 * 200 + 2000)
        self.assertEqual(len(stdout.splitlines()), 3)

    def test_run_needs_one_method(self):
        code, _ = run_main(['run', '--config', SMOKE, '--out', self.out])
        self.assertEqual(code, EXIT_CONFIG)

    def test_failed_trials(self):
        raw = {'problem': 'halfspace1d', 'problem_options': {'threshold': 30.0}, 'method': 'sss',
               'sss': {'samples_per_scale': 100}, 'golden': {'mode': 'analytic'}}
        code, _ = run_main(['run', '--config', self.write_config(raw), '--out', self.out])
        self.assertEqual(code, EXIT_RUNTIME)
        self.assertTrue(os.path.exists(os.path.join(self.out, 'report_halfspace1d_sss.json')))

    @parameterized.expand([
        ('temperature', {'problem': 'leaf', 'nofis': {'steps': 4, 'temperature': 0}, 'schedule': [15, 8, 3, 0]}),
        ('unknown_key', {'problem': 'leaf', 'budget': 1}),
    ])
    def test_config_errors(self, _, raw):
        code, _ = run_main(['run', '--config', self.write_config(raw), '--out', self.out])
        self.assertEqual(code, EXIT_CONFIG)
        self.assertFalse(os.path.exists(os.path.join(self.out, 'golden_cache.json')))

    @parameterized.expand([(['--repeats', '0'],), (['--method', 'sus'],)])
    def test_bad_overrides(self, extra):
        code, _ = run_main(['run', '--config', SMOKE, '--out', self.out] + extra)
        self.assertEqual(code, EXIT_CONFIG)

    def test_missing_config(self):
        code, _ = run_main(['run', '--config', os.path.join(self.out, 'absent.json')])
        self.assertEqual(code, EXIT_IO)

    def test_visualize(self):
        model = FlowModel(2, 2, 2, hidden=(4,))
        checkpoint = os.path.join(self.out, 'model.ckpt')
        checkpoint_save(model, checkpoint)
        csv = os.path.join(self.out, 'heatmap.csv')
        code, _ = run_main(['visualize', '--checkpoint', checkpoint, '--steps', '50', '--upto', '2', '--out', csv])
        self.assertEqual(code, EXIT_OK)
        rows = np.loadtxt(csv, delimiter=',', skiprows=1)
        self.assertEqual(rows.shape, (2500, 3))

    def test_visualize_needs_two_dimensions(self):
        checkpoint = os.path.join(self.out, 'model.ckpt')
        checkpoint_save(FlowModel(3, 1, 2, hidden=(4,)), checkpoint)
        code, _ = run_main(['visualize', '--checkpoint', checkpoint, '--out', os.path.join(self.out, 'h.csv')])
        self.assertEqual(code, EXIT_RUNTIME)

    def test_visualize_corrupt_checkpoint(self):
        checkpoint = os.path.join(self.out, 'model.ckpt')
        with open(checkpoint, 'wb') as file:
            file.write(b'not a checkpoint')
        code, _ = run_main(['visualize', '--checkpoint', checkpoint, '--out', os.path.join(self.out, 'h.csv')])
        self.assertEqual(code, EXIT_IO)

    def test_parser(self):
        args = build_parser().parse_args(['visualize', '--checkpoint', 'a', '--out', 'b'])
        self.assertEqual((args.xmin, args.xmax, args.steps, args.upto), (-8.0, 8.0, 200, None))
        with contextlib.redirect_stderr(io.StringIO()):
            with self.assertRaises(SystemExit):
                build_parser().parse_args(['-v', '-q', 'run', '--config', 'a'])


if __name__ == '__main__':
    unittest.main(verbosity=2)
