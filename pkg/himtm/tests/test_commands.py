import os
from io import StringIO
from pathlib import Path
from unittest import mock

import numpy as np
import pandas as pd
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from ..management.commands.finetune import Command as FinetuneCommand
from ..management.commands.gradcheck import Command as GradcheckCommand
from ..services.artifacts import load_checkpoint, read_echo, read_table
from ..services.run_config import parse_config_text
from ..services.tensor_engine import GradCheckResult
from .helpers import MICRO_CONFIG, TempDirMixin


class CommandTestCase(TempDirMixin, SimpleTestCase):
    def setUp(self):
        super().setUp()
        self.config_path = os.path.join(self.tmp, 'micro.conf')
        with open(self.config_path, 'w', encoding='utf-8') as handle:
            handle.write(MICRO_CONFIG)

    def path(self, *parts) -> Path:
        return Path(self.tmp, *parts)

    def call(self, name, *args):
        stdout = StringIO()
        call_command(name, *args, stdout=stdout)
        return stdout.getvalue()

    def pretrain(self, out='pre'):
        self.call('pretrain', '--config', self.config_path, '--out', str(self.path(out)))
        return self.path(out, 'pretrain.ckpt.npz')


class GradcheckCommandTest(SimpleTestCase):
    def test_tiny_model_passes(self):
        stdout = StringIO()
        call_command('gradcheck', stdout=stdout)
        output = stdout.getvalue()
        self.assertIn('worst relative error:', output)
        self.assertNotIn('FAIL', output)
        for name in ('matmul', 'batch_norm_train', 'attention', 'encoder', 'decoder', 'pretrain_loss',
                     'cross_scale_attention', 'forecast_loss_learned'):
            self.assertIn(name, output)

    @mock.patch('himtm.management.commands.gradcheck.run_gradcheck_suite')
    def test_failure_raises(self, mock_suite):
        mock_suite.return_value = [
            ('add', GradCheckResult(1e-9, {'a': 1e-9}, [])),
            ('encoder', GradCheckResult(3e-2, {'w': 3e-2}, [])),
        ]
        with self.assertRaisesMessage(CommandError, 'encoder has relative error 3.000e-02'):
            call_command('gradcheck', '--tolerance', '1e-4', stdout=StringIO())

    @mock.patch('himtm.management.commands.gradcheck.run_gradcheck_suite')
    def test_failure_exits_with_status_one(self, mock_suite):
        """Command-line failures print one `error:` line and exit 1"""
        mock_suite.return_value = [('encoder', GradCheckResult(1.0, {'w': 1.0}, []))]
        stderr = StringIO()
        command = GradcheckCommand(stdout=StringIO(), stderr=stderr)
        with self.assertRaises(SystemExit) as ctx:
            command.run_from_argv(['manage.py', 'gradcheck'])
        self.assertEqual(ctx.exception.code, 1)
        self.assertTrue(stderr.getvalue().startswith('error: gradient check failed'))


class ArgumentErrorTest(CommandTestCase):
    def run_argv(self, *args):
        stderr = StringIO()
        command = FinetuneCommand(stdout=StringIO(), stderr=stderr)
        with self.assertRaises(SystemExit) as ctx:
            command.run_from_argv(['manage.py', 'finetune', *args])
        self.assertEqual(ctx.exception.code, 1)
        return stderr.getvalue()

    def test_unknown_flag(self):
        message = self.run_argv('--config', self.config_path, '--bogus')
        self.assertEqual(message.strip(), 'error: unrecognized arguments: --bogus')

    def test_missing_config(self):
        self.assertIn('error:', self.run_argv('--no-pretrain'))

    def test_bad_override(self):
        message = self.run_argv('--config', self.config_path, '--no-pretrain', '--set', 'pretrain.mask_ratio=2')
        self.assertIn('pretrain.mask_ratio', message)

    def test_needs_exactly_one_source(self):
        with self.assertRaisesMessage(CommandError, 'exactly one'):
            self.call('finetune', '--config', self.config_path)
        with self.assertRaisesMessage(CommandError, 'exactly one'):
            self.call('finetune', '--config', self.config_path, '--no-pretrain', '--from', 'x.npz')

    def test_missing_checkpoint(self):
        with self.assertRaisesMessage(CommandError, 'cannot read checkpoint'):
            self.call('finetune', '--config', self.config_path, '--from', str(self.path('absent.npz')))


class PipelineCommandTest(CommandTestCase):
    def test_pretrain_finetune_eval_forecast(self):
        checkpoint = self.pretrain()
        self.assertTrue(self.path('pre', 'pretrain_history.csv').is_file())

        output = self.call('finetune', '--config', self.config_path, '--from', str(checkpoint),
                           '--out', str(self.path('ft')))
        self.assertIn('test mse', output)
        metrics = read_table(self.path('ft', 'metrics.csv'))
        self.assertEqual(list(metrics['split']), ['train', 'val', 'test', 'test_naive'])
        finetuned = self.path('ft', 'finetune.ckpt.npz')
        self.assertEqual(load_checkpoint(finetuned).stage, 'finetune')

        self.call('eval', '--config', self.config_path, '--from', str(finetuned), '--out', str(self.path('ev')))
        evaluated = read_table(self.path('ev', 'eval_metrics.csv'))
        self.assertEqual(list(evaluated['split']), ['test', 'test_naive'])
        test_row = metrics[metrics['split'] == 'test'].iloc[0]
        self.assertAlmostEqual(evaluated['mse'][0], test_row['mse'], places=12)

        self.call('forecast', '--config', self.config_path, '--from', str(finetuned),
                  '--out', str(self.path('fc.csv')))
        forecasts = read_table(self.path('fc.csv'))
        self.assertEqual(list(forecasts.columns), ['window_start', 'channel', 'h', 'y_true', 'y_pred'])
        # 7 test window starts x 2 channels x horizon 8
        self.assertEqual(len(forecasts), 112)
        self.assertEqual(sorted(forecasts['h'].unique()), list(range(1, 9)))
        self.assertEqual(parse_config_text(read_echo(self.path('fc.csv'))).finetune.horizon, 8)

    def test_linear_probe_flag(self):
        checkpoint = self.pretrain()
        self.call('finetune', '--config', self.config_path, '--from', str(checkpoint), '--mode', 'linear_probe',
                  '--out', str(self.path('lp')))
        echo = read_echo(self.path('lp', 'metrics.csv'))
        self.assertIn('finetune.mode = linear_probe', echo)

    def test_original_scale_forecasts(self):
        self.call('finetune', '--config', self.config_path, '--no-pretrain', '--out', str(self.path('ft')))
        finetuned = str(self.path('ft', 'finetune.ckpt.npz'))
        self.call('forecast', '--config', self.config_path, '--from', finetuned, '--out', str(self.path('std')))
        self.call('forecast', '--config', self.config_path, '--from', finetuned, '--original-scale',
                  '--out', str(self.path('raw')))
        standardized = read_table(self.path('std', 'forecast.csv'))
        original = read_table(self.path('raw', 'forecast.csv'))
        self.assertEqual(len(standardized), len(original))
        self.assertGreater(abs(standardized['y_true'] - original['y_true']).max(), 0.0)

    def test_geometry_mismatch(self):
        checkpoint = self.pretrain()
        with self.assertRaisesMessage(CommandError, 'd_model: checkpoint=8, config=16'):
            self.call('finetune', '--config', self.config_path, '--from', str(checkpoint),
                      '--set', 'encoder.d_model=16', '--set', 'encoder.d_ff=32', '--out', str(self.path('ft')))

    def test_full_pipeline_is_reproducible(self):
        """pretrain -> finetune -> eval twice with one seed: identical checkpoints and metric files"""
        for run in ('a', 'b'):
            checkpoint = self.pretrain(os.path.join(run, 'pre'))
            self.call('finetune', '--config', self.config_path, '--from', str(checkpoint),
                      '--out', str(self.path(run, 'ft')))
            self.call('eval', '--config', self.config_path, '--from', str(self.path(run, 'ft', 'finetune.ckpt.npz')),
                      '--out', str(self.path(run, 'ev')))

        for stage, name in (('pre', 'pretrain.ckpt.npz'), ('ft', 'finetune.ckpt.npz')):
            first, second = load_checkpoint(self.path('a', stage, name)), load_checkpoint(self.path('b', stage, name))
            self.assertEqual(first.meta, second.meta)
            self.assertEqual(set(first.arrays), set(second.arrays))
            for key, value in first.arrays.items():
                np.testing.assert_array_equal(value, second.arrays[key], err_msg=f'{stage}: {key}')
        for parts in (('pre', 'pretrain_history.csv'), ('ft', 'metrics.csv'), ('ev', 'eval_metrics.csv')):
            self.assertEqual(self.path('a', *parts).read_bytes(), self.path('b', *parts).read_bytes(), parts[-1])

    def test_metrics_need_the_comment_option(self):
        self.call('finetune', '--config', self.config_path, '--no-pretrain', '--out', str(self.path('ft')))
        path = self.path('ft', 'metrics.csv')
        self.assertTrue(path.read_text(encoding='utf-8').startswith('# '))
        metrics = pd.read_csv(path, comment='#')
        self.assertEqual(list(metrics['split']), ['train', 'val', 'test', 'test_naive'])
        self.assertIn("comment='#'", FinetuneCommand.help)

    def test_same_seed_same_bytes(self):
        for out in ('a', 'b'):
            self.call('finetune', '--config', self.config_path, '--no-pretrain', '--out', str(self.path(out)))
        first = self.path('a', 'metrics.csv').read_bytes()
        self.assertEqual(first, self.path('b', 'metrics.csv').read_bytes())

        self.call('finetune', '--config', self.config_path, '--no-pretrain', '--set', 'run.seed=4',
                  '--out', str(self.path('c')))
        self.assertNotEqual(read_table(self.path('a', 'metrics.csv'))['mse'][0],
                            read_table(self.path('c', 'metrics.csv'))['mse'][0])


class ExperimentCommandTest(CommandTestCase):
    def test_mask_ratio_sweep(self):
        output = self.call('sweep', '--config', self.config_path, '--param', 'mask_ratio',
                           '--values', '0.1,0.3,0.5,0.7,0.9', '--out', str(self.path('sw')))
        table = read_table(self.path('sw', 'sweep_mask_ratio.csv'))
        self.assertEqual(list(table['value']), [0.1, 0.3, 0.5, 0.7, 0.9])
        self.assertTrue(table['test_mse'].notna().all())
        self.assertTrue(self.path('sw', 'sweep', 'mask_ratio=0.7', 'metrics.csv').is_file())
        self.assertIn('mask_ratio=0.9', output)

    def test_unknown_sweep_parameter(self):
        with self.assertRaises(CommandError):
            self.call('sweep', '--config', self.config_path, '--param', 'heads', '--values', '2')

    def test_ablation_of_every_component(self):
        self.call('ablate', '--config', self.config_path, '--drop', 'hsd', 'ded', 'hmt', 'csa', 'pretrain',
                  '--out', str(self.path('ab')))
        table = read_table(self.path('ab', 'ablation.csv'))
        self.assertEqual(list(table['variant']), ['full', 'w/o hsd', 'w/o ded', 'w/o hmt', 'w/o csa', 'w/o pretrain'])
        self.assertTrue(table.loc[table['variant'] == 'w/o pretrain', 'pretrain_loss'].isna().all())
        self.assertFalse(self.path('ab', 'ablate', 'without_pretrain', 'pretrain.ckpt.npz').exists())
        flat = load_checkpoint(self.path('ab', 'ablate', 'without_hmt', 'finetune.ckpt.npz')).config
        self.assertEqual(flat.encoder.layers_per_hierarchy, (2,))
