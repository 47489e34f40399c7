import os
from unittest import mock

from django.test import SimpleTestCase

from ..exceptions import ConfigurationError, ContractError
from ..services.experiments import ablation_overrides, summarize, sweep_overrides
from ..tasks import run_experiment_task
from ..utils import collect_result, derive_rng, execute_task
from .helpers import MICRO_CONFIG, TempDirMixin, micro_config


class ExecuteTaskTest(SimpleTestCase):
    def test_falls_back_to_synchronous_call(self):
        """A broker error runs the task in-process"""
        task = mock.Mock(return_value={'test_mse': 1.0})
        task.delay.side_effect = ConnectionError('redis down')
        with self.assertLogs('himtm.utils', level='WARNING'):
            result = execute_task(task, 'a', b=2)
        task.assert_called_once_with('a', b=2)
        self.assertEqual(collect_result(result), {'test_mse': 1.0})

    def test_dispatch_uses_delay(self):
        task = mock.Mock()
        execute_task(task, 'x')
        task.delay.assert_called_once_with('x')
        task.assert_not_called()

    def test_plain_results_pass_through(self):
        self.assertEqual(collect_result({'a': 1}), {'a': 1})


class DeriveRngTest(SimpleTestCase):
    def test_streams_are_independent_and_reproducible(self):
        self.assertEqual(derive_rng(3, 'mask').integers(1 << 30), derive_rng(3, 'mask').integers(1 << 30))
        self.assertNotEqual(derive_rng(3, 'mask').integers(1 << 30), derive_rng(3, 'init').integers(1 << 30))

    def test_unknown_stream(self):
        with self.assertRaises(ContractError):
            derive_rng(0, 'noise')


class OverridesTest(SimpleTestCase):
    def test_sweep_overrides(self):
        config = micro_config()
        self.assertEqual(sweep_overrides(config, 'patch_len', '16'),
                         {'patch.patch_len': '16', 'patch.stride': '16', 'patch.sub_patch_len': '8'})
        self.assertEqual(sweep_overrides(config, 'width', '16'), {'encoder.d_model': '16', 'encoder.d_ff': '32'})
        with self.assertRaises(ConfigurationError):
            sweep_overrides(config, 'patch_len', '9')

    def test_ablation_overrides(self):
        config = micro_config()
        self.assertEqual(ablation_overrides(config, 'hmt'),
                         ({'patch.sub_patch_len': '8', 'encoder.layers_per_hierarchy': '2'}, False))
        self.assertEqual(ablation_overrides(config, 'pretrain'), ({}, True))
        with self.assertRaises(ConfigurationError):
            ablation_overrides(config, 'everything')

    def test_summary_lines(self):
        rows = [{'variant': 'full', 'test_mse': 0.5, 'test_mae': 0.4, 'naive_mse': 1.0}]
        self.assertEqual(len(summarize(rows, 'variant').splitlines()), 2)
        self.assertIsNone(summarize([], 'variant'))


class RunExperimentTaskTest(TempDirMixin, SimpleTestCase):
    def test_runs_in_process(self):
        row = run_experiment_task.delay(MICRO_CONFIG, self.tmp, False, 'micro').get()
        self.assertEqual(set(row), {'test_mse', 'test_mae', 'naive_mse', 'naive_mae', 'best_epoch', 'pretrain_loss'})
        self.assertTrue(os.path.isfile(os.path.join(self.tmp, 'pretrain.ckpt.npz')))
        self.assertTrue(os.path.isfile(os.path.join(self.tmp, 'metrics.csv')))

    def test_skip_pretrain(self):
        row = run_experiment_task(MICRO_CONFIG, self.tmp, True)
        self.assertIsNone(row['pretrain_loss'])
        self.assertFalse(os.path.exists(os.path.join(self.tmp, 'pretrain.ckpt.npz')))

    def test_configuration_errors_propagate(self):
        with self.assertRaises(ConfigurationError):
            run_experiment_task(MICRO_CONFIG + "pretrain.alpha = -1\n", self.tmp)
