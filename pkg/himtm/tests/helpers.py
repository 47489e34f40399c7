import os
import shutil
import tempfile

import numpy as np

from ..services.run_config import parse_config_text

SLOW_TESTS = os.getenv('HIMTM_SLOW_TESTS', '0') not in ('', '0', 'False', 'false')

# 6 coarse patches of 8 steps, 2 sub-patches each, two hierarchies
MICRO_CONFIG = """
run.seed = 3
patch.patch_len = 8
patch.stride = 8
patch.sub_patch_len = 4
encoder.layers_per_hierarchy = 1, 1
encoder.heads = 2
encoder.d_model = 8
encoder.d_ff = 16
encoder.dropout = 0.0
pretrain.epochs = 1
pretrain.batch_size = 16
pretrain.lr = 0.001
finetune.horizon = 8
finetune.epochs = 1
finetune.batch_size = 16
finetune.lr = 0.001
finetune.naive_period = 8
data.lookback = 48
data.stride = 4
synthetic.length = 400
synthetic.channels = 2
synthetic.sinusoids = 8:1.0:0.0, 24:0.5:0.3
synthetic.noise = 0.05
"""

# 12 coarse patches of 8 steps, 4 sub-patches each (48 fine tokens), three hierarchies
TINY_CONFIG = """
run.seed = 11
patch.patch_len = 8
patch.stride = 8
patch.sub_patch_len = 2
encoder.layers_per_hierarchy = 1, 1, 1
encoder.heads = 2
encoder.d_model = 8
encoder.d_ff = 16
encoder.dropout = 0.1
pretrain.epochs = 2
pretrain.batch_size = 8
pretrain.lr = 0.003
finetune.horizon = 24
finetune.epochs = 2
finetune.batch_size = 16
finetune.lr = 0.003
finetune.naive_period = 24
data.lookback = 96
data.stride = 8
synthetic.length = 600
synthetic.channels = 1
synthetic.sinusoids = 24:1.0:0.0, 96:0.5:0.0
synthetic.noise = 0.05
"""


def micro_config(**overrides):
    return parse_config_text(MICRO_CONFIG, {k.replace('__', '.'): str(v) for k, v in overrides.items()})


def tiny_config(**overrides):
    return parse_config_text(TINY_CONFIG, {k.replace('__', '.'): str(v) for k, v in overrides.items()})


def sinusoid_windows(count: int, lookback: int, seed: int = 0, noise: float = 0.05) -> np.ndarray:
    """Rows of period-24 plus period-96 sinusoids at random offsets"""
    rng = np.random.default_rng(seed)
    offsets = rng.integers(0, 96, size=count)
    t = offsets[:, None] + np.arange(lookback)[None, :]
    values = np.sin(2 * np.pi * t / 24) + 0.5 * np.sin(2 * np.pi * t / 96)
    return values + rng.normal(0.0, noise, size=values.shape)


class TempDirMixin:
    def setUp(self):
        super().setUp()
        self.tmp = tempfile.mkdtemp(prefix='himtm-test-')

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)
        super().tearDown()
