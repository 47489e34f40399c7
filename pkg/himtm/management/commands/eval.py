import logging

from ._base import HiMTMCommand
from ...services.artifacts import check_geometry, load_checkpoint, write_table
from ...services.data import prepare_dataset
from ...services.finetune import METRIC_COLUMNS, evaluate, evaluate_naive
from ...services.model import HiMTMModel

logger = logging.getLogger(__name__)


def restore_model(config, checkpoint_path):
    """Model built from `config` with every tensor of a fine-tuned checkpoint loaded"""
    checkpoint = load_checkpoint(checkpoint_path)
    check_geometry(checkpoint.config, config)
    if checkpoint.stage != 'finetune':
        logger.warning(f"{checkpoint_path} is a {checkpoint.stage} checkpoint; forecasting head is untrained")
    model = HiMTMModel.from_config(config)
    model.params.restore(checkpoint.arrays)
    return model, checkpoint


class Command(HiMTMCommand):
    help = (
        'Evaluate a fine-tuned checkpoint on the test split (MSE/MAE on standardized values). '
        "eval_metrics.csv starts with '# ' config lines: read it with pandas.read_csv(path, comment='#')"
    )

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--from', dest='checkpoint', required=True, help='Fine-tuned checkpoint (.npz)')
        parser.add_argument('--split', choices=['train', 'val', 'test'], default='test')

    def run(self, **options):
        config = self.load_run_config(options)
        out = self.output_dir(options, config, 'eval')
        model, checkpoint = restore_model(config, options['checkpoint'])
        dataset = prepare_dataset(config.data)
        windows = dataset.sample_windows(options['split'], config.data.lookback, config.finetune.horizon, config.data.stride)
        epoch = int(checkpoint.meta.get('best_epoch', 0))
        row = evaluate(model, windows, config.finetune, epoch, options['split'])
        naive = evaluate_naive(windows, config.finetune.naive_period, config.finetune.loss_threshold, epoch,
                               f"{options['split']}_naive")
        path = write_table(out / 'eval_metrics.csv', [row, naive], config, METRIC_COLUMNS)
        self.stdout.write(f"{options['split']} mse {row['mse']:.6f} mae {row['mae']:.6f}")
        self.stdout.write(f"metrics: {path}")
