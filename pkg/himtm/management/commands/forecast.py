from pathlib import Path

from ._base import HiMTMCommand
from .eval import restore_model
from ...services.artifacts import write_table
from ...services.data import inverse_standardize, prepare_dataset
from ...services.finetune import FORECAST_COLUMNS, forecast_records, predict, records_to_rows


class Command(HiMTMCommand):
    help = 'Write per-window forecasts (window_start, channel, h, y_true, y_pred) to a CSV file'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--from', dest='checkpoint', required=True, help='Fine-tuned checkpoint (.npz)')
        parser.add_argument('--split', choices=['train', 'val', 'test'], default='test')
        parser.add_argument('--original-scale', action='store_true', help='Undo the train-split standardisation')

    def run(self, **options):
        config = self.load_run_config(options)
        model, _ = restore_model(config, options['checkpoint'])
        dataset = prepare_dataset(config.data)
        windows = dataset.sample_windows(options['split'], config.data.lookback, config.finetune.horizon, config.data.stride)
        predictions = predict(model, windows.x, config.finetune)
        if options['original_scale']:
            predictions = inverse_standardize(predictions, dataset.stats, windows.channels)
            windows.y = inverse_standardize(windows.y, dataset.stats, windows.channels)
        target = Path(options['out']) if options['out'] else self.output_dir(options, config, 'forecast') / 'forecast.csv'
        if target.suffix != '.csv':
            target = target / 'forecast.csv'
        rows = records_to_rows(forecast_records(windows, predictions))
        write_table(target, rows, config, FORECAST_COLUMNS)
        self.stdout.write(f"{len(windows)} windows x {config.finetune.horizon} steps written to {target}")
