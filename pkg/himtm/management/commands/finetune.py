from django.core.management.base import CommandError

from ._base import HiMTMCommand
from ...services.data import prepare_dataset
from ...services.finetune import FINETUNE_MODES, finetune_run


class Command(HiMTMCommand):
    help = (
        'Fine-tune the forecasting head from a pre-trained checkpoint (or from scratch with --no-pretrain). '
        "metrics.csv starts with '# ' config lines: read it with pandas.read_csv(path, comment='#')"
    )

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--from', dest='checkpoint', help='Pre-trained checkpoint (.npz)')
        parser.add_argument('--no-pretrain', action='store_true', help='Random-initialisation control run')
        parser.add_argument('--mode', choices=FINETUNE_MODES, help='Override finetune.mode')

    def run(self, **options):
        if bool(options['checkpoint']) == bool(options['no_pretrain']):
            raise CommandError('finetune needs exactly one of --from CKPT or --no-pretrain')
        overrides = list(options['set'])
        if options['mode']:
            overrides.append(f"finetune.mode={options['mode']}")
        config = self.load_run_config(dict(options, set=overrides))
        out = self.output_dir(options, config, 'finetune')
        dataset = prepare_dataset(config.data)
        result = finetune_run(dataset, config, checkpoint_path=options['checkpoint'], output_dir=out)
        self.stdout.write(
            f"test mse {result.test['mse']:.6f} mae {result.test['mae']:.6f} "
            f"(naive mse {result.naive['mse']:.6f}), best epoch {result.best_epoch}"
        )
        self.stdout.write(f"metrics: {result.metrics_path}")
        self.stdout.write(f"checkpoint: {result.checkpoint_path}")
