from ._base import HiMTMCommand
from ...services.artifacts import write_table
from ...services.experiments import RESULT_COLUMNS, SWEEP_PARAMS, summarize, sweep


class Command(HiMTMCommand):
    help = 'Run pre-train, fine-tune and evaluate once per value of one hyper-parameter'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--param', required=True, choices=SWEEP_PARAMS)
        parser.add_argument('--values', required=True,
                            help='Comma-separated values; depth values use dashes, e.g. 1-1-1,2-2-2')

    def run(self, **options):
        config = self.load_run_config(options)
        out = self.output_dir(options, config, 'sweep')
        values = [v.strip() for v in options['values'].split(',') if v.strip()]
        rows = sweep(config, options['param'], values, out)
        path = write_table(out / f"sweep_{options['param']}.csv", rows, config, ['param', 'value'] + RESULT_COLUMNS)
        self.stdout.write(summarize(rows, 'value'))
        self.stdout.write(f"comparison table: {path}")
