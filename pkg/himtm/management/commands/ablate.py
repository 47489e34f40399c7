from ._base import HiMTMCommand
from ...services.artifacts import write_table
from ...services.experiments import ABLATIONS, RESULT_COLUMNS, ablate, summarize


class Command(HiMTMCommand):
    help = 'Run the full model and one variant per removed component'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--drop', required=True, nargs='+', choices=ABLATIONS)
        parser.add_argument('--skip-full', action='store_true', help='Do not run the unablated reference')

    def run(self, **options):
        config = self.load_run_config(options)
        out = self.output_dir(options, config, 'ablate')
        rows = ablate(config, options['drop'], out, include_full=not options['skip_full'])
        path = write_table(out / 'ablation.csv', rows, config, ['variant'] + RESULT_COLUMNS)
        self.stdout.write(summarize(rows, 'variant'))
        self.stdout.write(f"ablation table: {path}")
