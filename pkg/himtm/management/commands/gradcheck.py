from django.conf import settings
from django.core.management.base import CommandError

from ._base import HiMTMCommand
from ...services.gradcheck_suite import SCALES, run_gradcheck_suite


class Command(HiMTMCommand):
    help = 'Compare analytic gradients with central finite differences on a small model'
    needs_config = False

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--scale', choices=sorted(SCALES), default='tiny')
        parser.add_argument('--tolerance', type=float, default=None,
                            help='Worst accepted relative error (default HIMTM_GRADCHECK_TOLERANCE)')
        parser.add_argument('--step', type=float, default=1e-5)
        parser.add_argument('--seed', type=int, default=0)

    def run(self, **options):
        tolerance = options['tolerance'] if options['tolerance'] is not None else settings.HIMTM_GRADCHECK_TOLERANCE
        results = run_gradcheck_suite(options['scale'], options['step'], options['seed'])
        for name, result in results:
            flag = 'ok' if result.passed(tolerance) else 'FAIL'
            detached = f" (no gradient: {', '.join(result.detached)})" if result.detached else ''
            self.stdout.write(f"{name:<28} {result.max_rel_error:.3e} {flag}{detached}")
        worst_name, worst = max(results, key=lambda item: item[1].max_rel_error)
        self.stdout.write(f"worst relative error: {worst.max_rel_error:.3e} ({worst_name})")
        if not worst.passed(tolerance):
            raise CommandError(
                f"gradient check failed: {worst_name} has relative error {worst.max_rel_error:.3e} >= {tolerance:g}"
            )
