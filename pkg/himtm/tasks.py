import logging

from celery import shared_task

from .exceptions import HiMTMError
from .services.experiments import run_experiment
from .services.run_config import parse_config_text

logger = logging.getLogger(__name__)


@shared_task(bind=True, max_retries=0)
def run_experiment_task(self, config_text: str, output_dir: str, skip_pretrain: bool = False, label: str = ''):
    """
    One sweep/ablation job: pre-train, fine-tune and evaluate in an isolated
    output directory. Runs in-process when CELERY_TASK_ALWAYS_EAGER is set.
    """
    label = label or output_dir
    try:
        config = parse_config_text(config_text, origin=f"job {label}")
        logger.info(f"Starting experiment job {label}")
        row = run_experiment(config, output_dir, skip_pretrain)
        logger.info(f"Experiment job {label} finished: test mse {row['test_mse']:.6f}")
        return row
    except HiMTMError as e:
        logger.error(f"Experiment job {label} failed: {str(e)}")
        raise
