from ._base import HiMTMCommand
from ...services.data import prepare_dataset
from ...services.pretrain import pretrain_run


class Command(HiMTMCommand):
    help = 'Masked pre-training with hierarchical self-distillation; writes a checkpoint and the loss history'

    def run(self, **options):
        config = self.load_run_config(options)
        out = self.output_dir(options, config, 'pretrain')
        dataset = prepare_dataset(config.data)
        result = pretrain_run(dataset, config, out)
        self.stdout.write(f"final loss: {result.epoch_losses[-1]:.6f}" if result.epoch_losses else "no epochs run")
        self.stdout.write(f"checkpoint: {result.checkpoint_path}")
        self.stdout.write(f"history: {result.history_path}")
