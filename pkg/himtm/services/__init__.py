from .model import HiMTMModel
from .run_config import RunConfig, load_config, parse_config_text
from .data import DatasetSpec, PreparedDataset, prepare_dataset
from .pretrain import Pretrainer, pretrain_run
from .finetune import Finetuner, finetune_run

__all__ = [
    'HiMTMModel', 'RunConfig', 'load_config', 'parse_config_text',
    'DatasetSpec', 'PreparedDataset', 'prepare_dataset',
    'Pretrainer', 'pretrain_run', 'Finetuner', 'finetune_run',
]
