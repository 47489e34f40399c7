"""
End-to-end pipeline plus the sweep and ablation drivers built on it
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from ..exceptions import ConfigurationError
from .data import prepare_dataset
from .finetune import finetune_run
from .pretrain import pretrain_run
from .run_config import RunConfig

logger = logging.getLogger(__name__)

SWEEP_PARAMS = ('mask_ratio', 'lookback', 'patch_len', 'depth', 'width')
ABLATIONS = ('hsd', 'ded', 'hmt', 'csa', 'pretrain')
RESULT_COLUMNS = ['test_mse', 'test_mae', 'naive_mse', 'naive_mae', 'best_epoch', 'pretrain_loss']


def run_experiment(config: RunConfig, output_dir, skip_pretrain: bool = False) -> Dict[str, object]:
    """
    Pre-train (unless skipped or pretrain.epochs is 0), fine-tune and evaluate

    Returns:
        JSON-serializable result row
    """
    output_dir = Path(output_dir)
    dataset = prepare_dataset(config.data)
    model, pretrain_loss = None, None
    if not skip_pretrain and config.pretrain.epochs > 0:
        pretrained = pretrain_run(dataset, config, output_dir)
        model = pretrained.model
        pretrain_loss = pretrained.epoch_losses[-1]
    result = finetune_run(dataset, config, output_dir=output_dir, model=model)
    return {
        'test_mse': result.test['mse'],
        'test_mae': result.test['mae'],
        'naive_mse': result.naive['mse'],
        'naive_mae': result.naive['mae'],
        'best_epoch': result.best_epoch,
        'pretrain_loss': pretrain_loss,
    }


def sweep_overrides(config: RunConfig, param: str, value: str) -> Dict[str, str]:
    """Configuration overrides that set one swept hyper-parameter"""
    if param == 'mask_ratio':
        return {'pretrain.mask_ratio': value}
    if param == 'lookback':
        return {'data.lookback': value}
    if param == 'patch_len':
        patch_len = int(value)
        n_sub = config.patch.n_sub
        if patch_len % n_sub:
            raise ConfigurationError(f"patch_len {patch_len} cannot be split into {n_sub} sub-patches")
        return {
            'patch.patch_len': str(patch_len),
            'patch.stride': str(patch_len),
            'patch.sub_patch_len': str(patch_len // n_sub),
        }
    if param == 'depth':
        return {'encoder.layers_per_hierarchy': value}
    if param == 'width':
        width = int(value)
        return {'encoder.d_model': str(width), 'encoder.d_ff': str(2 * width)}
    raise ConfigurationError(f"unknown sweep parameter '{param}', expected one of {SWEEP_PARAMS}")


def ablation_overrides(config: RunConfig, drop: str) -> Tuple[Dict[str, str], bool]:
    """
    Overrides for one removed component

    Returns:
        (overrides, skip_pretrain)
    """
    if drop == 'hsd':
        return {'pretrain.use_hsd': 'false'}, False
    if drop == 'ded':
        return {'pretrain.use_ded': 'false'}, False
    if drop == 'csa':
        return {'finetune.use_csa': 'false'}, False
    if drop == 'hmt':
        depth = sum(config.encoder.layers_per_hierarchy)
        return {'patch.sub_patch_len': str(config.patch.patch_len), 'encoder.layers_per_hierarchy': str(depth)}, False
    if drop == 'pretrain':
        return {}, True
    raise ConfigurationError(f"unknown ablation '{drop}', expected one of {ABLATIONS}")


def _dispatch(jobs: Sequence[Tuple[str, RunConfig, Path, bool]]) -> List[Tuple[str, Dict[str, object]]]:
    from ..tasks import run_experiment_task
    from ..utils import collect_result, execute_task

    pending = []
    for label, config, job_dir, skip_pretrain in jobs:
        logger.info(f"dispatching job {label} -> {job_dir}")
        pending.append((label, execute_task(run_experiment_task, config.echo(), str(job_dir), skip_pretrain, label)))
    return [(label, collect_result(handle)) for label, handle in pending]


def sweep(config: RunConfig, param: str, values: Sequence[str], output_dir) -> List[dict]:
    """Run the pipeline once per value, each job in `<out>/sweep/<param>=<value>/`"""
    if param not in SWEEP_PARAMS:
        raise ConfigurationError(f"unknown sweep parameter '{param}', expected one of {SWEEP_PARAMS}")
    if not values:
        raise ConfigurationError("sweep needs at least one value")
    root = Path(output_dir) / 'sweep'
    jobs = []
    for value in values:
        job_config = config.with_overrides(sweep_overrides(config, param, value))
        jobs.append((f"{param}={value}", job_config, root / f"{param}={value}", False))
    results = _dispatch(jobs)
    return [dict({'param': param, 'value': value}, **row) for value, (_, row) in zip(values, results)]


def ablate(config: RunConfig, drops: Sequence[str], output_dir, include_full: bool = True) -> List[dict]:
    """Run the full model plus one variant per removed component, each in `<out>/ablate/<variant>/`"""
    unknown = [d for d in drops if d not in ABLATIONS]
    if unknown:
        raise ConfigurationError(f"unknown ablation {unknown}, expected values from {ABLATIONS}")
    root = Path(output_dir) / 'ablate'
    jobs = []
    if include_full:
        jobs.append(('full', config, root / 'full', False))
    for drop in drops:
        overrides, skip_pretrain = ablation_overrides(config, drop)
        jobs.append((f"w/o {drop}", config.with_overrides(overrides), root / f"without_{drop}", skip_pretrain))
    results = _dispatch(jobs)
    return [dict({'variant': label}, **row) for label, row in results]


def summarize(rows: Sequence[dict], key: str) -> Optional[str]:
    """Human-readable table of result rows, one line per job"""
    if not rows:
        return None
    lines = [f"{key:<20} {'test_mse':>12} {'test_mae':>12} {'naive_mse':>12}"]
    for row in rows:
        label = row.get(key) if key != 'value' else f"{row['param']}={row['value']}"
        lines.append(f"{str(label):<20} {row['test_mse']:>12.6f} {row['test_mae']:>12.6f} {row['naive_mse']:>12.6f}")
    return '\n'.join(lines)
