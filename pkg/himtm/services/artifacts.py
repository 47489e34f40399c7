"""
Checkpoints and CSV artifacts

Every artifact embeds the config echo of the run that produced it: checkpoints
in their JSON metadata entry, CSV files as leading `# ` comment lines.
"""
import json
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from ..exceptions import CheckpointError, ConfigurationError
from .parameters import ModelParams

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
META_KEY = '__meta__'


@dataclass
class Checkpoint:
    arrays: Dict[str, np.ndarray]
    meta: dict

    @property
    def stage(self) -> str:
        return self.meta.get('stage', 'unknown')

    @property
    def config(self):
        from .run_config import parse_config_text

        return parse_config_text(self.meta['config'], origin='checkpoint config echo')


def _atomic_target(path: Path, suffix: str, **kwargs):
    """Temporary file next to `path`; callers os.replace() it into place once written"""
    path.parent.mkdir(parents=True, exist_ok=True)
    return tempfile.NamedTemporaryFile(delete=False, dir=path.parent, prefix=f".{path.name}.", suffix=suffix, **kwargs)


def save_checkpoint(path, params: ModelParams, config, stage: str, rng_states: Optional[dict] = None,
                    extra: Optional[dict] = None) -> Path:
    """Write params, BatchNorm statistics and metadata to `path` (written to a temp file, then renamed)"""
    path = Path(path)
    meta = {
        'format_version': CHECKPOINT_FORMAT_VERSION,
        'stage': stage,
        'config': config.echo(),
        'rng_states': rng_states or {},
    }
    meta.update(extra or {})
    arrays = params.state_arrays()
    arrays[META_KEY] = np.array(json.dumps(meta))
    handle = _atomic_target(path, '.npz')
    try:
        with handle:
            np.savez(handle, **arrays)
        os.replace(handle.name, path)
    except Exception:
        if os.path.exists(handle.name):
            os.unlink(handle.name)
        raise
    logger.info(f"{stage} checkpoint saved to {path}")
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {key: archive[key] for key in archive.files}
    except (OSError, ValueError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {str(e)}") from None
    if META_KEY not in arrays:
        raise CheckpointError(f"{path} has no metadata entry; not a checkpoint")
    try:
        meta = json.loads(str(arrays.pop(META_KEY)))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint metadata in {path}: {str(e)}") from None
    version = meta.get('format_version')
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format version {version}, this build reads version {CHECKPOINT_FORMAT_VERSION}"
        )
    return Checkpoint(arrays, meta)


def check_geometry(stored, config) -> None:
    """Refuse a checkpoint whose encoder geometry differs from the configured one"""
    pairs = [
        ('patch.patch_len', stored.patch.patch_len, config.patch.patch_len),
        ('patch.stride', stored.patch.stride, config.patch.stride),
        ('patch.sub_patch_len', stored.patch.sub_patch_len, config.patch.sub_patch_len),
        ('encoder.layers_per_hierarchy', list(stored.encoder.layers_per_hierarchy), list(config.encoder.layers_per_hierarchy)),
        ('encoder.heads', stored.encoder.heads, config.encoder.heads),
        ('encoder.d_model', stored.encoder.d_model, config.encoder.d_model),
        ('encoder.d_ff', stored.encoder.d_ff, config.encoder.d_ff),
        ('data.lookback', stored.data.lookback, config.data.lookback),
    ]
    mismatches = [f"{name.split('.')[-1]}: checkpoint={a}, config={b}" for name, a, b in pairs if a != b]
    if mismatches:
        raise ConfigurationError(f"checkpoint geometry does not match the configuration ({'; '.join(mismatches)})")


def write_table(path, rows: Union[Sequence[dict], pd.DataFrame], config, columns: Optional[List[str]] = None) -> Path:
    """CSV with the config echo as a `# ` preamble and 17 significant digits"""
    path = Path(path)
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows), columns=columns)
    preamble = ''.join(f"# {line}\n" for line in config.echo().splitlines())
    handle = _atomic_target(path, '.csv', mode='w', encoding='utf-8', newline='')
    try:
        with handle:
            handle.write(preamble)
            frame.to_csv(handle, index=False, float_format='%.17g')
        os.replace(handle.name, path)
    except Exception:
        if os.path.exists(handle.name):
            os.unlink(handle.name)
        raise
    return path


def read_table(path) -> pd.DataFrame:
    return pd.read_csv(path, comment='#')


def read_echo(path) -> str:
    """The config echo embedded in a CSV artifact"""
    lines = []
    with open(path, encoding='utf-8') as handle:
        for line in handle:
            if not line.startswith('# '):
                break
            lines.append(line[2:])
    return ''.join(lines)
