"""
Forecasting on top of the pre-trained student encoder

The full look-back window is encoded, the per-hierarchy features are tagged
with a scale embedding, concatenated and passed through one self-attention
block (cross-scale attention), split back, flattened per scale into a linear
head and aggregated into the horizon forecast.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..exceptions import ConfigurationError, DataError, NumericalError, ShapeError
from ..utils import derive_rng
from .hmt_encoder import EncoderConfig, MultiScaleFeatures, TransformerBlock, transformer_block
from .parameters import ModelParams
from .patching import full_tokens
from .tensor_engine import (
    AdamState,
    Tape,
    Tensor,
    adam_step,
    add,
    backward,
    concat,
    linear,
    mul,
    no_recording,
    recording,
    reshape,
    slice_axis,
    smooth_l1,
    softmax_rows,
)

if TYPE_CHECKING:
    from .data import PreparedDataset, WindowSet
    from .model import HiMTMModel
    from .run_config import RunConfig

logger = logging.getLogger(__name__)

FINETUNE_MODES = ('full', 'linear_probe')
AGGREGATIONS = ('mean', 'learned')
METRIC_COLUMNS = ['epoch', 'split', 'mse', 'mae', 'loss']
FORECAST_COLUMNS = ['window_start', 'channel', 'h', 'y_true', 'y_pred']


@dataclass(frozen=True)
class FinetuneConfig:
    horizon: int = 96
    lr: float = 1e-4
    epochs: int = 10
    batch_size: int = 64
    seed: Optional[int] = None
    mode: str = 'full'
    use_csa: bool = True
    aggregation: str = 'mean'
    loss_threshold: float = 1.0
    naive_period: int = 24

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigurationError(f"finetune.horizon must be at least 1, got {self.horizon}")
        if self.mode not in FINETUNE_MODES:
            raise ConfigurationError(f"finetune.mode must be one of {FINETUNE_MODES}, got {self.mode!r}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigurationError(f"finetune.aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")


@dataclass
class ForecastRecord:
    window_start: int
    channel: int
    y_true: np.ndarray
    y_pred: np.ndarray


class CrossScaleHead:
    """
    Registers `csa.scale_tags` [L, d], the `csa.block` transformer block,
    one flatten-linear head per hierarchy `head.h{l}` and the `head.mix`
    logits used by learned aggregation
    """

    def __init__(self, params: ModelParams, config: EncoderConfig, token_counts: Sequence[int], horizon: int,
                 rng: np.random.Generator):
        d = config.d_model
        params.weight('csa.scale_tags', (config.hierarchies, d), rng)
        TransformerBlock(params, 'csa.block', config, rng)
        for level, tokens in enumerate(token_counts, start=1):
            params.weight(f"head.h{level}.weight", (tokens * d, horizon), rng)
            params.zeros(f"head.h{level}.bias", (horizon,))
        params.zeros('head.mix', (config.hierarchies,))


def csa_forward(
    z: MultiScaleFeatures,
    params: ModelParams,
    config: EncoderConfig,
    mode: str = 'eval',
    rng: Optional[np.random.Generator] = None,
    use_csa: bool = True,
) -> MultiScaleFeatures:
    if not use_csa:
        return z
    tags = params['csa.scale_tags']
    tagged = [add(level_features, slice_axis(tags, 0, level, level + 1)) for level, level_features in enumerate(z)]
    joined = concat(tagged, axis=-2)
    attended = transformer_block(joined, params, 'csa.block', config, mode, rng)
    refined, start = [], 0
    for level_features in z:
        count = level_features.shape[-2]
        refined.append(slice_axis(attended, attended.ndim - 2, start, start + count))
        start += count
    return MultiScaleFeatures(refined)


def forecast(z_refined: MultiScaleFeatures, params: ModelParams, horizon: int,
             aggregation: str = 'mean') -> Tuple[Tensor, List[Tensor]]:
    """
    Per-scale flatten-linear forecasts and their aggregate

    Returns:
        (aggregated forecast [batch, H], per-scale forecasts [batch, H] each)
    """
    per_scale = []
    for level, features in enumerate(z_refined, start=1):
        weight, bias = params[f"head.h{level}.weight"], params[f"head.h{level}.bias"]
        batch, tokens, width = features.shape
        if weight.shape[0] != tokens * width:
            raise ConfigurationError(
                f"head {level} expects {weight.shape[0]} inputs, hierarchy {level} provides {tokens} x {width}"
            )
        if weight.shape[1] != horizon:
            raise ConfigurationError(f"head {level} forecasts {weight.shape[1]} steps, configured horizon is {horizon}")
        per_scale.append(linear(reshape(features, (batch, tokens * width)), weight, bias))

    if aggregation == 'learned':
        mix = softmax_rows(params['head.mix'])
        total = mul(per_scale[0], slice_axis(mix, 0, 0, 1))
        for level, output in enumerate(per_scale[1:], start=1):
            total = add(total, mul(output, slice_axis(mix, 0, level, level + 1)))
        return total, per_scale

    total = per_scale[0]
    for output in per_scale[1:]:
        total = add(total, output)
    return mul(total, 1.0 / len(per_scale)), per_scale


def forward_windows(model: 'HiMTMModel', windows: np.ndarray, config: FinetuneConfig, mode: str = 'eval',
                    rng: Optional[np.random.Generator] = None) -> Tensor:
    """Forecast [batch, H] for [batch, lookback] windows"""
    tokens, positions = full_tokens(windows, model.patch)
    if config.mode == 'linear_probe':
        with no_recording():
            z = model.features(tokens, positions, 'eval')
    else:
        z = model.features(tokens, positions, mode, rng)
    refined = csa_forward(z, model.params, model.encoder_config, mode, rng, config.use_csa)
    y_hat, _ = forecast(refined, model.params, config.horizon, config.aggregation)
    return y_hat


def predict(model: 'HiMTMModel', windows: np.ndarray, config: FinetuneConfig, batch_size: Optional[int] = None) -> np.ndarray:
    """Eval-mode forecasts for every window, computed off the tape"""
    batch_size = batch_size or config.batch_size
    outputs = []
    with no_recording():
        for start in range(0, len(windows), batch_size):
            outputs.append(forward_windows(model, windows[start:start + batch_size], config, 'eval').data)
    if not outputs:
        return np.zeros((0, config.horizon))
    return np.concatenate(outputs, axis=0)


def forecast_metrics(y_pred: np.ndarray, y_true: np.ndarray) -> Tuple[float, float]:
    """(MSE, MAE) over every horizon step, window and channel"""
    y_pred, y_true = np.asarray(y_pred, dtype=np.float64), np.asarray(y_true, dtype=np.float64)
    if y_pred.shape != y_true.shape:
        raise ShapeError(f"prediction shape {y_pred.shape} differs from target shape {y_true.shape}")
    if y_pred.size == 0:
        raise DataError("cannot compute metrics on an empty split")
    error = y_pred - y_true
    return float(np.mean(error * error)), float(np.mean(np.abs(error)))


def _metric_row(epoch: int, split: str, y_pred: np.ndarray, y_true: np.ndarray, threshold: float) -> dict:
    mse, mae = forecast_metrics(y_pred, y_true)
    loss = smooth_l1(Tensor(y_pred), Tensor(y_true), threshold).item()
    return {'epoch': epoch, 'split': split, 'mse': mse, 'mae': mae, 'loss': loss}


def evaluate(model: 'HiMTMModel', windows: 'WindowSet', config: FinetuneConfig, epoch: int = 0, split: str = 'test') -> dict:
    if len(windows) == 0:
        raise DataError(f"{split} split yields no windows; nothing to evaluate")
    predictions = predict(model, windows.x, config)
    return _metric_row(epoch, split, predictions, windows.y, config.loss_threshold)


def naive_repeat_forecast(x: np.ndarray, horizon: int, period: int) -> np.ndarray:
    """Repeat the last `period` observed values of each window across the horizon"""
    x = np.asarray(x, dtype=np.float64)
    if not 1 <= period <= x.shape[-1]:
        raise ConfigurationError(f"naive period {period} must lie in [1, lookback={x.shape[-1]}]")
    last = x[..., -period:]
    repeats = -(-horizon // period)
    return np.tile(last, repeats)[..., :horizon]


def evaluate_naive(windows: 'WindowSet', period: int, threshold: float = 1.0, epoch: int = 0,
                   split: str = 'test_naive') -> dict:
    if len(windows) == 0:
        raise DataError("cannot evaluate the naive baseline on an empty split")
    predictions = naive_repeat_forecast(windows.x, windows.y.shape[-1], period)
    return _metric_row(epoch, split, predictions, windows.y, threshold)


def forecast_records(windows: 'WindowSet', predictions: np.ndarray) -> List[ForecastRecord]:
    if len(windows) != len(predictions):
        raise ShapeError(f"{len(predictions)} predictions for {len(windows)} windows")
    return [
        ForecastRecord(int(start), int(channel), y_true, y_pred)
        for start, channel, y_true, y_pred in zip(windows.starts, windows.channels, windows.y, predictions)
    ]


def records_to_rows(records: Sequence[ForecastRecord]) -> List[dict]:
    rows = []
    for record in records:
        for step, (truth, pred) in enumerate(zip(record.y_true, record.y_pred), start=1):
            rows.append({
                'window_start': record.window_start,
                'channel': record.channel,
                'h': step,
                'y_true': float(truth),
                'y_pred': float(pred),
            })
    return rows


class Finetuner:
    """Supervised training of the forecasting path with best-validation selection"""

    def __init__(self, model: 'HiMTMModel', config: FinetuneConfig, seed: int):
        from .model import BACKBONE_PREFIXES, HEAD_PREFIXES

        self.model = model
        self.config = config
        self.shuffle_rng = derive_rng(seed, 'shuffle')
        self.dropout_rng = derive_rng(seed, 'dropout')
        self.optimizer = AdamState(lr=config.lr)
        prefixes = HEAD_PREFIXES if config.mode == 'linear_probe' else BACKBONE_PREFIXES + HEAD_PREFIXES
        self.trainable = model.params.subset(prefixes)
        self.tape = Tape()
        self.best_epoch = 0
        self.best_val_mse = np.inf

    def train_step(self, x: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
        self.model.params.zero_grad()
        self.tape.reset()
        with recording(self.tape):
            y_hat = forward_windows(self.model, x, self.config, 'train', self.dropout_rng)
            loss = smooth_l1(y_hat, Tensor(y), self.config.loss_threshold)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericalError(f"fine-tuning loss is {value}")
        backward(loss)
        grads = {name: tensor.grad for name, tensor in self.trainable.items()}
        adam_step(self.trainable, grads, self.optimizer)
        return value, y_hat.data

    def fit(self, train: 'WindowSet', val: 'WindowSet', epochs: Optional[int] = None) -> List[dict]:
        """
        Train for `epochs` epochs and restore the parameters of the epoch with
        the lowest validation MSE

        Returns:
            Metric rows (train and val per epoch)
        """
        epochs = epochs if epochs is not None else self.config.epochs
        batch_size = self.config.batch_size
        rows: List[dict] = []
        best_state: Optional[Dict[str, np.ndarray]] = None
        for epoch in range(1, epochs + 1):
            order = self.shuffle_rng.permutation(len(train))
            losses, predictions = [], np.empty_like(train.y)
            for start in range(0, len(order), batch_size):
                rows_idx = order[start:start + batch_size]
                loss, y_hat = self.train_step(train.x[rows_idx], train.y[rows_idx])
                losses.append(loss * len(rows_idx))
                predictions[rows_idx] = y_hat
            mse, mae = forecast_metrics(predictions, train.y)
            rows.append({'epoch': epoch, 'split': 'train', 'mse': mse, 'mae': mae, 'loss': sum(losses) / len(train)})

            if len(val):
                val_row = evaluate(self.model, val, self.config, epoch, 'val')
                rows.append(val_row)
                score = val_row['mse']
            else:
                score = mse
            if score < self.best_val_mse:
                self.best_val_mse = score
                self.best_epoch = epoch
                best_state = self.model.params.snapshot()
            logger.info(f"finetune epoch {epoch}/{epochs}: train mse {mse:.6f}, selection mse {score:.6f}")

        if best_state is not None:
            self.model.params.restore(best_state)
            logger.info(f"restored best epoch {self.best_epoch} (mse {self.best_val_mse:.6f})")
        return rows


@dataclass
class FinetuneResult:
    model: 'HiMTMModel'
    rows: List[dict]
    best_epoch: int
    test: dict
    naive: dict
    metrics_path: Optional[Path] = None
    checkpoint_path: Optional[Path] = None
    extra: dict = field(default_factory=dict)


def finetune_run(
    dataset: 'PreparedDataset',
    config: 'RunConfig',
    checkpoint_path: Optional[Path] = None,
    output_dir: Optional[Path] = None,
    model: Optional['HiMTMModel'] = None,
) -> FinetuneResult:
    """
    Fine-tune from a pre-trained checkpoint (or an in-memory model, or a
    random initialisation when neither is given) and evaluate on the test split
    """
    from .artifacts import check_geometry, load_checkpoint, save_checkpoint, write_table
    from .model import BACKBONE_PREFIXES, HiMTMModel

    if model is None:
        model = HiMTMModel.from_config(config)
        if checkpoint_path is not None:
            checkpoint = load_checkpoint(checkpoint_path)
            check_geometry(checkpoint.config, config)
            loaded = model.params.restore(checkpoint.arrays, BACKBONE_PREFIXES)
            logger.info(f"loaded {len(loaded)} encoder tensors from {checkpoint_path} ({checkpoint.stage} checkpoint)")
        else:
            logger.info("no pre-trained checkpoint given: fine-tuning from random initialisation")

    lookback, horizon, stride = config.data.lookback, config.finetune.horizon, config.data.stride
    train = dataset.sample_windows('train', lookback, horizon, stride)
    val = dataset.sample_windows('val', lookback, horizon, stride)
    test = dataset.sample_windows('test', lookback, horizon, stride)
    if len(train) == 0:
        raise DataError(f"train split yields no (lookback={lookback}, horizon={horizon}) windows")

    seed = config.finetune.seed if config.finetune.seed is not None else config.seed
    trainer = Finetuner(model, config.finetune, seed)
    logger.info(f"fine-tuning ({config.finetune.mode}) on {len(train)} windows, validating on {len(val)}")
    rows = trainer.fit(train, val)

    test_row = evaluate(model, test, config.finetune, trainer.best_epoch, 'test')
    naive_row = evaluate_naive(test, config.finetune.naive_period, config.finetune.loss_threshold, trainer.best_epoch)
    rows.extend([test_row, naive_row])
    logger.info(
        f"test mse {test_row['mse']:.6f} mae {test_row['mae']:.6f} "
        f"(naive mse {naive_row['mse']:.6f} mae {naive_row['mae']:.6f})"
    )

    result = FinetuneResult(model, rows, trainer.best_epoch, test_row, naive_row)
    if output_dir is not None:
        output_dir = Path(output_dir)
        result.metrics_path = write_table(output_dir / 'metrics.csv', rows, config, METRIC_COLUMNS)
        result.checkpoint_path = save_checkpoint(
            output_dir / 'finetune.ckpt.npz', model.params, config, stage='finetune',
            rng_states={'shuffle': trainer.shuffle_rng.bit_generator.state,
                        'dropout': trainer.dropout_rng.bit_generator.state},
            extra={'best_epoch': trainer.best_epoch},
        )
    return result
