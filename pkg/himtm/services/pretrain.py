"""
Masked pre-training with hierarchical self-distillation

The student encoder sees the visible patches, the teacher (same weights,
eval mode, stop-gradient) sees the masked ones. Per hierarchy, a decoder
turns learnable masked-slot queries into predicted teacher features and
reconstructed raw segments. The objective is alpha * sum L_D + beta * sum L_R.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple

import numpy as np

from ..exceptions import ConfigurationError, ContractError, DataError, NumericalError
from ..utils import derive_rng
from .hmt_encoder import (
    AttentionWeights,
    EncoderConfig,
    MultiHeadAttention,
    MultiScaleFeatures,
    TransformerBlock,
    attention,
    transformer_block,
)
from .parameters import ModelParams
from .patching import MaskedBatch, PatchSpec, build_masked_batch
from .tensor_engine import (
    AdamState,
    Tape,
    Tensor,
    adam_step,
    add,
    backward,
    batch_norm,
    cosine_distance,
    embedding,
    linear,
    mean,
    mul,
    no_recording,
    recording,
    smooth_l1,
    stop_gradient,
)

if TYPE_CHECKING:
    from .data import PreparedDataset
    from .model import HiMTMModel
    from .run_config import RunConfig

logger = logging.getLogger(__name__)

DISTILL_METRICS = ('smooth_l1', 'cosine')


@dataclass(frozen=True)
class PretrainConfig:
    mask_ratio: float = 0.5
    alpha: float = 1.0
    beta: float = 1.0
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-4
    seed: Optional[int] = None
    use_hsd: bool = True
    use_ded: bool = True
    distill_metric: str = 'smooth_l1'
    detach_decoder_input: bool = False
    loss_threshold: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigurationError(f"pretrain.mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError(f"loss weights must be non-negative (alpha={self.alpha}, beta={self.beta})")
        if self.distill_metric not in DISTILL_METRICS:
            raise ConfigurationError(f"pretrain.distill_metric must be one of {DISTILL_METRICS}, got {self.distill_metric!r}")

    @property
    def effective_alpha(self) -> float:
        return self.alpha if self.use_hsd else 0.0


@dataclass
class LossReport:
    distill: List[float]
    recon: List[float]
    alpha: float
    beta: float
    weighted_total: float
    epoch: int = 0
    step: int = 0

    @property
    def distill_total(self) -> float:
        return sum(self.distill)

    @property
    def recon_total(self) -> float:
        return sum(self.recon)

    def as_row(self) -> dict:
        row = {
            'epoch': self.epoch,
            'step': self.step,
            'weighted_total': self.weighted_total,
            'distill_total': self.distill_total,
            'recon_total': self.recon_total,
        }
        for level, (d, r) in enumerate(zip(self.distill, self.recon), start=1):
            row[f"distill_{level}"] = d
            row[f"recon_{level}"] = r
        return row


class MaskedDecoder:
    """
    One decoder per hierarchy, registered under `decoder.h{l}.`: a learnable
    query table indexed by scale-l slot position, one cross-attention layer
    over the student features, one self-attention block and a linear head
    producing SP * 2^(l-1) raw values per slot.
    """

    def __init__(self, params: ModelParams, patch: PatchSpec, config: EncoderConfig, n_fine: int, rng: np.random.Generator):
        self.params = params
        self.patch = patch
        self.config = config
        d = config.d_model
        self.slot_counts = [n_fine // 2 ** (level - 1) for level in range(1, config.hierarchies + 1)]
        for level, slots in enumerate(self.slot_counts, start=1):
            prefix = f"decoder.h{level}"
            params.add(f"{prefix}.queries", rng.normal(0.0, 0.02, size=(slots, d)))
            MultiHeadAttention(params, f"{prefix}.cross", d, config.heads, rng)
            params.norm(f"{prefix}.cross_norm", d)
            TransformerBlock(params, f"{prefix}.block", config, rng)
            params.weight(f"{prefix}.head.weight", (d, patch.segment_len(level)), rng)
            params.zeros(f"{prefix}.head.bias", (patch.segment_len(level),))

    def __call__(self, z_v: MultiScaleFeatures, slot_positions: Sequence[np.ndarray], mode: str = 'train',
                 rng: Optional[np.random.Generator] = None, use_ded: bool = True,
                 detach_input: bool = False) -> Tuple[List[Tensor], List[Tensor]]:
        return decode(z_v, slot_positions, self.params, self.config, mode, rng, use_ded, detach_input)


def decode(
    z_v: MultiScaleFeatures,
    slot_positions: Sequence[np.ndarray],
    params: ModelParams,
    config: EncoderConfig,
    mode: str = 'train',
    rng: Optional[np.random.Generator] = None,
    use_ded: bool = True,
    detach_input: bool = False,
) -> Tuple[List[Tensor], List[Tensor]]:
    """
    Predict masked-slot features and raw segments at every hierarchy

    Returns:
        (Z_hat per hierarchy [batch, m_l, d], X_hat per hierarchy [batch, m_l, SP * 2^(l-1)])
    """
    p = params
    z_hat, x_hat = [], []
    for level, (features, slots) in enumerate(zip(z_v, slot_positions), start=1):
        prefix = f"decoder.h{level}"
        table = p[f"{prefix}.queries"]
        slots = np.asarray(slots, dtype=np.int64)
        if slots.size and slots.max() >= table.shape[0]:
            raise ConfigurationError(
                f"masked slot {slots.max()} at hierarchy {level} is outside the query table of {table.shape[0]} rows"
            )
        queries = embedding(table, slots)
        key_value = stop_gradient(features) if detach_input else features
        if use_ded:
            weights = AttentionWeights(
                p[f"{prefix}.cross.w_q"], p[f"{prefix}.cross.w_k"], p[f"{prefix}.cross.w_v"],
                p[f"{prefix}.cross.w_o"], p[f"{prefix}.cross.b_o"],
            )
            crossed = attention(queries, key_value, weights, config.heads, mode, config.dropout, rng)
            slot_features = batch_norm(
                add(queries, crossed), p[f"{prefix}.cross_norm.gamma"], p[f"{prefix}.cross_norm.beta"],
                p.norms[f"{prefix}.cross_norm"], mode,
            )
            predicted = transformer_block(slot_features, p, f"{prefix}.block", config, mode, rng)
        else:
            predicted = add(queries, mean(key_value, axis=1, keepdims=True))
        z_hat.append(predicted)
        x_hat.append(linear(predicted, p[f"{prefix}.head.weight"], p[f"{prefix}.head.bias"]))
    return z_hat, x_hat


def hsd_loss(z_m: Sequence[Tensor], z_hat: Sequence[Tensor], metric: str = 'smooth_l1', threshold: float = 1.0) -> List[Tensor]:
    """Per-hierarchy distance between detached teacher features and decoder predictions"""
    if len(z_m) != len(z_hat):
        raise ContractError(f"teacher has {len(z_m)} hierarchies, decoder produced {len(z_hat)}")
    losses = []
    for level, (teacher, predicted) in enumerate(zip(z_m, z_hat), start=1):
        if teacher.shape != predicted.shape:
            raise ContractError(f"hierarchy {level}: teacher features {teacher.shape} vs predicted {predicted.shape}")
        target = stop_gradient(teacher)
        if metric == 'cosine':
            losses.append(cosine_distance(predicted, target))
        else:
            losses.append(smooth_l1(predicted, target, threshold))
    return losses


def recon_loss(targets: Sequence[np.ndarray], x_hat: Sequence[Tensor], threshold: float = 1.0) -> List[Tensor]:
    if len(targets) != len(x_hat):
        raise ContractError(f"{len(targets)} target hierarchies vs {len(x_hat)} reconstructions")
    losses = []
    for level, (target, predicted) in enumerate(zip(targets, x_hat), start=1):
        target = np.asarray(target, dtype=np.float64)
        if target.shape != predicted.shape:
            raise ContractError(f"hierarchy {level}: target {target.shape} vs reconstruction {predicted.shape}")
        losses.append(smooth_l1(predicted, Tensor(target), threshold))
    return losses


def _sum(terms: Sequence[Tensor]) -> Tensor:
    total = terms[0]
    for term in terms[1:]:
        total = add(total, term)
    return total


class Pretrainer:
    """Runs masked pre-training steps on one model instance (single-threaded)"""

    def __init__(self, model: 'HiMTMModel', config: PretrainConfig, seed: int):
        self.model = model
        self.patch = model.patch
        self.config = config
        self.mask_rng = derive_rng(seed, 'mask')
        self.shuffle_rng = derive_rng(seed, 'shuffle')
        self.dropout_rng = derive_rng(seed, 'dropout')
        self.optimizer = AdamState(lr=config.lr)
        self.trainable = model.params.subset(['embed.', 'encoder.', 'decoder.'])
        self.tape = Tape()
        self.history: List[LossReport] = []

    def rng_states(self) -> dict:
        return {
            'mask': self.mask_rng.bit_generator.state,
            'shuffle': self.shuffle_rng.bit_generator.state,
            'dropout': self.dropout_rng.bit_generator.state,
        }

    def student_forward(self, tokens, positions, mode: str = 'train',
                        rng: Optional[np.random.Generator] = None) -> MultiScaleFeatures:
        if np.shape(tokens)[-2] == 0:
            raise ConfigurationError("no visible patches left: the mask ratio is too high for this window")
        return self.model.features(tokens, positions, mode, rng)

    def teacher_forward(self, tokens, positions) -> MultiScaleFeatures:
        """Shared weights, eval-mode BatchNorm, outputs detached from the tape"""
        if np.shape(tokens)[-2] == 0:
            raise ConfigurationError("no masked patches: the mask ratio is too low for this window")
        features = self.model.features(tokens, positions, 'eval')
        return MultiScaleFeatures([stop_gradient(level) for level in features])

    def compute_loss(self, batch: MaskedBatch, mode: str = 'train', rng: Optional[np.random.Generator] = None,
                     teacher_on_tape: bool = True,
                     teacher_features: Optional[MultiScaleFeatures] = None) -> Tuple[Tensor, LossReport]:
        """
        Weighted pre-training loss of one masked batch

        Args:
            teacher_on_tape: run the teacher while recording (its outputs are detached either way)
            teacher_features: precomputed teacher outputs, used as-is
        """
        config = self.config
        if np.shape(batch.masked)[-2] == 0:
            raise ConfigurationError("no masked patches: the mask ratio is too low for this window")
        alpha = config.effective_alpha
        z_m = None
        if config.use_hsd and teacher_features is not None:
            z_m = MultiScaleFeatures([stop_gradient(level) for level in teacher_features])
        elif config.use_hsd:
            if teacher_on_tape:
                z_m = self.teacher_forward(batch.masked, batch.masked_positions)
            else:
                with no_recording():
                    z_m = self.teacher_forward(batch.masked, batch.masked_positions)
        z_v = self.student_forward(batch.visible, batch.visible_positions, mode, rng)
        z_hat, x_hat = self.model.decoder(
            z_v, batch.slot_positions, mode, rng, config.use_ded, config.detach_decoder_input
        )
        recon = recon_loss(batch.targets, x_hat, config.loss_threshold)
        if z_m is not None:
            distill = hsd_loss(z_m, z_hat, config.distill_metric, config.loss_threshold)
            total = add(mul(_sum(distill), alpha), mul(_sum(recon), config.beta))
            distill_values = [term.item() for term in distill]
        else:
            total = mul(_sum(recon), config.beta)
            distill_values = [0.0] * len(recon)
        report = LossReport(
            distill=distill_values,
            recon=[term.item() for term in recon],
            alpha=alpha,
            beta=config.beta,
            weighted_total=total.item(),
        )
        return total, report

    def train_step(self, batch: MaskedBatch, epoch: int = 0, step: int = 0) -> LossReport:
        self.model.params.zero_grad()
        self.tape.reset()
        with recording(self.tape):
            loss, report = self.compute_loss(batch, 'train', self.dropout_rng)
        if not np.isfinite(report.weighted_total):
            raise NumericalError(f"pre-training loss is {report.weighted_total} at epoch {epoch}, step {step}")
        backward(loss)
        grads = {name: tensor.grad for name, tensor in self.trainable.items()}
        adam_step(self.trainable, grads, self.optimizer)
        report.epoch, report.step = epoch, step
        self.history.append(report)
        return report

    def fit(self, windows: np.ndarray, epochs: Optional[int] = None) -> List[float]:
        """Train on [n_samples, lookback] windows; returns the mean weighted loss per epoch"""
        epochs = epochs if epochs is not None else self.config.epochs
        batch_size = self.config.batch_size
        epoch_losses = []
        for epoch in range(1, epochs + 1):
            order = self.shuffle_rng.permutation(len(windows))
            reports = []
            for step, start in enumerate(range(0, len(order), batch_size), start=1):
                rows = windows[order[start:start + batch_size]]
                batch = build_masked_batch(rows, self.patch, self.config.mask_ratio, self.mask_rng)
                reports.append(self.train_step(batch, epoch, step))
            epoch_loss = float(np.mean([r.weighted_total for r in reports]))
            epoch_losses.append(epoch_loss)
            logger.info(
                f"pretrain epoch {epoch}/{epochs}: loss {epoch_loss:.6f} "
                f"(distill {np.mean([r.distill_total for r in reports]):.6f}, "
                f"recon {np.mean([r.recon_total for r in reports]):.6f})"
            )
        return epoch_losses


@dataclass
class PretrainResult:
    model: 'HiMTMModel'
    history: List[LossReport]
    epoch_losses: List[float]
    checkpoint_path: Optional[Path] = None
    history_path: Optional[Path] = None


def pretrain_run(dataset: 'PreparedDataset', config: 'RunConfig', output_dir: Optional[Path] = None,
                 model: Optional['HiMTMModel'] = None) -> PretrainResult:
    """Pre-train on the train split and persist the checkpoint and loss history"""
    from .artifacts import save_checkpoint, write_table
    from .model import HiMTMModel

    model = model if model is not None else HiMTMModel.from_config(config)
    windows = dataset.sample_windows('train', config.data.lookback, 0, config.data.stride)
    if len(windows) == 0:
        raise DataError(f"train split yields no windows of length {config.data.lookback}")
    seed = config.pretrain.seed if config.pretrain.seed is not None else config.seed
    trainer = Pretrainer(model, config.pretrain, seed)
    logger.info(f"pre-training on {len(windows)} channel windows for {config.pretrain.epochs} epochs")
    epoch_losses = trainer.fit(windows.x)

    result = PretrainResult(model, trainer.history, epoch_losses)
    if output_dir is not None:
        output_dir = Path(output_dir)
        result.checkpoint_path = save_checkpoint(
            output_dir / 'pretrain.ckpt.npz', model.params, config, stage='pretrain', rng_states=trainer.rng_states()
        )
        result.history_path = write_table(
            output_dir / 'pretrain_history.csv', [r.as_row() for r in trainer.history], config
        )
        logger.info(f"pre-training artifacts written to {output_dir}")
    return result
