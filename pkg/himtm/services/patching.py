"""
Hierarchical patching, coarse-level masking and patch embedding
"""
import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from ..exceptions import ConfigurationError, ContractError, InputTooShortError
from .parameters import ModelParams
from .tensor_engine import Tensor, add, as_tensor, embedding, matmul

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PatchSpec:
    """Coarse patch length P, coarse stride S and sub-patch length SP (all in timesteps)"""
    patch_len: int = 24
    stride: int = 24
    sub_patch_len: int = 6

    def __post_init__(self):
        if min(self.patch_len, self.stride, self.sub_patch_len) < 1:
            raise ConfigurationError(
                f"patch lengths and stride must be positive (P={self.patch_len}, S={self.stride}, SP={self.sub_patch_len})"
            )
        if self.patch_len % self.sub_patch_len:
            raise ConfigurationError(
                f"sub-patch length SP={self.sub_patch_len} does not tile the coarse patch P={self.patch_len}"
            )
        n_sub = self.patch_len // self.sub_patch_len
        if n_sub & (n_sub - 1):
            raise ConfigurationError(f"sub-patches per coarse patch must be a power of two, got {n_sub}")

    @property
    def n_sub(self) -> int:
        return self.patch_len // self.sub_patch_len

    @property
    def hierarchies(self) -> int:
        return int(np.log2(self.n_sub)) + 1

    def segment_len(self, level: int) -> int:
        return self.sub_patch_len * 2 ** (level - 1)

    def n_coarse(self, lookback: int) -> int:
        if lookback < self.patch_len:
            raise InputTooShortError(
                f"window length Lb={lookback} is shorter than the coarse patch length P={self.patch_len}"
            )
        return (lookback - self.patch_len) // self.stride + 1

    def n_fine(self, lookback: int) -> int:
        return self.n_coarse(lookback) * self.n_sub


@dataclass(frozen=True)
class MaskPlan:
    n_coarse: int
    masked_indices: Tuple[int, ...]
    ratio: float
    seed: int

    @property
    def visible_indices(self) -> Tuple[int, ...]:
        hidden = set(self.masked_indices)
        return tuple(i for i in range(self.n_coarse) if i not in hidden)


@dataclass
class PatchSet:
    """Fine tokens of one channel window; token i belongs to coarse patch i // n_sub"""
    fine_tokens: np.ndarray
    coarse_of: np.ndarray
    n_sub: int
    channel_id: int = 0

    @property
    def n_coarse(self) -> int:
        return len(self.fine_tokens) // self.n_sub


@dataclass
class TokenSet:
    """Token values with their original fine-level positions"""
    values: np.ndarray
    positions: np.ndarray

    def __len__(self):
        return len(self.positions)


def segment_series(window: np.ndarray, spec: PatchSpec, channel_id: int = 0) -> PatchSet:
    """Cut a univariate window into coarse patches and split each into n_sub fine tokens"""
    window = np.asarray(window, dtype=np.float64).reshape(-1)
    n_coarse = spec.n_coarse(len(window))
    coarse = np.lib.stride_tricks.sliding_window_view(window, spec.patch_len)[::spec.stride][:n_coarse]
    fine = np.ascontiguousarray(coarse).reshape(n_coarse * spec.n_sub, spec.sub_patch_len)
    coarse_of = np.arange(len(fine)) // spec.n_sub
    return PatchSet(fine, coarse_of, spec.n_sub, channel_id)


def masked_count(ratio: float, n_coarse: int) -> int:
    """round-half-up(ratio * n_coarse)"""
    return int(np.floor(ratio * n_coarse + 0.5))


def make_mask_plan(n_coarse: int, ratio: float, seed: int) -> MaskPlan:
    """
    Hide round-half-up(ratio * n_coarse) coarse patches, drawn uniformly without replacement
    """
    if n_coarse < 2:
        raise ContractError(f"masking needs at least 2 coarse patches, got {n_coarse}")
    if not 0.0 <= ratio <= 1.0:
        raise ContractError(f"mask ratio must lie in [0, 1], got {ratio}")
    count = masked_count(ratio, n_coarse)
    rng = np.random.default_rng(seed)
    masked = np.sort(rng.choice(n_coarse, size=count, replace=False))
    return MaskPlan(n_coarse, tuple(int(i) for i in masked), ratio, seed)


def split_visible_masked(patches: PatchSet, plan: MaskPlan) -> Tuple[TokenSet, TokenSet]:
    if plan.n_coarse != patches.n_coarse:
        raise ContractError(f"mask plan covers {plan.n_coarse} coarse patches, patch set has {patches.n_coarse}")
    hidden = np.isin(patches.coarse_of, plan.masked_indices)
    positions = np.arange(len(patches.fine_tokens))
    visible = TokenSet(patches.fine_tokens[~hidden], positions[~hidden])
    masked = TokenSet(patches.fine_tokens[hidden], positions[hidden])
    return visible, masked


def targets_at_hierarchy(patches: PatchSet, plan: MaskPlan, level: int) -> np.ndarray:
    """Masked raw values regrouped into segments of SP * 2^(level-1) timesteps"""
    levels = int(np.log2(patches.n_sub)) + 1
    if not 1 <= level <= levels:
        raise ContractError(f"hierarchy index must lie in [1, {levels}], got {level}")
    _, masked = split_visible_masked(patches, plan)
    group = 2 ** (level - 1)
    sub_len = patches.fine_tokens.shape[1]
    return masked.values.reshape(len(masked) // group, sub_len * group)


def positions_at_hierarchy(positions: np.ndarray, level: int) -> np.ndarray:
    """Scale-`level` slot indices of a run-aligned fine position sequence (last axis)"""
    group = 2 ** (level - 1)
    return positions[..., ::group] // group


@dataclass
class MaskedBatch:
    visible: np.ndarray
    visible_positions: np.ndarray
    masked: np.ndarray
    masked_positions: np.ndarray
    targets: List[np.ndarray]
    slot_positions: List[np.ndarray]
    plans: List[MaskPlan]


def build_masked_batch(windows: np.ndarray, spec: PatchSpec, ratio: float, rng: np.random.Generator) -> MaskedBatch:
    """Patch and mask every row of a [batch, lookback] array with its own plan"""
    visible, visible_pos, masked, masked_pos, plans = [], [], [], [], []
    targets: List[List[np.ndarray]] = [[] for _ in range(spec.hierarchies)]
    for row in windows:
        patches = segment_series(row, spec)
        plan = make_mask_plan(patches.n_coarse, ratio, int(rng.integers(2 ** 32)))
        x_v, x_m = split_visible_masked(patches, plan)
        visible.append(x_v.values)
        visible_pos.append(x_v.positions)
        masked.append(x_m.values)
        masked_pos.append(x_m.positions)
        group_values = x_m.values
        for level in range(1, spec.hierarchies + 1):
            group = 2 ** (level - 1)
            targets[level - 1].append(group_values.reshape(len(x_m) // group, spec.sub_patch_len * group))
        plans.append(plan)
    masked_positions = np.stack(masked_pos)
    return MaskedBatch(
        visible=np.stack(visible),
        visible_positions=np.stack(visible_pos),
        masked=np.stack(masked),
        masked_positions=masked_positions,
        targets=[np.stack(level_targets) for level_targets in targets],
        slot_positions=[positions_at_hierarchy(masked_positions, level) for level in range(1, spec.hierarchies + 1)],
        plans=plans,
    )


def full_tokens(windows: np.ndarray, spec: PatchSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Unmasked fine tokens [batch, n_fine, SP] and their positions for every row"""
    tokens = np.stack([segment_series(row, spec).fine_tokens for row in windows])
    positions = np.broadcast_to(np.arange(tokens.shape[1]), tokens.shape[:2])
    return tokens, positions


def patch_embed(tokens, positions: np.ndarray, conv_weight: Tensor, conv_bias: Tensor, w_pos: Tensor) -> Tensor:
    """Z0 = Conv1D(tokens) + W_pos[positions]; the kernel spans one sub-patch with stride SP"""
    tokens = as_tensor(tokens)
    positions = np.asarray(positions, dtype=np.int64)
    if tokens.shape[-1] != conv_weight.shape[0]:
        raise ConfigurationError(f"token length {tokens.shape[-1]} differs from the sub-patch length {conv_weight.shape[0]}")
    if positions.size and positions.max() >= w_pos.shape[0]:
        raise ConfigurationError(
            f"fine position {positions.max()} is outside the positional table of {w_pos.shape[0]} rows"
        )
    return add(add(matmul(tokens, conv_weight), conv_bias), embedding(w_pos, positions))


class PatchEmbedding:
    """Learnable sub-patch projection and fine-position table, registered under `embed.`"""

    def __init__(self, params: ModelParams, spec: PatchSpec, d_model: int, n_positions: int, rng: np.random.Generator):
        self.params = params
        self.spec = spec
        if 'embed.conv.weight' not in params:
            params.weight('embed.conv.weight', (spec.sub_patch_len, d_model), rng)
            params.zeros('embed.conv.bias', (d_model,))
            params.zeros('embed.pos', (n_positions, d_model))

    def __call__(self, tokens, positions: np.ndarray) -> Tensor:
        return patch_embed(
            tokens,
            positions,
            self.params['embed.conv.weight'],
            self.params['embed.conv.bias'],
            self.params['embed.pos'],
        )
