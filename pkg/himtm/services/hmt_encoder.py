"""
Hierarchical multi-scale transformer

Each hierarchy runs a stack of post-norm transformer blocks, records its
output, then merges adjacent token pairs through an affine map before the
next hierarchy.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..exceptions import ConfigurationError, ContractError
from .parameters import ModelParams
from .tensor_engine import (
    Tensor,
    add,
    batch_norm,
    dropout,
    gelu,
    linear,
    matmul,
    mul,
    reshape,
    softmax_rows,
    transpose,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderConfig:
    layers_per_hierarchy: Tuple[int, ...] = (2, 2, 2)
    heads: int = 4
    d_model: int = 128
    d_ff: int = 256
    dropout: float = 0.1

    def __post_init__(self):
        if not self.layers_per_hierarchy or min(self.layers_per_hierarchy) < 1:
            raise ConfigurationError(f"every hierarchy needs at least one layer, got {list(self.layers_per_hierarchy)}")
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigurationError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def hierarchies(self) -> int:
        return len(self.layers_per_hierarchy)


@dataclass
class MultiScaleFeatures:
    """One [batch, tokens_l, d_model] tensor per hierarchy, tokens halving each level"""
    levels: List[Tensor] = field(default_factory=list)

    def __getitem__(self, index: int) -> Tensor:
        return self.levels[index]

    def __len__(self):
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)

    @property
    def shapes(self) -> List[Tuple[int, ...]]:
        return [level.shape for level in self.levels]


@dataclass
class AttentionWeights:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_o: Tensor


def _split_heads(x: Tensor, heads: int) -> Tensor:
    batch, tokens, width = x.shape
    return transpose(reshape(x, (batch, tokens, heads, width // heads)), (0, 2, 1, 3))


def attention(
    query,
    key_value,
    weights: AttentionWeights,
    heads: int,
    mode: str = 'eval',
    dropout_rate: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    trace: Optional[List[np.ndarray]] = None,
) -> Tensor:
    """
    Multi-head attention: Softmax(QW_Q (KW_K)^T / sqrt(d_k)) VW_V per head,
    heads concatenated and projected by W_O

    Args:
        query: [batch, n_q, d] (or [n_q, d])
        key_value: [batch, n_k, d] (or [n_k, d])
        trace: when given, the attention weights of this call are appended to it
    """
    d_model = weights.w_q.shape[0]
    if d_model % heads:
        raise ConfigurationError(f"d_model={d_model} is not divisible by heads={heads}")
    squeeze = query.ndim == 2
    if squeeze:
        query = reshape(query, (1,) + query.shape)
        key_value = reshape(key_value, (1,) + key_value.shape)
    batch, n_q, _ = query.shape
    d_k = d_model // heads

    q = _split_heads(matmul(query, weights.w_q), heads)
    k = _split_heads(matmul(key_value, weights.w_k), heads)
    v = _split_heads(matmul(key_value, weights.w_v), heads)
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d_k))
    probs = softmax_rows(scores)
    if trace is not None:
        trace.append(probs.data)
    probs = dropout(probs, dropout_rate, rng, mode == 'train')
    context = transpose(matmul(probs, v), (0, 2, 1, 3))
    out = linear(reshape(context, (batch, n_q, d_model)), weights.w_o, weights.b_o)
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


class MultiHeadAttention:
    def __init__(self, params: ModelParams, prefix: str, d_model: int, heads: int, rng: np.random.Generator):
        self.params = params
        self.prefix = prefix
        self.heads = heads
        for name in ('w_q', 'w_k', 'w_v', 'w_o'):
            params.weight(f"{prefix}.{name}", (d_model, d_model), rng)
        params.zeros(f"{prefix}.b_o", (d_model,))

    @property
    def weights(self) -> AttentionWeights:
        p = self.params
        return AttentionWeights(
            p[f"{self.prefix}.w_q"], p[f"{self.prefix}.w_k"], p[f"{self.prefix}.w_v"],
            p[f"{self.prefix}.w_o"], p[f"{self.prefix}.b_o"],
        )

    def __call__(self, query, key_value, mode='eval', dropout_rate=0.0, rng=None, trace=None) -> Tensor:
        return attention(query, key_value, self.weights, self.heads, mode, dropout_rate, rng, trace)


class TransformerBlock:
    """Y1 = BN(X + MSA(X, X, X)); Y = BN(Y1 + FFN(Y1)), FFN = linear, GELU, linear"""

    def __init__(self, params: ModelParams, prefix: str, config: EncoderConfig, rng: np.random.Generator):
        self.params = params
        self.prefix = prefix
        self.config = config
        d, d_ff = config.d_model, config.d_ff
        self.attn = MultiHeadAttention(params, f"{prefix}.attn", d, config.heads, rng)
        params.norm(f"{prefix}.norm1", d)
        params.weight(f"{prefix}.ffn.w1", (d, d_ff), rng)
        params.zeros(f"{prefix}.ffn.b1", (d_ff,))
        params.weight(f"{prefix}.ffn.w2", (d_ff, d), rng)
        params.zeros(f"{prefix}.ffn.b2", (d,))
        params.norm(f"{prefix}.norm2", d)

    def __call__(self, x: Tensor, mode: str = 'eval', rng: Optional[np.random.Generator] = None, trace=None) -> Tensor:
        return transformer_block(x, self.params, self.prefix, self.config, mode, rng, trace)


def transformer_block(
    x: Tensor,
    params: ModelParams,
    prefix: str,
    config: EncoderConfig,
    mode: str = 'eval',
    rng: Optional[np.random.Generator] = None,
    trace: Optional[List[np.ndarray]] = None,
) -> Tensor:
    p = params
    weights = AttentionWeights(
        p[f"{prefix}.attn.w_q"], p[f"{prefix}.attn.w_k"], p[f"{prefix}.attn.w_v"],
        p[f"{prefix}.attn.w_o"], p[f"{prefix}.attn.b_o"],
    )
    attended = attention(x, x, weights, config.heads, mode, config.dropout, rng, trace)
    y1 = batch_norm(
        add(x, attended), p[f"{prefix}.norm1.gamma"], p[f"{prefix}.norm1.beta"], p.norms[f"{prefix}.norm1"], mode
    )
    hidden = gelu(linear(y1, p[f"{prefix}.ffn.w1"], p[f"{prefix}.ffn.b1"]))
    ffn = dropout(linear(hidden, p[f"{prefix}.ffn.w2"], p[f"{prefix}.ffn.b2"]), config.dropout, rng, mode == 'train')
    return batch_norm(
        add(y1, ffn), p[f"{prefix}.norm2.gamma"], p[f"{prefix}.norm2.beta"], p.norms[f"{prefix}.norm2"], mode
    )


def merge(z: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Row j of the output is M . concat(Z[2j], Z[2j+1])"""
    tokens, width = z.shape[-2], z.shape[-1]
    if tokens % 2:
        raise ContractError(f"merge needs an even token count, got {tokens} (masking split a coarse patch?)")
    pairs = reshape(z, z.shape[:-2] + (tokens // 2, 2 * width))
    return linear(pairs, weight, bias)


def encode(
    z0: Tensor,
    config: EncoderConfig,
    params: ModelParams,
    mode: str = 'eval',
    rng: Optional[np.random.Generator] = None,
    prefix: str = 'encoder',
    trace: Optional[List[np.ndarray]] = None,
) -> MultiScaleFeatures:
    """Run every hierarchy on Z0 [batch, n, d] and return the per-hierarchy outputs"""
    levels = config.hierarchies
    tokens = z0.shape[-2]
    if tokens % 2 ** (levels - 1):
        raise ContractError(f"{tokens} input tokens are not divisible by 2^(L-1) = {2 ** (levels - 1)}")
    features = MultiScaleFeatures()
    current = z0
    for level, depth in enumerate(config.layers_per_hierarchy, start=1):
        for layer in range(depth):
            current = transformer_block(current, params, f"{prefix}.h{level}.layer{layer}", config, mode, rng, trace)
        features.levels.append(current)
        if level < levels:
            current = merge(current, params[f"{prefix}.h{level}.merge.weight"], params[f"{prefix}.h{level}.merge.bias"])
    return features


class HierarchicalEncoder:
    """Registers the per-hierarchy blocks and merges under `encoder.`"""

    def __init__(self, params: ModelParams, config: EncoderConfig, rng: np.random.Generator, prefix: str = 'encoder'):
        self.params = params
        self.config = config
        self.prefix = prefix
        d = config.d_model
        for level, depth in enumerate(config.layers_per_hierarchy, start=1):
            for layer in range(depth):
                TransformerBlock(params, f"{prefix}.h{level}.layer{layer}", config, rng)
            if level < config.hierarchies:
                params.weight(f"{prefix}.h{level}.merge.weight", (2 * d, d), rng)
                params.zeros(f"{prefix}.h{level}.merge.bias", (d,))

    def __call__(self, z0: Tensor, mode: str = 'eval', rng: Optional[np.random.Generator] = None, trace=None) -> MultiScaleFeatures:
        return encode(z0, self.config, self.params, mode, rng, self.prefix, trace)

    @staticmethod
    def token_counts(n_tokens: int, levels: int) -> Sequence[int]:
        return [n_tokens // 2 ** (level - 1) for level in range(1, levels + 1)]
