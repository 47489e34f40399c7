"""
Finite-difference checks for every differentiable primitive and for the
composed model paths (block, encoder, decoder, cross-scale attention, full
pre-training loss, forecasting loss)
"""
import logging
from dataclasses import replace
from typing import TYPE_CHECKING, Callable, Dict, List, Sequence, Tuple

import numpy as np

from ..exceptions import ConfigurationError
from .data import DatasetSpec
from .finetune import FinetuneConfig, csa_forward, forward_windows
from .hmt_encoder import AttentionWeights, EncoderConfig, MultiScaleFeatures, attention, transformer_block
from .patching import PatchSpec, build_masked_batch, full_tokens
from .pretrain import PretrainConfig, Pretrainer
from .run_config import RunConfig
from .tensor_engine import (
    BatchNormStats,
    GradCheckResult,
    Tensor,
    add,
    batch_norm,
    concat,
    cosine_distance,
    embedding,
    gelu,
    grad_check,
    matmul,
    mean,
    mul,
    no_recording,
    reshape,
    slice_axis,
    smooth_l1,
    softmax_rows,
    sub,
    sum_,
    transpose,
)

if TYPE_CHECKING:
    from .model import HiMTMModel

logger = logging.getLogger(__name__)

CheckFn = Callable[[Sequence[Tensor]], Tensor]

SCALES = {
    # L=2, d=8, 2 heads, 4 fine tokens, 1 masked coarse patch
    'tiny': dict(patch=(4, 4, 2), layers=(1, 1), heads=2, d_model=8, lookback=8, horizon=4, max_elements=None),
    'small': dict(patch=(8, 8, 2), layers=(1, 1, 1), heads=4, d_model=16, lookback=32, horizon=8, max_elements=24),
}


def gradcheck_config(scale: str = 'tiny') -> RunConfig:
    if scale not in SCALES:
        raise ConfigurationError(f"unknown gradcheck scale '{scale}', expected one of {sorted(SCALES)}")
    geometry = SCALES[scale]
    d = geometry['d_model']
    return RunConfig(
        patch=PatchSpec(*geometry['patch']),
        encoder=EncoderConfig(geometry['layers'], geometry['heads'], d, 2 * d, dropout=0.0),
        pretrain=PretrainConfig(mask_ratio=0.5, batch_size=2),
        finetune=FinetuneConfig(horizon=geometry['horizon'], batch_size=2),
        data=DatasetSpec(lookback=geometry['lookback']),
    )


def _leaf(rng: np.random.Generator, shape: Tuple[int, ...], name: str, scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True, name=name)


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum(out * fixed weights), so every output element matters"""
    return sum_(mul(out, Tensor(weights)))


def _projection(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    return rng.normal(size=shape)


def primitive_checks(rng: np.random.Generator) -> Dict[str, Tuple[CheckFn, List[Tensor]]]:
    checks: Dict[str, Tuple[CheckFn, List[Tensor]]] = {}

    a, b = _leaf(rng, (3, 4), 'a'), _leaf(rng, (4,), 'b')
    r = _projection(rng, (3, 4))
    checks['add'] = (lambda p, r=r: _weighted(add(p[0], p[1]), r), [a, b])
    checks['sub'] = (lambda p, r=r: _weighted(sub(p[0], p[1]), r), [_leaf(rng, (3, 4), 'a'), _leaf(rng, (3, 1), 'b')])
    checks['mul'] = (lambda p, r=r: _weighted(mul(p[0], p[1]), r), [_leaf(rng, (3, 4), 'a'), _leaf(rng, (4,), 'b')])

    r = _projection(rng, (2, 3, 5))
    checks['matmul'] = (lambda p, r=r: _weighted(matmul(p[0], p[1]), r), [_leaf(rng, (2, 3, 4), 'a'), _leaf(rng, (4, 5), 'b')])

    r = _projection(rng, (3, 6))
    checks['gelu'] = (lambda p, r=r: _weighted(gelu(p[0]), r), [_leaf(rng, (3, 6), 'x', 2.0)])
    checks['softmax_rows'] = (lambda p, r=r: _weighted(softmax_rows(p[0]), r), [_leaf(rng, (3, 6), 'x')])

    r = _projection(rng, (4, 3, 2))
    checks['transpose'] = (lambda p, r=r: _weighted(transpose(p[0], (2, 1, 0)), r), [_leaf(rng, (2, 3, 4), 'x')])
    r = _projection(rng, (6, 4))
    checks['reshape'] = (lambda p, r=r: _weighted(reshape(p[0], (6, 4)), r), [_leaf(rng, (2, 3, 4), 'x')])
    r = _projection(rng, (2, 5, 3))
    checks['concat'] = (
        lambda p, r=r: _weighted(concat([p[0], p[1]], axis=1), r),
        [_leaf(rng, (2, 2, 3), 'a'), _leaf(rng, (2, 3, 3), 'b')],
    )
    r = _projection(rng, (2, 2, 3))
    checks['slice_axis'] = (lambda p, r=r: _weighted(slice_axis(p[0], 1, 1, 3), r), [_leaf(rng, (2, 4, 3), 'x')])

    indices = np.array([[0, 2, 2], [4, 1, 0]])
    r = _projection(rng, (2, 3, 3))
    checks['embedding'] = (lambda p, r=r: _weighted(embedding(p[0], indices), r), [_leaf(rng, (5, 3), 'table')])

    r = _projection(rng, (2, 4))
    checks['mean'] = (lambda p, r=r: _weighted(mean(p[0], axis=1), r), [_leaf(rng, (2, 3, 4), 'x')])
    checks['smooth_l1'] = (lambda p: smooth_l1(p[0], p[1], 1.0), [_leaf(rng, (4, 5), 'pred', 1.5), _leaf(rng, (4, 5), 'target')])
    checks['cosine_distance'] = (lambda p: cosine_distance(p[0], p[1]), [_leaf(rng, (3, 4), 'pred'), _leaf(rng, (3, 4), 'target')])

    stats = BatchNormStats.fresh(4)
    stats.track_running_stats = False
    stats.running_mean = rng.normal(size=4)
    stats.running_var = rng.uniform(0.5, 2.0, size=4)
    r = _projection(rng, (2, 3, 4))
    norm_params = [_leaf(rng, (2, 3, 4), 'x'), _leaf(rng, (4,), 'gamma'), _leaf(rng, (4,), 'beta')]
    checks['batch_norm_train'] = (lambda p, r=r: _weighted(batch_norm(p[0], p[1], p[2], stats, 'train'), r), norm_params)
    checks['batch_norm_eval'] = (lambda p, r=r: _weighted(batch_norm(p[0], p[1], p[2], stats, 'eval'), r), norm_params)

    d = 4
    attn_params = [
        _leaf(rng, (2, 3, d), 'query'), _leaf(rng, (2, 5, d), 'key_value'),
        _leaf(rng, (d, d), 'w_q', 0.5), _leaf(rng, (d, d), 'w_k', 0.5), _leaf(rng, (d, d), 'w_v', 0.5),
        _leaf(rng, (d, d), 'w_o', 0.5), _leaf(rng, (d,), 'b_o'),
    ]
    r = _projection(rng, (2, 3, d))
    checks['attention'] = (
        lambda p, r=r: _weighted(attention(p[0], p[1], AttentionWeights(*p[2:]), 2, 'eval'), r),
        attn_params,
    )
    return checks


def model_checks(config: RunConfig, rng: np.random.Generator) -> Tuple[Dict[str, Tuple[CheckFn, List[Tensor]]], 'HiMTMModel']:
    from .model import HiMTMModel

    model = HiMTMModel.from_config(config)
    params = model.params
    encoder_config = config.encoder
    d = encoder_config.d_model
    batch = 2
    windows = rng.normal(size=(batch, config.data.lookback))
    counts = model.token_counts
    checks: Dict[str, Tuple[CheckFn, List[Tensor]]] = {}

    x = _leaf(rng, (batch, counts[0], d), 'x')
    r = _projection(rng, x.shape)
    checks['transformer_block'] = (
        lambda p, r=r: _weighted(transformer_block(p[0], params, 'encoder.h1.layer0', encoder_config, 'train'), r),
        [x] + list(params.named('encoder.h1.layer0.').values()),
    )

    tokens, positions = full_tokens(windows, config.patch)
    level_weights = [_projection(rng, (batch, n, d)) for n in counts]

    def encoder_loss(p):
        features = model.features(tokens, positions, 'train')
        total = _weighted(features[0], level_weights[0])
        for level, weights in zip(features.levels[1:], level_weights[1:]):
            total = add(total, _weighted(level, weights))
        return total

    checks['encoder'] = (encoder_loss, list(params.subset(['embed.', 'encoder.']).values()))

    masked = build_masked_batch(windows, config.patch, config.pretrain.mask_ratio, rng)
    visible_counts = [masked.visible.shape[1] // 2 ** level for level in range(len(counts))]
    z_v = [_leaf(rng, (batch, n, d), f"z_v{level}") for level, n in enumerate(visible_counts, start=1)]
    slot_weights = [(_projection(rng, (batch, len(s[0]), d)), _projection(rng, (batch, len(s[0]), config.patch.segment_len(level))))
                    for level, s in enumerate(masked.slot_positions, start=1)]

    def decoder_loss(p):
        z_hat, x_hat = model.decoder(MultiScaleFeatures(list(p[:len(z_v)])), masked.slot_positions, 'train')
        total = None
        for predicted, reconstructed, (w_z, w_x) in zip(z_hat, x_hat, slot_weights):
            term = add(_weighted(predicted, w_z), _weighted(reconstructed, w_x))
            total = term if total is None else add(total, term)
        return total

    checks['decoder'] = (decoder_loss, z_v + list(params.named('decoder.').values()))

    z = [_leaf(rng, (batch, n, d), f"z{level}") for level, n in enumerate(counts, start=1)]

    def csa_loss(p):
        refined = csa_forward(MultiScaleFeatures(list(p[:len(z)])), params, encoder_config, 'train')
        total = _weighted(refined[0], level_weights[0])
        for level, weights in zip(refined.levels[1:], level_weights[1:]):
            total = add(total, _weighted(level, weights))
        return total

    checks['cross_scale_attention'] = (csa_loss, z + list(params.named('csa.').values()))

    trainer = Pretrainer(model, config.pretrain, config.seed)
    with no_recording():
        teacher = trainer.teacher_forward(masked.masked, masked.masked_positions)
    checks['pretrain_loss'] = (
        lambda p: trainer.compute_loss(masked, 'train', None, teacher_features=teacher)[0],
        list(params.subset(['embed.', 'encoder.', 'decoder.']).values()),
    )

    targets = rng.normal(size=(batch, config.finetune.horizon))
    for aggregation in ('mean', 'learned'):
        finetune_config = replace(config.finetune, aggregation=aggregation)
        checks[f"forecast_loss_{aggregation}"] = (
            lambda p, c=finetune_config: smooth_l1(forward_windows(model, windows, c, 'train'), Tensor(targets)),
            list(params.subset(['embed.', 'encoder.', 'csa.', 'head.']).values()),
        )
    return checks, model


def run_gradcheck_suite(scale: str = 'tiny', step: float = 1e-5, seed: int = 0) -> List[Tuple[str, GradCheckResult]]:
    """Run every check; returns (name, result) pairs in a stable order"""
    config = gradcheck_config(scale)
    max_elements = SCALES[scale]['max_elements']
    rng = np.random.default_rng(seed)
    results = []
    for name, (fn, params) in primitive_checks(rng).items():
        results.append((name, grad_check(fn, params, step=step, max_elements=max_elements, rng=rng)))
    checks, model = model_checks(config, rng)
    with model.params.frozen_statistics():
        for name, (fn, params) in checks.items():
            result = grad_check(fn, params, step=step, max_elements=max_elements, rng=rng)
            logger.info(f"gradcheck {name}: max relative error {result.max_rel_error:.3e}")
            results.append((name, result))
    return results
