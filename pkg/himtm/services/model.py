"""
The complete model: patch embedding, hierarchical encoder, masked decoder
and cross-scale forecasting head, all registered in one ModelParams
"""
import logging
from typing import TYPE_CHECKING, Optional

import numpy as np

from ..utils import derive_rng
from .finetune import CrossScaleHead
from .hmt_encoder import EncoderConfig, HierarchicalEncoder, MultiScaleFeatures
from .parameters import ModelParams
from .patching import PatchEmbedding, PatchSpec
from .pretrain import MaskedDecoder

if TYPE_CHECKING:
    from .run_config import RunConfig

logger = logging.getLogger(__name__)

BACKBONE_PREFIXES = ['embed.', 'encoder.']
HEAD_PREFIXES = ['csa.', 'head.']


class HiMTMModel:
    """
    Backbone parameters are drawn from the `init` generator and the head from
    `head_init`, so changing the horizon never changes the encoder initialisation.
    """

    def __init__(self, patch: PatchSpec, encoder_config: EncoderConfig, lookback: int, horizon: int, seed: int = 0):
        self.patch = patch
        self.encoder_config = encoder_config
        self.lookback = lookback
        self.horizon = horizon
        self.n_coarse = patch.n_coarse(lookback)
        self.n_fine = patch.n_fine(lookback)
        self.params = ModelParams()

        init_rng = derive_rng(seed, 'init')
        self.embedding = PatchEmbedding(self.params, patch, encoder_config.d_model, self.n_fine, init_rng)
        self.encoder = HierarchicalEncoder(self.params, encoder_config, init_rng)
        self.decoder = MaskedDecoder(self.params, patch, encoder_config, self.n_fine, init_rng)
        self.head = CrossScaleHead(
            self.params,
            encoder_config,
            self.token_counts,
            horizon,
            derive_rng(seed, 'head_init'),
        )
        logger.debug(
            f"model built: {len(self.params)} parameter tensors, "
            f"{sum(t.size for t in self.params.params.values())} values, token counts {self.token_counts}"
        )

    @classmethod
    def from_config(cls, config: 'RunConfig') -> 'HiMTMModel':
        return cls(config.patch, config.encoder, config.data.lookback, config.finetune.horizon, config.seed)

    @property
    def token_counts(self):
        return HierarchicalEncoder.token_counts(self.n_fine, self.encoder_config.hierarchies)

    def features(self, tokens, positions: np.ndarray, mode: str = 'eval',
                 rng: Optional[np.random.Generator] = None) -> MultiScaleFeatures:
        """Embed fine tokens at their original positions and run every hierarchy"""
        return self.encoder(self.embedding(tokens, positions), mode, rng)
