"""
Registry of learnable parameters and BatchNorm buffers
"""
import logging
from contextlib import contextmanager
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from ..exceptions import CheckpointError, ContractError
from .tensor_engine import BatchNormStats, Tensor

logger = logging.getLogger(__name__)

INIT_STD = 0.02


def truncated_normal(rng: np.random.Generator, shape: Tuple[int, ...], std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) samples redrawn until they lie within two standard deviations"""
    values = rng.normal(0.0, std, size=shape)
    outside = np.abs(values) > 2.0 * std
    while outside.any():
        values[outside] = rng.normal(0.0, std, size=int(outside.sum()))
        outside = np.abs(values) > 2.0 * std
    return values


class ModelParams:
    """Ordered named parameters plus the running statistics of every BatchNorm"""

    def __init__(self):
        self.params: Dict[str, Tensor] = {}
        self.norms: Dict[str, BatchNormStats] = {}

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.params[name]
        except KeyError:
            raise ContractError(f"unknown parameter '{name}'") from None

    def __len__(self):
        return len(self.params)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ContractError(f"parameter '{name}' registered twice")
        tensor = Tensor(value, requires_grad=True, name=name)
        self.params[name] = tensor
        return tensor

    def weight(self, name: str, shape: Tuple[int, ...], rng: np.random.Generator) -> Tensor:
        return self.add(name, truncated_normal(rng, shape))

    def zeros(self, name: str, shape: Tuple[int, ...]) -> Tensor:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, shape: Tuple[int, ...]) -> Tensor:
        return self.add(name, np.ones(shape))

    def norm(self, name: str, channels: int) -> Tuple[Tensor, Tensor, BatchNormStats]:
        gamma = self.ones(f"{name}.gamma", (channels,))
        beta = self.zeros(f"{name}.beta", (channels,))
        self.norms[name] = BatchNormStats.fresh(channels)
        return gamma, beta, self.norms[name]

    def named(self, prefix: str = '') -> Dict[str, Tensor]:
        return {name: t for name, t in self.params.items() if name.startswith(prefix)}

    def subset(self, prefixes: List[str]) -> Dict[str, Tensor]:
        return {name: t for name, t in self.params.items() if any(name.startswith(p) for p in prefixes)}

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.grad = None

    def grads(self, names: Optional[List[str]] = None) -> Dict[str, Optional[np.ndarray]]:
        names = names if names is not None else list(self.params)
        return {name: self.params[name].grad for name in names}

    @contextmanager
    def frozen_statistics(self) -> Iterator[None]:
        """Stop running-stat updates, e.g. while differencing a train-mode loss"""
        previous = {name: stats.track_running_stats for name, stats in self.norms.items()}
        for stats in self.norms.values():
            stats.track_running_stats = False
        try:
            yield
        finally:
            for name, stats in self.norms.items():
                stats.track_running_stats = previous[name]

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {f"param/{name}": t.data.copy() for name, t in self.params.items()}
        for name, stats in self.norms.items():
            arrays[f"norm/{name}/running_mean"] = stats.running_mean.copy()
            arrays[f"norm/{name}/running_var"] = stats.running_var.copy()
        return arrays

    def snapshot(self) -> Dict[str, np.ndarray]:
        return self.state_arrays()

    def restore(self, arrays: Dict[str, np.ndarray], prefixes: Optional[List[str]] = None) -> List[str]:
        """
        Copy stored arrays back into the registry

        Args:
            arrays: output of state_arrays()/snapshot()
            prefixes: restrict loading to names under these prefixes

        Returns:
            Names of the parameters that were loaded
        """
        loaded = []
        for key, value in arrays.items():
            kind, _, rest = key.partition('/')
            if kind == 'param':
                name = rest
                if prefixes is not None and not any(name.startswith(p) for p in prefixes):
                    continue
                if name not in self.params:
                    raise CheckpointError(f"checkpoint parameter '{name}' does not exist in the model")
                target = self.params[name]
                if target.shape != value.shape:
                    raise CheckpointError(f"parameter '{name}': checkpoint shape {value.shape} != model shape {target.shape}")
                target.data[...] = value
                loaded.append(name)
            elif kind == 'norm':
                name, _, field_name = rest.rpartition('/')
                if prefixes is not None and not any(name.startswith(p) for p in prefixes):
                    continue
                if name not in self.norms:
                    raise CheckpointError(f"checkpoint BatchNorm '{name}' does not exist in the model")
                setattr(self.norms[name], field_name, np.array(value, copy=True))
        return loaded
