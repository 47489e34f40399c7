"""
Dense float64 tensors with reverse-mode automatic differentiation

Operations executed while a Tape is active are recorded in execution order,
so the tape is always topologically sorted. backward() replays it in reverse
from a scalar loss and accumulates gradients into the requires_grad leaves.
Outside of a recording context every operation returns a constant.
"""
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..exceptions import ContractError, NumericalError, ShapeError, TapeStateError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

GELU_COEF = np.sqrt(2.0 / np.pi)


class Tensor:
    """n-dimensional float64 value that can take part in a differentiation tape"""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.ascontiguousarray(np.array(data, dtype=np.float64))
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self.tape_id: Optional[int] = None
        self._tape: Optional['Tape'] = None
        self._generation = -1

    @classmethod
    def _wrap(cls, data: np.ndarray) -> 'Tensor':
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.requires_grad = False
        out.name = None
        out.grad = None
        out.tape_id = None
        out._tape = None
        out._generation = -1
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def on_tape(self, tape: 'Tape') -> bool:
        return self._tape is tape and self._generation == tape.generation and self.tape_id is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by a python scalar")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class TapeNode:
    op: str
    inputs: Tuple[Tensor, ...]
    backward: BackwardFn


class Tape:
    """Ordered record of primitive operations"""

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self.consumed = False
        self.generation = 0

    def __len__(self):
        return len(self.nodes)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward_fn: BackwardFn) -> None:
        if self.consumed:
            raise TapeStateError("tape was consumed by backward(); call reset() before recording again")
        output.tape_id = len(self.nodes)
        output._tape = self
        output._generation = self.generation
        output.requires_grad = True
        self.nodes.append(TapeNode(op, inputs, backward_fn))

    def reset(self) -> None:
        self.nodes = []
        self.consumed = False
        self.generation += 1


_local = threading.local()


def active_tape() -> Optional[Tape]:
    return getattr(_local, 'tape', None)


@contextmanager
def recording(tape: Optional[Tape] = None) -> Iterator[Tape]:
    """Record operations onto `tape` (a fresh one by default) for this thread"""
    tape = tape if tape is not None else Tape()
    previous = active_tape()
    _local.tape = tape
    try:
        yield tape
    finally:
        _local.tape = previous


@contextmanager
def no_recording() -> Iterator[None]:
    previous = active_tape()
    _local.tape = None
    try:
        yield
    finally:
        _local.tape = previous


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=np.float64))


def _result(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, out, backward_fn)
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out the axes numpy broadcasting added so `grad` matches `shape`"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check('add', a, b)

    def backward_fn(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _result('add', a.data + b.data, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check('sub', a, b)

    def backward_fn(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _result('sub', a.data - b.data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check('mul', a, b)
    a_data, b_data = a.data, b.data

    def backward_fn(g):
        return unbroadcast(g * b_data, a.shape), unbroadcast(g * a_data, b.shape)

    return _result('mul', a_data * b_data, (a, b), backward_fn)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation"""
    x = as_tensor(x)
    u = GELU_COEF * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)

    def backward_fn(g):
        du = GELU_COEF * (1.0 + 3.0 * 0.044715 * x.data ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _result('gelu', 0.5 * x.data * (1.0 + t), (x,), backward_fn)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs a random generator")
    keep = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return mul(x, Tensor._wrap(keep))


# ---------------------------------------------------------------------------
# Linear algebra and shape manipulation
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None
    a_data, b_data = a.data, b.data

    def backward_fn(g):
        grad_a = np.matmul(g, np.swapaxes(b_data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a_data, -1, -2), g)
        return unbroadcast(grad_a, a.shape), unbroadcast(grad_b, b.shape)

    return _result('matmul', np.matmul(a_data, b_data), (a, b), backward_fn)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        return (np.transpose(g, inverse),)

    return _result('transpose', np.transpose(x.data, axes), (x,), backward_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    original = x.shape
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"cannot reshape {original} into {tuple(shape)}") from None

    def backward_fn(g):
        return (g.reshape(original),)

    return _result('reshape', data, (x,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat along axis {axis}: incompatible shapes {[t.shape for t in tensors]}") from None
    boundaries = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, boundaries, axis=axis))

    return _result('concat', data, tensors, backward_fn)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward_fn(g):
        grad = np.zeros_like(x.data)
        grad[index] = g
        return (grad,)

    return _result('slice', x.data[index], (x,), backward_fn)


def embedding(table: Tensor, indices: np.ndarray) -> Tensor:
    """Rows of `table` selected by an integer index array of any shape"""
    table = as_tensor(table)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise ContractError(
            f"embedding index out of range [0, {table.shape[0]}): min {indices.min()}, max {indices.max()}"
        )

    def backward_fn(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, indices, g)
        return (grad,)

    return _result('embedding', table.data[indices], (table,), backward_fn)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def sum_(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result('sum', np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward_fn)


def mean(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by the row maximum"""
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    y = exp / np.sum(exp, axis=-1, keepdims=True)

    def backward_fn(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _result('softmax', y, (x,), backward_fn)


# ---------------------------------------------------------------------------
# Losses and normalisation
# ---------------------------------------------------------------------------

def smooth_l1(pred: Tensor, target: Tensor, threshold: float = 1.0) -> Tensor:
    """Mean Smooth L1: 0.5*d^2/threshold inside the threshold, |d| - 0.5*threshold outside"""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1: prediction shape {pred.shape} differs from target shape {target.shape}")
    if threshold <= 0:
        raise ContractError(f"smooth_l1 threshold must be positive, got {threshold}")
    diff = pred.data - target.data
    inside = np.abs(diff) < threshold
    losses = np.where(inside, 0.5 * diff * diff / threshold, np.abs(diff) - 0.5 * threshold)
    count = max(diff.size, 1)

    def backward_fn(g):
        local = np.where(inside, diff / threshold, np.sign(diff)) * (g / count)
        return local, -local

    return _result('smooth_l1', np.asarray(losses.sum() / count), (pred, target), backward_fn)


def cosine_distance(pred: Tensor, target: Tensor, eps: float = 1e-12) -> Tensor:
    """Mean over rows (last axis) of 1 - cos(pred_row, target_row)"""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"cosine_distance: prediction shape {pred.shape} differs from target shape {target.shape}")
    a, b = pred.data, target.data
    norm_a = np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), eps)
    norm_b = np.maximum(np.linalg.norm(b, axis=-1, keepdims=True), eps)
    cos = np.sum(a * b, axis=-1, keepdims=True) / (norm_a * norm_b)
    rows = max(int(np.prod(a.shape[:-1])), 1)

    def backward_fn(g):
        scale = -g / rows
        grad_a = scale * (b / (norm_a * norm_b) - cos * a / (norm_a * norm_a))
        grad_b = scale * (a / (norm_a * norm_b) - cos * b / (norm_b * norm_b))
        return grad_a, grad_b

    return _result('cosine_distance', np.asarray(np.sum(1.0 - cos) / rows), (pred, target), backward_fn)


@dataclass
class BatchNormStats:
    """Running statistics of one BatchNorm layer"""
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    track_running_stats: bool = True
    last_mean: Optional[np.ndarray] = None
    last_var: Optional[np.ndarray] = None

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> 'BatchNormStats':
        return cls(np.zeros(channels), np.ones(channels), momentum, eps)

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray, count: int) -> None:
        self.last_mean, self.last_var = batch_mean, batch_var
        if not self.track_running_stats:
            return
        unbiased = batch_var * count / (count - 1) if count > 1 else batch_var
        self.running_mean = (1.0 - self.momentum) * self.running_mean + self.momentum * batch_mean
        self.running_var = (1.0 - self.momentum) * self.running_var + self.momentum * unbiased


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: BatchNormStats, mode: str) -> Tensor:
    """Normalise every feature channel (last axis) over all leading axes"""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    channels = x.shape[-1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"batch_norm: input channels {channels} do not match gamma {gamma.shape} / beta {beta.shape}")
    axes = tuple(range(x.ndim - 1))
    count = int(np.prod(x.shape[:-1]))

    if mode == 'train':
        mu = x.data.mean(axis=axes)
        centered = x.data - mu
        var = (centered * centered).mean(axis=axes)
        stats.update(mu, var, count)
    else:
        mu, var = stats.running_mean, stats.running_var
        centered = x.data - mu
    inv_std = 1.0 / np.sqrt(var + stats.eps)
    x_hat = centered * inv_std
    g_data = gamma.data

    def backward_fn(g):
        grad_gamma = np.sum(g * x_hat, axis=axes)
        grad_beta = np.sum(g, axis=axes)
        d_hat = g * g_data
        if mode == 'train':
            grad_x = (inv_std / count) * (
                count * d_hat
                - np.sum(d_hat, axis=axes)
                - x_hat * np.sum(d_hat * x_hat, axis=axes)
            )
        else:
            grad_x = d_hat * inv_std
        return grad_x, grad_gamma, grad_beta

    return _result('batch_norm', g_data * x_hat + beta.data, (x, gamma, beta), backward_fn)


def stop_gradient(x: Tensor) -> Tensor:
    """Value-identical constant copy; nothing flows back through it"""
    return Tensor._wrap(np.array(as_tensor(x).data, copy=True))


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """
    Replay the loss tape in reverse and accumulate leaf gradients

    Returns:
        Mapping of every requires_grad leaf reached to its accumulated gradient
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss.tape_id is None:
        raise ContractError("loss is not recorded on a differentiation tape")
    if tape.consumed:
        raise TapeStateError("tape was already consumed by backward(); call reset() first")
    if not loss.on_tape(tape):
        raise TapeStateError("loss belongs to a tape generation that was reset")
    tape.consumed = True

    pending: Dict[int, np.ndarray] = {loss.tape_id: np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    for index in range(loss.tape_id, -1, -1):
        grad = pending.pop(index, None)
        if grad is None:
            continue
        node = tape.nodes[index]
        for tensor, input_grad in zip(node.inputs, node.backward(grad)):
            if input_grad is None or not tensor.requires_grad:
                continue
            if tensor.on_tape(tape):
                previous = pending.get(tensor.tape_id)
                pending[tensor.tape_id] = input_grad if previous is None else previous + input_grad
            else:
                tensor.grad = np.array(input_grad, copy=True) if tensor.grad is None else tensor.grad + input_grad
                leaves[id(tensor)] = tensor
    return {tensor: tensor.grad for tensor in leaves.values()}


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, Optional[np.ndarray]], state: AdamState) -> AdamState:
    """
    One bias-corrected Adam update, applied in place

    Parameters whose gradient is None were not reached by the loss and are left
    untouched, moments included.
    """
    if set(params) != set(grads):
        missing = sorted(set(params) ^ set(grads))
        raise ContractError(f"adam_step: parameters and gradients are not aligned: {missing}")
    for name, grad in grads.items():
        if grad is None:
            continue
        if grad.shape != params[name].shape:
            raise ShapeError(f"adam_step: gradient shape {grad.shape} differs from parameter '{name}' shape {params[name].shape}")
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite gradient for parameter '{name}' at step {state.t + 1}; step aborted")

    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, param in params.items():
        grad = grads[name]
        if grad is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(param.data)
            state.v[name] = np.zeros_like(param.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * (grad * grad)
        param.data -= (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
    return state


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    per_parameter: Dict[str, float]
    detached: List[str]

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def _evaluate(f: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor]) -> float:
    with no_recording():
        value = as_tensor(f(params)).item()
    if not np.isfinite(value):
        raise NumericalError(f"function evaluated to {value} during finite differencing")
    return value


def grad_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    floor: float = 1e-6,
    max_elements: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckResult:
    """
    Compare backward() gradients with central finite differences

    Parameters that receive no gradient at all are reported as detached: their
    analytic gradient is zero and they are left out of the comparison.

    Args:
        f: deterministic function of `params` returning a scalar tensor
        params: leaf tensors with requires_grad set
        step: finite-difference step
        floor: lower bound of the relative-error denominator
        max_elements: compare at most this many randomly chosen elements per parameter

    Returns:
        GradCheckResult with the worst relative error over all compared elements
    """
    if step <= 0:
        raise ContractError(f"grad_check step must be positive, got {step}")
    for param in params:
        param.grad = None
    with recording():
        loss = f(params)
    if not np.isfinite(loss.item()):
        raise NumericalError(f"function evaluated to {loss.item()} before differencing")
    backward(loss)
    rng = rng if rng is not None else np.random.default_rng(0)

    per_parameter: Dict[str, float] = {}
    detached: List[str] = []
    for position, param in enumerate(params):
        name = param.name or f'param{position}'
        analytic = param.grad
        if analytic is None:
            detached.append(name)
            per_parameter[name] = 0.0
            continue
        indices = list(np.ndindex(param.shape))
        if max_elements is not None and len(indices) > max_elements:
            chosen = rng.choice(len(indices), size=max_elements, replace=False)
            indices = [indices[i] for i in sorted(chosen)]
        worst = 0.0
        for index in indices:
            original = param.data[index]
            param.data[index] = original + step
            upper = _evaluate(f, params)
            param.data[index] = original - step
            lower = _evaluate(f, params)
            param.data[index] = original
            numeric = (upper - lower) / (2.0 * step)
            exact = analytic[index]
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            worst = max(worst, error)
        per_parameter[name] = worst
    max_error = max(per_parameter.values(), default=0.0)
    logger.debug(f"grad_check: worst relative error {max_error:.3e} over {len(params)} parameters")
    return GradCheckResult(max_error, per_parameter, detached)
