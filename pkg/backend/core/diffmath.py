"""
Differentiable Math Module
Dense NumPy tensors with tape-based reverse-mode differentiation
"""

import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from backend.utils.errors import (
    DegenerateInputError,
    InvalidBatchError,
    InvalidShapeError,
    TapeError,
)

ArrayLike = Union[np.ndarray, float, int, Sequence]

_DEFAULT_DTYPE = np.float64
_local = threading.local()


def set_default_dtype(dtype) -> None:
    """Switch storage precision for newly created tensors (float64 or float32)"""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"Unsupported precision: {dtype}")
    _DEFAULT_DTYPE = dtype.type


class Tensor:
    """Immutable dense array that can take part in a gradient tape"""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 name: Optional[str] = None, dtype=None):
        arr = np.array(data, dtype=dtype or _DEFAULT_DTYPE)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional["Tensor"] = None
        self.name = name
        self._tape: Optional["Tape"] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        out._tape = None
        return out

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return take(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)


def parameter(data: ArrayLike, name: str) -> Tensor:
    """Leaf tensor that receives gradients"""
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class TapeRecord:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of executed primitives; owned by one thread"""

    records: List[TapeRecord] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.records)


def _tape_stack() -> List[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, inputs: Sequence[Tensor], out: np.ndarray,
            backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad=needs_grad)
    if needs_grad:
        result._tape = tape
        tape.records.append(TapeRecord(op, tuple(inputs), result, backward_fn))
    return result


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if squeeze:
        grad = grad.sum(axis=squeeze, keepdims=True)
    return grad.reshape(shape)


def _normalize_axes(axis, ndim: int) -> Optional[Tuple[int, ...]]:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# Elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record("mul", (a, b), a.data * b.data,
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record("div", (a, b), a.data / b.data,
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(x) -> Tensor:
    x = _as_tensor(x)
    return _record("neg", (x,), -x.data, lambda g: (-g,))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _record("exp", (x,), out, lambda g: (g * out,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    return _record("log", (x,), np.log(x.data), lambda g: (g / x.data,))


def relu(x) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is 0"""
    x = _as_tensor(x)
    mask = x.data > 0
    return _record("relu", (x,), np.where(mask, x.data, 0.0).astype(x.data.dtype),
                   lambda g: (g * mask,))


def softplus(x) -> Tensor:
    x = _as_tensor(x)
    return _record("softplus", (x,), np.logaddexp(0.0, x.data),
                   lambda g: (g * expit(x.data),))


# Shape manipulation

def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    return _record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def transpose(x, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _record("transpose", (x,), x.data.transpose(axes), lambda g: (g.transpose(inverse),))


def take(x, idx) -> Tensor:
    """Basic or advanced indexing; gradients scatter back with np.add.at"""
    x = _as_tensor(x)

    def backward_fn(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(full, idx, np.reshape(g, np.shape(x.data[idx])))
        return (full,)

    return _record("take", (x,), np.array(x.data[idx]), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis),
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


# Reductions

def tensor_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)

    def backward_fn(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _record("sum", (x,), np.sum(x.data, axis=axes, keepdims=keepdims), backward_fn)


def tensor_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    return tensor_sum(x, axis=axes, keepdims=keepdims) * (1.0 / count)


def logsumexp(x, axis=None, keepdims: bool = False) -> Tensor:
    """log sum exp(x) computed as m + log sum exp(x - m) with m = max(x)"""
    x = _as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    m = np.max(x.data, axis=axes, keepdims=True)
    shifted = np.exp(x.data - m)
    total = np.sum(shifted, axis=axes, keepdims=True)
    out = m + np.log(total)
    softmax = shifted / total
    if not keepdims:
        out = np.squeeze(out, axis=axes) if axes is not None else out.reshape(())

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes is not None else np.reshape(g, (1,) * x.ndim)
        return (g * softmax,)

    return _record("logsumexp", (x,), out, backward_fn)


# Linear algebra and convolutions

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InvalidShapeError(f"matmul expects [m,k] x [k,n], got {a.shape} x {b.shape}")
    return _record("matmul", (a, b), a.data @ b.data,
                   lambda g: (g @ b.data.T, a.data.T @ g))


def conv1d(x, w, stride: int = 1) -> Tensor:
    """
    Valid (no padding) 1-D cross-correlation

    Args:
        x: input of shape [C_in, L] or batched [N, C_in, L]
        w: kernel of shape [C_out, C_in, K]
        stride: step between windows

    Returns:
        Tensor: [C_out, L'] (or [N, C_out, L']) with L' = floor((L-K)/stride)+1
    """
    x, w = _as_tensor(x), _as_tensor(w)
    batched = x.ndim == 3
    if x.ndim not in (2, 3) or w.ndim != 3:
        raise InvalidShapeError(f"conv1d expects x [C,L] or [N,C,L] and w [O,C,K], got {x.shape}, {w.shape}")
    if stride < 1:
        raise InvalidShapeError(f"stride must be >= 1, got {stride}")
    xb = x.data if batched else x.data[None]
    n, c, length = xb.shape
    out_c, in_c, k = w.shape
    if in_c != c:
        raise InvalidShapeError(f"conv1d channel mismatch: input {c}, kernel {in_c}")
    if k > length:
        raise InvalidShapeError(f"conv1d kernel {k} longer than input {length}")

    cols = sliding_window_view(xb, k, axis=2)[:, :, ::stride, :]
    out_len = cols.shape[2]
    out = np.tensordot(cols, w.data, axes=([1, 3], [1, 2])).transpose(0, 2, 1)

    def backward_fn(g):
        gb = g if batched else g[None]
        grad_w = np.tensordot(gb, cols, axes=([0, 2], [0, 2]))
        gcols = np.tensordot(gb, w.data, axes=([1], [0]))
        grad_x = np.zeros_like(xb)
        span = stride * (out_len - 1) + 1
        for j in range(k):
            grad_x[:, :, j:j + span:stride] += gcols[:, :, :, j].transpose(0, 2, 1)
        return (grad_x if batched else grad_x[0], grad_w)

    return _record("conv1d", (x, w), out if batched else out[0], backward_fn)


def conv2d(x, w, stride: int = 1) -> Tensor:
    """
    Valid (no padding) 2-D cross-correlation

    Args:
        x: input of shape [C_in, H, W] or batched [N, C_in, H, W]
        w: kernel of shape [C_out, C_in, Kh, Kw]
        stride: step between windows along both spatial axes

    Returns:
        Tensor: [C_out, H', W'] (or [N, C_out, H', W'])
    """
    x, w = _as_tensor(x), _as_tensor(w)
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or w.ndim != 4:
        raise InvalidShapeError(f"conv2d expects x [C,H,W] or [N,C,H,W] and w [O,C,Kh,Kw], got {x.shape}, {w.shape}")
    if stride < 1:
        raise InvalidShapeError(f"stride must be >= 1, got {stride}")
    xb = x.data if batched else x.data[None]
    n, c, h, wd = xb.shape
    out_c, in_c, kh, kw = w.shape
    if in_c != c:
        raise InvalidShapeError(f"conv2d channel mismatch: input {c}, kernel {in_c}")
    if kh > h or kw > wd:
        raise InvalidShapeError(f"conv2d kernel {(kh, kw)} larger than input {(h, wd)}")

    cols = sliding_window_view(xb, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = cols.shape[2], cols.shape[3]
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def backward_fn(g):
        gb = g if batched else g[None]
        grad_w = np.tensordot(gb, cols, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(gb, w.data, axes=([1], [0]))
        grad_x = np.zeros_like(xb)
        span_h = stride * (out_h - 1) + 1
        span_w = stride * (out_w - 1) + 1
        for i in range(kh):
            for j in range(kw):
                grad_x[:, :, i:i + span_h:stride, j:j + span_w:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return (grad_x if batched else grad_x[0], grad_w)

    return _record("conv2d", (x, w), out if batched else out[0], backward_fn)


# Normalization

@dataclass
class BatchNormState:
    """Running statistics used by batch_norm_eval"""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def create(cls, dim: int, momentum: float = 0.1) -> "BatchNormState":
        return cls(np.zeros(dim), np.ones(dim), momentum)

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
        self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var


def batch_norm_train(x, gamma, beta, eps: float = 1e-5,
                     state: Optional[BatchNormState] = None) -> Tensor:
    """Per-feature standardization with batch statistics followed by an affine map"""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 2:
        raise InvalidShapeError(f"batch_norm_train expects [N, D], got {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise InvalidBatchError(f"batch norm needs at least 2 rows, got {n}")
    mean = x.data.mean(axis=0)
    centered = x.data - mean
    var = (centered * centered).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    if state is not None:
        state.update(mean, var * n / (n - 1))

    def backward_fn(g):
        grad_gamma = np.sum(g * xhat, axis=0)
        grad_beta = np.sum(g, axis=0)
        dxhat = g * gamma.data
        grad_x = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
        return (grad_x, grad_gamma, grad_beta)

    return _record("batch_norm_train", (x, gamma, beta), gamma.data * xhat + beta.data, backward_fn)


def batch_norm_eval(x, gamma, beta, state: BatchNormState, eps: float = 1e-5) -> Tensor:
    """Inference-mode batch norm using running statistics"""
    scale = 1.0 / np.sqrt(state.running_var + eps)
    return (x - state.running_mean) * scale * gamma + beta


def l2_normalize(x, axis: int = -1) -> Tensor:
    """Scale to unit Euclidean norm along axis; zero vectors are rejected"""
    x = _as_tensor(x)
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise DegenerateInputError("cannot normalize a zero vector")
    out = x.data / norm

    def backward_fn(g):
        return ((g - out * np.sum(g * out, axis=axis, keepdims=True)) / norm,)

    return _record("l2_normalize", (x,), out, backward_fn)


# Reverse pass

def backward(loss: Tensor, params: Optional[Mapping[str, Tensor]] = None) -> Dict[str, Tensor]:
    """
    Reverse-mode sweep over the tape that produced loss

    Args:
        loss: scalar tensor recorded on an active tape
        params: leaves to report; unreached leaves get zero gradients. When
            omitted, every named leaf reached by the sweep is reported.

    Returns:
        Dict[str, Tensor]: gradient per parameter name
    """
    if loss.size != 1:
        raise InvalidShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not produced on an active tape")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    for record in reversed(tape.records):
        upstream = grads.pop(id(record.output), None)
        if upstream is None:
            continue
        for tensor, grad in zip(record.inputs, record.backward(upstream)):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            grads[key] = grad if key not in grads else grads[key] + grad
            if tensor._tape is None:
                leaves[key] = tensor

    for key, leaf in leaves.items():
        leaf.grad = Tensor._wrap(np.array(grads[key]), requires_grad=False)

    if params is not None:
        return {
            name: Tensor._wrap(np.array(grads[id(p)]) if id(p) in leaves else np.zeros_like(p.data), False)
            for name, p in params.items()
        }
    return {leaf.name: leaf.grad for leaf in leaves.values() if leaf.name is not None}


def gradient_check(fn: Callable[[Mapping[str, Tensor]], Tensor], params: Mapping[str, Tensor],
                   h: float = 1e-5, num_entries: Optional[int] = None, seed: int = 0) -> float:
    """
    Compare tape gradients with central finite differences

    Args:
        fn: maps a parameter mapping to a scalar tensor
        params: leaves to check
        h: finite-difference step
        num_entries: check this many randomly chosen entries (all when None)
        seed: selects the entries

    Returns:
        float: ||analytic - numeric|| / (||analytic|| + ||numeric||)
    """
    leaves = {name: Tensor(p.data, requires_grad=True, name=name) for name, p in params.items()}
    with Tape():
        loss = fn(leaves)
        analytic = backward(loss, leaves)

    candidates = [(name, idx) for name, p in leaves.items() for idx in np.ndindex(p.shape)]
    if num_entries is not None and num_entries < len(candidates):
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(candidates), size=num_entries, replace=False)
        candidates = [candidates[i] for i in sorted(picks)]

    def evaluate(name, idx, delta):
        data = np.array(leaves[name].data)
        data[idx] += delta
        shifted = dict(leaves)
        shifted[name] = Tensor(data, name=name)
        return float(fn(shifted).item())

    numeric = np.array([(evaluate(n, i, h) - evaluate(n, i, -h)) / (2 * h) for n, i in candidates])
    exact = np.array([analytic[n].data[i] for n, i in candidates])
    scale = np.linalg.norm(exact) + np.linalg.norm(numeric)
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(exact - numeric) / scale)
