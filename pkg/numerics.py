"""
Dense tensors with reverse-mode automatic differentiation.

Thin wrapper around numpy ndarrays. Every op returns a new Tensor; when any
input requires a gradient (and grad mode is on) the result keeps a closure
that maps the output gradient to one gradient per parent. `backward` walks
that tape in reverse topological order.

Also home of the seeded RngState and the finite-difference gradient checker.
"""

import hashlib
import logging
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from config import CHECK_FINITE

logger = logging.getLogger(__name__)

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715
COSINE_EPS = 1e-8

DTYPES = {'float32': np.float32, 'float64': np.float64}


# ============================================================
# ERRORS
# ============================================================

class EFSLError(Exception):
    """Base class for every error raised by this package"""


class ShapeError(EFSLError, ValueError):
    """Operand shapes do not fit the operation"""


class NonFiniteError(EFSLError, FloatingPointError):
    """An op produced NaN or Inf while finiteness checks were on"""


class TapeError(EFSLError):
    """The gradient tape cannot be walked (non-scalar loss, cycle, detached loss)"""


# ============================================================
# GRAD / VERIFICATION MODE
# ============================================================

class _Mode(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.check_finite = CHECK_FINITE


_mode = _Mode()


@contextmanager
def no_grad():
    """Run ops without recording them on the tape (current thread only)."""
    previous = _mode.grad_enabled
    _mode.grad_enabled = False
    try:
        yield
    finally:
        _mode.grad_enabled = previous


@contextmanager
def checked():
    """Assert finiteness after every op (current thread only)."""
    previous = _mode.check_finite
    _mode.check_finite = True
    try:
        yield
    finally:
        _mode.check_finite = previous


def is_grad_enabled() -> bool:
    return _mode.grad_enabled


# ============================================================
# TENSOR
# ============================================================

class Tensor:
    """n-dimensional real array with optional tape participation"""

    __slots__ = ('data', 'requires_grad', 'grad', 'name', '_parents', '_backward', '_op')

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        array = np.asarray(data, dtype=dtype)
        if array.dtype not in (np.float32, np.float64):
            array = array.astype(np.float32 if dtype is None else dtype)
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = 'leaf'

    # --- basic properties ---

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> 'Tensor':
        return Tensor(self.data, name=self.name)

    def copy(self, requires_grad: Optional[bool] = None) -> 'Tensor':
        keep = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.data.copy(), requires_grad=keep, name=self.name)

    def astype(self, dtype) -> 'Tensor':
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.data).tobytes()).hexdigest()

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # --- operator sugar ---

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __pow__(self, exponent: float): return power(self, exponent)
    def __getitem__(self, index): return take(self, index)

    def sum(self, axis=None, keepdims=False): return tensor_sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else (axes or None))
    def swapaxes(self, a: int, b: int): return swapaxes(self, a, b)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap an op output, recording a tape node when a parent needs a gradient."""
    if _mode.check_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values (shape {np.shape(data)})")
    needs_grad = _mode.grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs_grad)
    out._op = op
    if needs_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, name: str = 'custom') -> Tensor:
    """Record a user-defined op whose `backward_fn(g)` returns one gradient per parent."""
    return _result(np.asarray(data), parents, backward_fn, name)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


# ============================================================
# ELEMENTWISE OPS
# ============================================================

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _result(a.data + b.data, (a, b), backward, 'add')


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _result(a.data - b.data, (a, b), backward, 'sub')


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _result(a.data * b.data, (a, b), backward, 'mul')


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _result(a.data / b.data, (a, b), backward, 'div')


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), 'neg')


def power(a: Tensor, exponent: float) -> Tensor:
    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)
    return _result(a.data ** exponent, (a,), backward, 'pow')


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), 'exp')


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), 'log')


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), 'sqrt')


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), 'tanh')


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715x^3)))."""
    x = a.data
    inner = GELU_C * (x + GELU_A * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)
    return _result(out, (a,), backward, 'gelu')


# ============================================================
# REDUCTIONS AND SHAPE OPS
# ============================================================

def _normalize_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _result(np.asarray(out), (a,), backward, 'sum')


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(tensor_sum(a, axes, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), 'reshape')


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), 'transpose')


def swapaxes(a: Tensor, first: int, second: int) -> Tensor:
    return _result(np.swapaxes(a.data, first, second), (a,),
                   lambda g: (np.swapaxes(g, first, second),), 'swapaxes')


def take(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; the gradient scatters back with np.add.at."""
    def backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)
    return _result(np.asarray(a.data[index]), (a,), backward, 'index')


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, 'concat')


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))
    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, backward, 'stack')


# ============================================================
# LINEAR ALGEBRA AND NORMALIZATION
# ============================================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product [.., M, K] x [.., K, N] -> [.., M, N]."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot contract {a.shape} with {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _result(np.matmul(a.data, b.data), (a, b), backward, 'matmul')


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along `axis`."""
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"softmax: empty axis {axis} for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _result(out, (x,), backward, 'softmax')


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"log_softmax: empty axis {axis} for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return _result(out, (x,), backward, 'log_softmax')


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise ShapeError(f"layer_norm: input width {width} vs gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)
    return _result(out, (x, gamma, beta), backward, 'layer_norm')


def cosine_similarity(a: Tensor, b: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """
    Cosine along the last axis, broadcasting leading axes.

    The denominator is sqrt(max(|a|^2 |b|^2, eps^2)), so a zero vector
    yields 0 instead of NaN.
    """
    a, b = _pair(a, b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"cosine_similarity: widths differ, {a.shape} vs {b.shape}")
    ab = (a.data * b.data).sum(axis=-1)
    aa = (a.data * a.data).sum(axis=-1)
    bb = (b.data * b.data).sum(axis=-1)
    den2 = aa * bb
    clamped = den2 < eps * eps
    den = np.sqrt(np.where(clamped, eps * eps, den2))
    out = ab / den

    def backward(g):
        scale = (g / den)[..., None]
        corr = np.where(clamped, 0.0, g * ab / den ** 3)[..., None]
        ga = scale * b.data - corr * bb[..., None] * a.data
        gb = scale * a.data - corr * aa[..., None] * b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _result(out, (a, b), backward, 'cosine')


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer `labels` under row-softmaxed logits."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    logp = log_softmax(logits, axis=-1)
    picked = take(logp, (np.arange(len(labels)), labels))
    return neg(mean(picked))


# ============================================================
# BACKWARD PASS
# ============================================================

def _topological_order(root: Tensor) -> list[Tensor]:
    """Iterative DFS; a back edge means the tape has a cycle."""
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack = [(root, iter(root._parents))]
    state[id(root)] = 1
    while stack:
        node, parents = stack[-1]
        advanced = False
        for parent in parents:
            if not parent.requires_grad:
                continue
            mark = state.get(id(parent))
            if mark == 1:
                raise TapeError(f"cyclic tape detected at {parent!r}")
            if mark is None:
                state[id(parent)] = 1
                stack.append((parent, iter(parent._parents)))
                advanced = True
                break
        if not advanced:
            stack.pop()
            state[id(node)] = 2
            order.append(node)
    return order


def backward(loss: Tensor, leaves: Optional[Iterable[Tensor]] = None) -> None:
    """
    Accumulate d(loss)/d(leaf) into `.grad` of every requires_grad leaf.

    Leaves listed in `leaves` that the loss does not reach get a zero-filled
    gradient.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("loss is not connected to the tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad

    for leaf in leaves or ():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


# ============================================================
# RANDOMNESS
# ============================================================

def _stream_key(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(key).encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little')


@dataclass(frozen=True)
class RngState:
    """(seed, stream) pair; identical pairs give identical draws everywhere."""
    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.seed & 0xFFFFFFFFFFFFFFFF, spawn_key=(self.stream,))
        return np.random.Generator(np.random.Philox(seq))

    def child(self, key) -> 'RngState':
        """Derive a substream from a name ('init', 'episodes') or an index."""
        mixed = hashlib.sha256(f"{self.stream}:{_stream_key(key)}".encode('utf-8')).digest()
        return RngState(self.seed, int.from_bytes(mixed[:8], 'little'))


def truncated_normal(rng: np.random.Generator, shape, std: float, dtype=np.float32) -> np.ndarray:
    """Normal draws clipped at two standard deviations."""
    return (np.clip(rng.standard_normal(shape), -2.0, 2.0) * std).astype(dtype)


# ============================================================
# FINITE-DIFFERENCE GRADIENT CHECK
# ============================================================

@dataclass
class GradCheckEntry:
    name: str
    checked: int
    max_rel_error: float
    max_abs_error: float
    flagged: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not any(e.flagged for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def flagged(self) -> list[str]:
        return [e.name for e in self.entries if e.flagged]

    def summary(self) -> str:
        lines = [f"{e.name}: rel={e.max_rel_error:.3e} abs={e.max_abs_error:.3e} n={e.checked}"
                 + (" FLAGGED" if e.flagged else "") for e in self.entries]
        return "\n".join(lines)


def finite_difference_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    step: float = 1e-4,
    tol: float = 1e-5,
    atol: float = 0.0,
    max_elements: Optional[int] = None,
    rng: Optional[RngState] = None,
) -> GradCheckReport:
    """
    Compare tape gradients of the scalar `f()` against central differences.

    Relative error per element is |a - n| / max(|a|, |n|, 1e-8); a tensor is
    flagged when some element exceeds `tol` and its absolute error exceeds
    `atol`. `max_elements` limits the check to a random subset per tensor.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for p in params.values():
        p.zero_grad()
    loss = f()
    backward(loss, leaves=params.values())
    analytic = {name: p.grad.copy() for name, p in params.items()}

    picker = (rng or RngState(0)).generator()
    report = GradCheckReport()
    for name, p in params.items():
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            indices = np.sort(picker.choice(flat.size, size=max_elements, replace=False))
        worst_rel = worst_abs = 0.0
        flagged = False
        for idx in indices:
            original = flat[idx]
            with no_grad():
                flat[idx] = original + step
                plus = f().item()
                flat[idx] = original - step
                minus = f().item()
                flat[idx] = original
            numeric = (plus - minus) / (2.0 * step)
            exact = float(analytic[name].reshape(-1)[idx])
            abs_err = abs(exact - numeric)
            rel_err = abs_err / max(abs(exact), abs(numeric), 1e-8)
            worst_rel = max(worst_rel, rel_err)
            worst_abs = max(worst_abs, abs_err)
            if rel_err > tol and abs_err > atol:
                flagged = True
        report.entries.append(GradCheckEntry(name, len(indices), worst_rel, worst_abs, flagged))
        if flagged:
            logger.warning(f"Gradient check flagged {name}: rel={worst_rel:.3e} abs={worst_abs:.3e}")
    for p in params.values():
        p.zero_grad()
    return report
