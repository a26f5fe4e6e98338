"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to parent gradients.
:func:`build_tape` linearises that graph into topological order and
:meth:`Tensor.backward` walks it in reverse, visiting each node once.

Gradients accumulate into ``.grad`` across backward calls; they are only
cleared by the optimizer (:func:`adam_step`) or :meth:`Tensor.zero_grad`.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, DomainError, UsageError

__all__ = [
    "Tensor",
    "no_grad",
    "is_grad_enabled",
    "build_tape",
    "matmul",
    "conv2d",
    "maxpool2d",
    "relu",
    "tanh",
    "flatten",
    "concat",
    "row_norm",
    "clamp_min",
    "softmax",
    "log_softmax",
    "softmax_cross_entropy",
    "AdamState",
    "Adam",
    "adam_step",
]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An n-dimensional float64 array that can take part in autodiff."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = ""

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._op = op
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @classmethod
    def zeros(cls, *shape: int, requires_grad: bool = False) -> Tensor:
        return cls(np.zeros(shape), requires_grad=requires_grad)

    # -- basic properties ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other) -> Tensor:
        other = _as_tensor(other)
        _check_broadcast(self, other, "add")
        a_shape, b_shape = self.shape, other.shape
        return Tensor._result(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        other = _as_tensor(other)
        _check_broadcast(self, other, "sub")
        a_shape, b_shape = self.shape, other.shape
        return Tensor._result(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
            "sub",
        )

    def __rsub__(self, other) -> Tensor:
        return _as_tensor(other) - self

    def __neg__(self) -> Tensor:
        return Tensor._result(-self.data, (self,), lambda g: (-g,), "neg")

    def __mul__(self, other) -> Tensor:
        other = _as_tensor(other)
        _check_broadcast(self, other, "mul")
        a, b = self.data, other.data
        return Tensor._result(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = _as_tensor(other)
        _check_broadcast(self, other, "div")
        a, b = self.data, other.data
        return Tensor._result(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
            "div",
        )

    def __rtruediv__(self, other) -> Tensor:
        return _as_tensor(other) / self

    def __pow__(self, exponent: float) -> Tensor:
        if isinstance(exponent, Tensor):
            raise UsageError("only scalar exponents are supported")
        a = self.data
        p = float(exponent)
        return Tensor._result(a**p, (self,), lambda g: (g * p * a ** (p - 1),), "pow")

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    # -- reductions and shape ops ---------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._result(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._result(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape")

    def flatten(self) -> Tensor:
        return flatten(self)

    def relu(self) -> Tensor:
        return relu(self)

    def tanh(self) -> Tensor:
        return tanh(self)

    def exp(self) -> Tensor:
        out = np.exp(self.data)
        return Tensor._result(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> Tensor:
        a = self.data
        return Tensor._result(np.log(a), (self,), lambda g: (g / a,), "log")

    def sqrt(self) -> Tensor:
        out = np.sqrt(self.data)
        return Tensor._result(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    # -- autodiff --------------------------------------------------------------

    def backward(self) -> None:
        """Back-propagate from this scalar into every tensor that requires grad."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("loss is not connected to any tensor that requires grad")
        tape = build_tape(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(tape):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def build_tape(root: Tensor) -> list[Tensor]:
    """Return the graph under ``root`` in topological order (parents first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- primitives ------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    return x.reshape(x.shape[0], -1)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from exc
    return Tensor._result(data, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def row_norm(x: Tensor) -> Tensor:
    """Euclidean norm of each row of a 2-d tensor; zero rows get a zero gradient."""
    if x.ndim != 2:
        raise DimensionError(f"row_norm expects a 2-d tensor, got {x.shape}")
    xd = x.data
    norms = np.sqrt((xd * xd).sum(axis=1))

    def backward(g):
        safe = np.where(norms > 0, norms, 1.0)
        return ((g / safe)[:, None] * xd * (norms > 0)[:, None],)

    return Tensor._result(norms, (x,), backward, "row_norm")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """Elementwise ``max(x, floor)``; the gradient is blocked where the floor is active."""
    mask = x.data >= floor
    return Tensor._result(np.where(mask, x.data, floor), (x,), lambda g: (g * mask,), "clamp_min")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of ``x[n,c,h,w]`` with ``kernel[o,c,kh,kw]``, zero padded."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {kc}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid stride={stride} padding={padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    wd = kernel.data
    out = np.einsum("ncijkl,ockl->noij", windows, wd, optimize=True)

    def backward(g):
        dk = np.einsum("ncijkl,noij->ockl", windows, g, optimize=True)
        cols = np.einsum("noij,ockl->ncijkl", g, wd, optimize=True)
        dxp = np.zeros((n, c, hp, wp))
        for a in range(kh):
            for b in range(kw):
                dxp[:, :, a : a + stride * oh : stride, b : b + stride * ow : stride] += cols[..., a, b]
        dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return dx, dk

    return Tensor._result(out, (x, kernel), backward, "conv2d")


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects a 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    oh, ow = h // size, w // size
    if oh == 0 or ow == 0:
        raise DimensionError(f"maxpool2d: window {size} larger than input {h}x{w}")
    cropped = x.data[:, :, : oh * size, : ow * size]
    blocks = cropped.reshape(n, c, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dblocks = np.zeros_like(blocks)
        np.put_along_axis(dblocks, arg[..., None], g[..., None], axis=-1)
        d = dblocks.reshape(n, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * size, ow * size)
        dx = np.zeros((n, c, h, w))
        dx[:, :, : oh * size, : ow * size] = d
        return (dx,)

    return Tensor._result(out, (x,), backward, "maxpool2d")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a plain array (no graph recording)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, target_probs) -> Tensor:
    """Mean over rows of ``-sum_k target[k] * log softmax(logits)[k]``.

    Targets must be non-negative rows summing to one (within 1e-6). They are
    treated as constants.
    """
    t = target_probs.data if isinstance(target_probs, Tensor) else np.asarray(target_probs, dtype=np.float64)
    if logits.ndim != 2 or t.shape != logits.shape:
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape} vs targets {t.shape}")
    if (t < 0).any():
        raise DomainError("softmax_cross_entropy: negative target probability")
    if not np.allclose(t.sum(axis=1), 1.0, rtol=0.0, atol=1e-6):
        raise DomainError("softmax_cross_entropy: target rows must sum to 1")
    n = logits.shape[0]
    logp = log_softmax(logits.data)
    loss = -(t * logp).sum() / n

    def backward(g):
        p = np.exp(logp)
        return (g * (p * t.sum(axis=1, keepdims=True) - t) / n,)

    return Tensor._result(np.asarray(loss), (logits,), backward, "softmax_cross_entropy")


# -- optimizer -------------------------------------------------------------------


@dataclass
class AdamState:
    """Moments and hyper-parameters for Adam with bias correction."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, params: Sequence[Tensor]) -> None:
    """Apply one Adam update in place, then zero every parameter's gradient."""
    for p in params:
        if p.grad is None:
            raise UsageError("adam_step: parameter has no gradient; call backward() first")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    elif len(state.m) != len(params):
        raise UsageError("adam_step: parameter list changed between steps")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.grad = np.zeros_like(p.data)


class Adam:
    """Convenience wrapper binding an :class:`AdamState` to a parameter list."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)

    def step(self) -> None:
        adam_step(self.state, self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
