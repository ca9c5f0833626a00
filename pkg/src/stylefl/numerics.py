"""Float64 tensors with reverse-mode differentiation, plus the shared
differentiable primitives and a finite-difference gradient checker.

Every operation records a closure that maps the output gradient to the
input gradients; :meth:`Tensor.backward` replays them in reverse
topological order. Elementwise binary operations follow numpy broadcasting
and reduce gradients back to each operand's shape; anything numpy cannot
broadcast raises :class:`ShapeError`.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, NumericError, ShapeError

EPS = 1e-8


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...], op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a} and {b}") from None


class Tensor:
    """A node in the computation graph.

    ``value`` is treated as immutable once constructed; only optimizers
    (single writer) replace the value of a trainable leaf.
    """

    __slots__ = ("value", "grad", "trainable", "requires_grad", "_parents", "_backward")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(
        self,
        value,
        *,
        trainable: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
    ) -> None:
        self.value = _as_array(value)
        self.trainable = trainable
        self.requires_grad = trainable or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self.grad = np.zeros_like(self.value) if trainable else None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        """Entries in row-major order."""
        return self.value.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def __repr__(self) -> str:
        flag = ", trainable" if self.trainable else ""
        return f"Tensor(shape={self.shape}{flag})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    # -- graph traversal --------------------------------------------------
    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every trainable leaf."""
        if seed is None:
            if self.value.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.value)
        if not self.requires_grad:
            return
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        grads: dict[int, np.ndarray] = {id(self): np.asarray(seed, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.trainable:
                node.grad = node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators --------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return Tensor(-self.value, _parents=(self,), _backward=lambda g: (-g,))

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key) -> "Tensor":
        return index(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


DifferentiableParam = Tensor


def param(value) -> Tensor:
    """Trainable leaf with a zeroed gradient."""
    return Tensor(np.array(value, dtype=np.float64), trainable=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return Tensor(
        a.value + b.value,
        _parents=(a, b),
        _backward=lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return Tensor(
        a.value - b.value,
        _parents=(a, b),
        _backward=lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    av, bv = a.value, b.value
    return Tensor(
        av * bv,
        _parents=(a, b),
        _backward=lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")
    av, bv = a.value, b.value
    out = av / bv
    return Tensor(
        out,
        _parents=(a, b),
        _backward=lambda g: (
            _unbroadcast(g / bv, av.shape),
            _unbroadcast(-g * out / bv, bv.shape),
        ),
    )


def power(a: Tensor, exponent: float) -> Tensor:
    av = a.value
    return Tensor(
        av**exponent,
        _parents=(a,),
        _backward=lambda g: (g * exponent * av ** (exponent - 1),),
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return Tensor(out, _parents=(a,), _backward=lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    av = a.value
    return Tensor(np.log(av), _parents=(a,), _backward=lambda g: (g / av,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.value)
    return Tensor(out, _parents=(a,), _backward=lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)
    return Tensor(out, _parents=(a,), _backward=lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    av = a.value
    out = np.empty_like(av)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    ez = np.exp(av[~pos])
    out[~pos] = ez / (1.0 + ez)
    return Tensor(out, _parents=(a,), _backward=lambda g: (g * out * (1.0 - out),))


def absolute(a: Tensor) -> Tensor:
    av = a.value
    return Tensor(np.abs(av), _parents=(a,), _backward=lambda g: (g * np.sign(av),))


def maximum(a: Tensor, floor: float) -> Tensor:
    """Elementwise max with a constant; gradient flows where ``a > floor``."""
    av = a.value
    keep = av > floor
    return Tensor(np.where(keep, av, floor), _parents=(a,), _backward=lambda g: (g * keep,))


def gelu(a: Tensor) -> Tensor:
    c = np.sqrt(2.0 / np.pi)
    inner = tanh((a + 0.044715 * a**3) * c)
    return 0.5 * a * (1.0 + inner)


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select from ``a`` where the constant mask is true, else from ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    try:
        out = np.where(cond, a.value, b.value)
    except ValueError:
        raise ShapeError(f"where: cannot broadcast {cond.shape}, {a.shape}, {b.shape}") from None
    sa, sb = a.shape, b.shape
    return Tensor(
        out,
        _parents=(a, b),
        _backward=lambda g: (
            _unbroadcast(np.where(cond, g, 0.0), sa),
            _unbroadcast(np.where(cond, 0.0, g), sb),
        ),
    )


# ---------------------------------------------------------------------------
# reductions and structural ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    out = a.value.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor(out, _parents=(a,), _backward=backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {shape}") from None
    return Tensor(out, _parents=(a,), _backward=lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor(
        a.value.transpose(axes),
        _parents=(a,),
        _backward=lambda g: (g.transpose(inverse),),
    )


def index(a: Tensor, key) -> Tensor:
    shape = a.shape
    out = a.value[key]

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return Tensor(out, _parents=(a,), _backward=backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, _parents=tuple(tensors), _backward=backward)


def matmul(a, b) -> Tensor:
    """Matrix product for operands of rank >= 2 (leading dims broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return Tensor(
        av @ bv,
        _parents=(a, b),
        _backward=lambda g: (
            _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape),
            _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape),
        ),
    )


def norm(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm with a zero (sub)gradient at the origin."""
    av = a.value
    n = np.sqrt((av * av).sum(axis=axis, keepdims=True))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0.0, n, 1.0)
        return (g * np.where(n > 0.0, av / safe, 0.0),)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return Tensor(out, _parents=(a,), _backward=backward)


# ---------------------------------------------------------------------------
# softmax family


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    av = a.value
    shifted = av - av.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return Tensor(
        out,
        _parents=(a,),
        _backward=lambda g: (g - probs * g.sum(axis=axis, keepdims=True),),
    )


def masked_softmax(a: Tensor, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` restricted to ``mask``.

    Masked positions get weight exactly 0; a slice with no unmasked entry
    is all zeros.
    """
    av = a.value
    if mask is None:
        mask = np.ones(av.shape, dtype=bool)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), av.shape)
    filled = np.where(mask, av, -np.inf)
    top = filled.max(axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(np.where(mask, av - top, 0.0)), 0.0)
    total = e.sum(axis=axis, keepdims=True)
    out = e / np.where(total > 0.0, total, 1.0)
    return Tensor(
        out,
        _parents=(a,),
        _backward=lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
    )


def softmax_scaled(scores, scale: float = 1.0, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """softmax(scores / scale) along ``axis``, optionally masked."""
    scores = as_tensor(scores)
    if scores.value.size == 0 or scores.shape[axis] == 0:
        raise DomainError("softmax over an empty score vector")
    if not scale > 0:
        raise DomainError(f"softmax scale must be positive, got {scale}")
    return masked_softmax(scores * (1.0 / scale), mask, axis=axis)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (n, C)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    lp = log_softmax(logits, axis=-1)
    picked = lp[np.arange(labels.shape[0]), labels]
    return -picked.mean()


# ---------------------------------------------------------------------------
# geometric primitives


def proto_logits(h, prototypes) -> Tensor:
    """Negative squared Euclidean distance from features to prototypes.

    ``h`` is (d,) or (n, d); ``prototypes`` is (C, d). Returns (C,) or (n, C),
    evaluated as ``2 h.p - |h|^2 - |p|^2``.
    """
    h, prototypes = as_tensor(h), as_tensor(prototypes)
    if prototypes.ndim != 2:
        raise ShapeError(f"prototypes must be (C, d), got {prototypes.shape}")
    single = h.ndim == 1
    if single:
        h = h.reshape(1, -1)
    if h.ndim != 2 or h.shape[1] != prototypes.shape[1]:
        raise ShapeError(f"proto_logits: features {h.shape} vs prototypes {prototypes.shape}")
    if h.shape[1] < 1 or prototypes.shape[0] < 1:
        raise ShapeError("proto_logits needs d >= 1 and C >= 1")
    cross = h @ prototypes.T
    hh = (h * h).sum(axis=1, keepdims=True)
    pp = (prototypes * prototypes).sum(axis=1).reshape(1, -1)
    out = 2.0 * cross - hh - pp
    return out.reshape(-1) if single else out


def layer_norm(x, gain, bias, eps: float = EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x = as_tensor(x)
    if x.shape[-1] < 2:
        raise DomainError("layer_norm needs at least 2 features")
    if not eps > 0:
        raise DomainError("layer_norm eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / sqrt(var + eps) * gain + bias


def cosine_sim(a, b, eps: float = EPS) -> Tensor:
    """Cosine similarity along the last axis; norms below ``eps`` are clamped."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"cosine_sim: dims differ, {a.shape} vs {b.shape}")
    dot = (a * b).sum(axis=-1)
    return dot / (maximum(norm(a), eps) * maximum(norm(b), eps))


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    The error per entry is ``|analytic - numeric| / max(1, |numeric|)``.
    ``max_entries`` caps how many randomly chosen entries per parameter are
    probed.
    """
    if not 1e-6 <= step <= 1e-3:
        raise DomainError(f"finite-difference step {step} outside [1e-6, 1e-3]")
    params = list(params)
    for p in params:
        p.zero_grad()
    out = f()
    if not np.all(np.isfinite(out.value)):
        raise NumericError("grad_check: objective is not finite")
    out.backward()
    analytic = [p.grad.copy() for p in params]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.value.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = rng.choice(flat.size, size=max_entries, replace=False)
        for i in indices:
            orig = flat[i]
            flat[i] = orig + step
            up = f().item()
            flat[i] = orig - step
            down = f().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError("grad_check: objective is not finite at a perturbed point")
            numeric = (up - down) / (2.0 * step)
            err = abs(grad.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
