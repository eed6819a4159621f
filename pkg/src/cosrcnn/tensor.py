"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable op builds its output with :func:`_result`, which records
the parents and a closure that maps the output gradient to parent gradients.
:func:`build_tape` recovers the executed ops in topological order and
:meth:`Tensor.backward` replays that tape in reverse.

Broadcasting is limited to scalars (0-d tensors or Python numbers); the only
exceptions are the fused ``linear`` and ``conv2d`` bias terms.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

L2_EPS = 1e-12

_grad_enabled = True
# Counters used to assert that evaluation performs no gradient work.
stats = {"recorded_ops": 0, "backward_calls": 0}


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every ``requires_grad`` leaf."""
        if self.data.size != 1 or self.data.ndim > 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        stats["backward_calls"] += 1
        tape = build_tape(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(tape):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    parents = tuple(parents)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        stats["recorded_ops"] += 1
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def build_tape(root: Tensor) -> list[Tensor]:
    """Return every node reachable from ``root``, inputs before consumers."""
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcast)")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    return np.asarray(g.sum()) if _is_scalar(t) and g.ndim else g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "add")

    def backward(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "sub")

    def backward(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "mul")

    def backward(g):
        return _reduce_to(g * b.data, a), _reduce_to(g * a.data, b)

    return _result(a.data * b.data, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        e = np.exp(x.data)
    return _result(e, (x,), lambda g: (g * e,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise FloatingPointError("log of non-positive value")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


# ---------------------------------------------------------------------------
# shape ops and reductions
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {x.shape}")
    return _result(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    out = np.array(x.data[idx], dtype=np.float64)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(out, (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor]) -> Tensor:
    return concat([reshape(t, (1,) + t.shape) for t in tensors], axis=0)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), backward, "sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(reduce_sum(x, axis, keepdims), 1.0 / n)


def reduce_max(x: Tensor, axis: int) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximal entry."""
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _result(out, (x,), backward, "max")


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    soft = e / s

    def backward(g):
        return (np.expand_dims(g, axis) * soft,)

    return _result(out, (x,), backward, "logsumexp")


# ---------------------------------------------------------------------------
# linear algebra and layers
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``bias`` broadcast over rows."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gb = g.sum(axis=0) if bias is not None else None
        return g @ weight.data.T, x.data.T @ g, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, "linear")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution over NCHW input with OIHW weights (im2col + one matmul)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} does not match weight {weight.shape}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: unsupported stride {stride}")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]               # (n, c, ho, wo, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, c * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (g2.T @ cols).reshape(weight.shape)
        gcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + w]
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, "conv2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: ``(N, C, H, W) -> (N, C)``."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    hw = x.shape[2] * x.shape[3]

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),)

    return _result(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


def l2_normalize(x: Tensor) -> Tensor:
    """Divide by the Euclidean norm along the last axis, guarded by ``L2_EPS``."""
    norm = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    denom = np.maximum(norm, L2_EPS)
    y = x.data / denom
    active = norm > L2_EPS

    def backward(g):
        proj = np.sum(g * y, axis=-1, keepdims=True)
        return (np.where(active, (g - y * proj) / denom, g / denom),)

    return _result(y, (x,), backward, "l2_normalize")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _targets(targets, n: int, k: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(targets))
    if t.shape != (n,):
        raise ShapeError(f"expected {n} targets, got shape {t.shape}")
    if not np.issubdtype(t.dtype, np.integer):
        if not np.all(t == np.round(t)):
            raise ValueError("class targets must be integers")
        t = t.astype(np.int64)
    if np.any(t < 0) or np.any(t >= k):
        raise ValueError(f"target out of range [0, {k}): {t.tolist()}")
    return t


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over rows.

    A 1-D ``logits`` is treated as a single row with a scalar target.
    """
    z = logits.data if logits.ndim == 2 else logits.data[None, :]
    n, k = z.shape
    t = _targets(targets, n, k)
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = np.mean(lse - shifted[np.arange(n), t])
    soft = np.exp(shifted - lse[:, None])

    def backward(g):
        d = soft.copy()
        d[np.arange(n), t] -= 1.0
        d *= g / n
        return (d.reshape(logits.shape),)

    return _result(np.asarray(loss), (logits,), backward, "softmax_cross_entropy")


def binary_cross_entropy_with_logits(logits: Tensor, targets, normalizer: float | None = None) -> Tensor:
    """Summed elementwise BCE divided by ``normalizer`` (default: element count)."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"bce: targets {t.shape} vs logits {logits.shape}")
    z = logits.data
    norm = float(logits.size if normalizer is None else normalizer)
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    s = _sigmoid_np(z)
    return _result(np.asarray(per.sum() / norm), (logits,),
                   lambda g: (g * (s - t) / norm,), "bce_with_logits")


def smooth_l1(pred: Tensor, target, beta: float = 1.0, normalizer: float = 1.0) -> Tensor:
    """Summed smooth-L1 (Huber with transition ``beta``) divided by ``normalizer``."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ShapeError(f"smooth_l1: target {t.shape} vs pred {pred.shape}")
    d = pred.data - t
    ad = np.abs(d)
    quad = ad < beta
    per = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    grad = np.where(quad, d / beta, np.sign(d))
    return _result(np.asarray(per.sum() / normalizer), (pred,),
                   lambda g: (g * grad / normalizer,), "smooth_l1")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


def logaddexp(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"logaddexp: shapes {a.shape} and {b.shape} differ")
    out = np.logaddexp(a.data, b.data)
    wa = np.exp(a.data - out)
    wb = np.exp(b.data - out)
    return _result(out, (a, b), lambda g: (g * wa, g * wb), "logaddexp")


def where(cond, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise select; ``cond`` is a constant boolean array."""
    a, b = _as_tensor(a), _as_tensor(b)
    c = np.asarray(cond, dtype=bool)
    if a.shape != b.shape or c.shape != a.shape:
        raise ShapeError(f"where: shapes {c.shape}, {a.shape}, {b.shape} differ")
    return _result(np.where(c, a.data, b.data), (a, b),
                   lambda g: (np.where(c, g, 0.0), np.where(c, 0.0, g)), "where")
