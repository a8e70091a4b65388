"""Dense tensors with reverse-mode automatic differentiation.

Storage is plain numpy; every differentiable operation records its parents
and a vector-Jacobian closure on the tensor it produces. Calling
``backward()`` on a scalar result replays the tape in reverse topological
order and accumulates gradients into every tensor marked ``requires_grad``.

Conventions enforced here and relied on by everything downstream:

* dtype is float32 or float64, chosen per tensor (default configurable);
* any non-finite value produced by a public op raises ``NonFiniteError``
  instead of propagating;
* zero-norm guards use an epsilon of 1e-8 in float64 and 1e-6 in float32;
* kernels are deterministic: the same inputs give bit-identical outputs.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "NonFiniteError", "AutodiffError", "no_grad", "grad_enabled",
    "set_default_dtype", "get_default_dtype", "eps_norm",
    "add", "add_scalar", "sub", "neg", "mul", "scale", "matmul", "reshape",
    "concat", "reduce_sum", "reduce_mean", "relu", "exp", "log", "sqrt",
    "softmax", "dot", "cosine", "euclidean", "masked_mean_rows", "take_row",
    "broadcast_hw", "mul_map", "minmax_normalize", "softmax_cross_entropy",
    "mean_tensors",
]

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class AutodiffError(RuntimeError):
    """Misuse of the gradient tape (non-scalar root, double backward, ...)."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def eps_norm(dtype) -> float:
    """Zero-guard threshold for norms/ranges, per precision."""
    return 1e-8 if np.dtype(dtype) == np.dtype(np.float64) else 1e-6


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op",
                 "_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) \
                else _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._op = "leaf"
        self._done = False

    # -- introspection ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return (f"Tensor(shape={self.shape}, dtype={self.dtype.name}, "
                f"op={self._op}, requires_grad={self.requires_grad})")

    # -- graph management ---------------------------------------------------

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.dtype.type)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from this scalar through its tape."""
        if self.shape != ():
            raise AutodiffError(
                f"backward requires a scalar root, got shape {self.shape}")
        if not self._parents:
            raise AutodiffError(
                "backward on a detached graph: root has no recorded parents")
        if self._done:
            raise AutodiffError(
                "backward already called on this graph; re-run the forward "
                "pass to build a fresh tape")
        self._done = True

        order = _toposort(self)
        buf: dict[int, np.ndarray] = {
            id(self): np.asarray(1.0, dtype=self.dtype)}
        for node in order:  # root-first order
            g = buf.pop(id(node), None)
            if g is None or node._vjp is None:
                if g is not None and node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            for parent, contrib in zip(node._parents, node._vjp(g)):
                if contrib is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in buf:
                    buf[key] = buf[key] + contrib
                else:
                    buf[key] = contrib

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _toposort(root: Tensor) -> list[Tensor]:
    """Deterministic root-first topological order (iterative DFS)."""
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
    order.reverse()
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor],
            vjp: Callable | None, op: str) -> Tensor:
    """Wrap an op result, enforcing finiteness and tape rules."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, dtype=data.dtype.type)
    if track:
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
    else:
        out._op = op
    return out


def _need(t, name: str) -> Tensor:
    if not isinstance(t, Tensor):
        raise ValueError(f"{name} expects Tensor arguments, got {type(t)}")
    return t


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and scalar ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _need(a, "add"), _need(b, "add")
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def add_scalar(a: Tensor, s: float) -> Tensor:
    _need(a, "add_scalar")
    return _result(a.data + a.dtype.type(s), (a,), lambda g: (g,),
                   "add_scalar")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _need(a, "sub"), _need(b, "sub")
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _need(a, "mul"), _need(b, "mul")
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, s: float) -> Tensor:
    _need(a, "scale")
    s = a.dtype.type(s)
    return _result(a.data * s, (a,), lambda g: (g * s,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, a.dtype.type(0)), (a,),
                   lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    ad = a.data
    return _result(out, (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    _need(a, "reshape")
    old = a.shape
    return _result(a.data.reshape(shape), (a,),
                   lambda g: (g.reshape(old),), "reshape")


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_need(p, "concat") for p in parts]
    if not parts:
        raise ValueError("concat: empty input list")
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([p.data for p in parts], axis=axis),
                   parts, vjp, "concat")


def broadcast_hw(v: Tensor, height: int, width: int) -> Tensor:
    """Tile a length-c vector to an (height, width, c) map."""
    _need(v, "broadcast_hw")
    if v.ndim != 1:
        raise ValueError(f"broadcast_hw expects a vector, got {v.shape}")
    data = np.broadcast_to(v.data, (height, width, v.shape[0])).copy()
    return _result(data, (v,), lambda g: (g.sum(axis=(0, 1)),),
                   "broadcast_hw")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def reduce_sum(a: Tensor) -> Tensor:
    _need(a, "reduce_sum")
    shp = a.shape
    return _result(a.data.sum(dtype=a.dtype), (a,),
                   lambda g: (np.full(shp, g, dtype=g.dtype),), "reduce_sum")


def reduce_mean(a: Tensor) -> Tensor:
    _need(a, "reduce_mean")
    if a.size == 0:
        raise ValueError("reduce_mean over empty tensor")
    shp, n = a.shape, a.size
    return _result(a.data.mean(dtype=a.dtype), (a,),
                   lambda g: (np.full(shp, g / n, dtype=g.dtype),),
                   "reduce_mean")


def mean_tensors(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of same-shape tensors; identity for one element."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("mean_tensors: empty list")
    if len(tensors) == 1:
        return tensors[0]
    acc = tensors[0]
    for t in tensors[1:]:
        acc = add(acc, t)
    return scale(acc, 1.0 / len(tensors))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2Dx2D, 1Dx2D and 2Dx1D operands."""
    _need(a, "matmul"), _need(b, "matmul")
    ad, bd = a.data, b.data
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul: inner dims {a.shape} @ {b.shape}")
        vjp = lambda g: (g @ bd.T, ad.T @ g)
    elif a.ndim == 1 and b.ndim == 2:
        if a.shape[0] != b.shape[0]:
            raise ValueError(f"matmul: inner dims {a.shape} @ {b.shape}")
        vjp = lambda g: (bd @ g, np.outer(ad, g))
    elif a.ndim == 2 and b.ndim == 1:
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul: inner dims {a.shape} @ {b.shape}")
        vjp = lambda g: (np.outer(g, bd), ad.T @ g)
    else:
        raise ValueError(f"matmul: unsupported ranks {a.ndim}, {b.ndim}")
    return _result(ad @ bd, (a, b), vjp, "matmul")


def dot(a: Tensor, b: Tensor) -> Tensor:
    _need(a, "dot"), _need(b, "dot")
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"dot: need equal-length vectors, {a.shape} {b.shape}")
    ad, bd = a.data, b.data
    return _result(np.asarray(ad @ bd), (a, b),
                   lambda g: (g * bd, g * ad), "dot")


# ---------------------------------------------------------------------------
# nonlinear vector ops
# ---------------------------------------------------------------------------

def softmax(a: Tensor) -> Tensor:
    """Stable softmax over a 1-D tensor (max-shifted)."""
    _need(a, "softmax")
    if a.ndim != 1:
        raise ValueError(f"softmax expects a vector, got shape {a.shape}")
    if a.size == 0:
        raise ValueError("softmax over empty tensor")
    z = a.data - a.data.max()
    e = np.exp(z)
    y = e / e.sum()

    def vjp(g):
        return ((g - (g * y).sum()) * y,)

    return _result(y, (a,), vjp, "softmax")


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two vectors; 0 when either norm < eps."""
    _need(a, "cosine"), _need(b, "cosine")
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ValueError(
            f"cosine: need equal-length vectors, got {a.shape} {b.shape}")
    ad, bd = a.data, b.data
    eps = eps_norm(np.result_type(ad, bd))
    na = float(np.sqrt(ad @ ad))
    nb = float(np.sqrt(bd @ bd))
    if na < eps or nb < eps:
        out = np.asarray(0.0, dtype=np.result_type(ad, bd))
        return _result(out, (a, b), lambda g: (None, None), "cosine")
    c = float(ad @ bd) / (na * nb)

    def vjp(g):
        da = g * (bd / (na * nb) - c * ad / (na * na))
        db = g * (ad / (na * nb) - c * bd / (nb * nb))
        return da, db

    out = np.asarray(c, dtype=np.result_type(ad, bd))
    return _result(out, (a, b), vjp, "cosine")


def euclidean(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distance ||a - b||; zero-distance subgradient is 0."""
    _need(a, "euclidean"), _need(b, "euclidean")
    _same_shape(a, b, "euclidean")
    diff = a.data - b.data
    d = float(np.sqrt(np.sum(diff * diff)))
    eps = eps_norm(diff.dtype)

    def vjp(g):
        if d < eps:
            z = np.zeros_like(diff)
            return z, z.copy()
        da = g * diff / d
        return da, -da

    return _result(np.asarray(d, dtype=diff.dtype), (a, b), vjp, "euclidean")


def minmax_normalize(a: Tensor) -> Tensor:
    """Rescale to [0, 1]; degenerate range collapses to zeros.

    Not differentiable by design (used only in off-tape prior computation);
    the result never carries a tape.
    """
    _need(a, "minmax_normalize")
    if a.size == 0:
        raise ValueError("minmax_normalize over empty tensor")
    d = a.data
    lo, hi = d.min(), d.max()
    if hi - lo < eps_norm(d.dtype):
        out = np.zeros_like(d)
    else:
        out = (d - lo) / (hi - lo)
    return _result(out, (), None, "minmax_normalize")


# ---------------------------------------------------------------------------
# selection ops (discrete masks are constants; grads flow to selected values)
# ---------------------------------------------------------------------------

def masked_mean_rows(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over rows of (P, C) x where boolean mask is True."""
    _need(x, "masked_mean_rows")
    mask = np.asarray(mask, dtype=bool)
    if x.ndim != 2 or mask.shape != (x.shape[0],):
        raise ValueError(
            f"masked_mean_rows: x {x.shape} vs mask {mask.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("masked_mean_rows: empty selection")
    shp = x.shape

    def vjp(g):
        dx = np.zeros(shp, dtype=g.dtype)
        dx[mask] = g / count
        return (dx,)

    return _result(x.data[mask].mean(axis=0), (x,), vjp, "masked_mean_rows")


def take_row(x: Tensor, index: int) -> Tensor:
    """Row of a (P, C) matrix as a vector, differentiable into that row."""
    _need(x, "take_row")
    if x.ndim != 2:
        raise ValueError(f"take_row expects 2-D input, got {x.shape}")
    index = int(index)
    if not 0 <= index < x.shape[0]:
        raise ValueError(f"take_row: index {index} out of range {x.shape[0]}")
    shp = x.shape

    def vjp(g):
        dx = np.zeros(shp, dtype=g.dtype)
        dx[index] = g
        return (dx,)

    return _result(x.data[index].copy(), (x,), vjp, "take_row")


def mul_map(x: Tensor, weight: Tensor) -> Tensor:
    """Scale an (H, W, C) tensor by an (H, W) weight map."""
    _need(x, "mul_map"), _need(weight, "mul_map")
    if x.ndim != 3 or weight.shape != x.shape[:2]:
        raise ValueError(f"mul_map: x {x.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data

    def vjp(g):
        return g * wd[:, :, None], (g * xd).sum(axis=2)

    return _result(xd * wd[:, :, None], (x, weight), vjp, "mul_map")


# ---------------------------------------------------------------------------
# segmentation loss
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean per-pixel cross entropy of (H, W, 2) logits vs binary target.

    Channel 0 is background, channel 1 foreground. The target is a constant
    {0, 1} map; equivalent to binary cross entropy on the softmax foreground
    probability.
    """
    _need(logits, "softmax_cross_entropy")
    if logits.ndim != 3 or logits.shape[2] != 2:
        raise ValueError(
            f"softmax_cross_entropy expects (H, W, 2) logits, got "
            f"{logits.shape}")
    target = np.asarray(target)
    if target.shape != logits.shape[:2]:
        raise ValueError(
            f"softmax_cross_entropy: target {target.shape} vs logits "
            f"{logits.shape}")
    uniq = np.unique(target)
    if not np.all(np.isin(uniq, (0, 1))):
        raise ValueError("softmax_cross_entropy: target must be binary")
    y = target.astype(logits.dtype)

    z = logits.data
    m = z.max(axis=2, keepdims=True)
    e = np.exp(z - m)
    denom = e.sum(axis=2, keepdims=True)
    p = e / denom
    logp = (z - m) - np.log(denom)
    n = y.shape[0] * y.shape[1]
    ce = -(y * logp[:, :, 1] + (1.0 - y) * logp[:, :, 0]).sum() / n

    def vjp(g):
        onehot = np.stack([1.0 - y, y], axis=2)
        return ((p - onehot) * (g / n),)

    return _result(np.asarray(ce, dtype=logits.dtype), (logits,), vjp,
                   "softmax_cross_entropy")
