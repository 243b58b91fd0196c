"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable value is a :class:`Tensor` wrapping a contiguous numpy
array.  Operations record their inputs and an adjoint closure; calling
:func:`backward` on a scalar replays those adjoints in reverse topological
order and accumulates gradients into leaf tensors (normally
:class:`Parameter` instances).  The graph is consumed by the backward pass.

Heavier kernels (convolution, Haar transform, selective scan) live next to
the modules that use them and plug in through :func:`make_op`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

FLOAT_TYPES = (np.dtype(np.float32), np.dtype(np.float64))

_grad_enabled = True


class ShapeError(ValueError):
    pass


class TapeConsumedError(RuntimeError):
    pass


class GradcheckError(ArithmeticError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _as_float_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in FLOAT_TYPES:
        arr = arr.astype(np.float32 if arr.dtype == np.float16 else np.float64)
    return arr


class Tensor:
    """An n-d float array plus the bookkeeping needed for reverse mode."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self._requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""
        self._consumed = False

    # -- metadata ---------------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @requires_grad.setter
    def requires_grad(self, value: bool):
        self._requires_grad = bool(value)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def astype(self, dtype) -> Tensor:
        return cast(self, dtype)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operators ---------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce(self, axis, "sum", keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, axis, "mean", keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Parameter(Tensor):
    """A trainable leaf.  ``frozen`` parameters never receive gradient."""

    def __init__(self, data, frozen: bool = False, dtype=None):
        super().__init__(np.array(_as_float_array(data, dtype), copy=True))
        self.frozen = bool(frozen)
        self.grad = np.zeros_like(self.data)

    @property
    def requires_grad(self) -> bool:
        return not self.frozen

    @requires_grad.setter
    def requires_grad(self, value: bool):
        self.frozen = not value

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g):
        if self.frozen:
            return
        if self.grad is None or self.grad.shape != self.data.shape:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def assign(self, value):
        """Overwrite the value in place (dtype preserved)."""
        value = _as_float_array(value)
        if value.shape != self.shape:
            raise ShapeError(f"cannot assign shape {value.shape} to parameter of shape {self.shape}")
        self.data[...] = value

    def cast_(self, dtype):
        self.data = self.data.astype(dtype)
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter(shape={self.shape}, dtype={self.dtype}, frozen={self.frozen})"


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def lift(x, like: Tensor | None = None) -> Tensor:
    """Wrap constants as non-differentiable tensors matching ``like``'s dtype."""
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str = "") -> Tensor:
    """Create the output node of a differentiable operation.

    ``backward`` receives the output adjoint and returns one adjoint (or
    ``None``) per parent, in order.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out._requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable trainable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a single-element loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeConsumedError("this tape was already consumed by an earlier backward call")
    if not loss.requires_grad:
        loss._consumed = True
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node._accumulate(g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._requires_grad = False
        node._consumed = True
    loss._consumed = True


# ---------------------------------------------------------------------------
# element-wise
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = lift(a, b)
    if not isinstance(b, Tensor):
        b = lift(b, a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from None
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return make_op(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                              _unbroadcast(g * a.data, b.shape) if b.requires_grad else None),
                   "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(out, (a, b), bw, "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_op(a.data * a.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_op(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split evaluation keeps exp() from overflowing on either tail
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype)
    return make_op(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0, x).astype(a.dtype)

    def bw(g):
        e = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1 / (1 + e), e / (1 + e))
        return (g * sig,)

    return make_op(out, (a,), bw, "softplus")


def absolute(a: Tensor) -> Tensor:
    return make_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    out = a.data ** p
    return make_op(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def square(a: Tensor) -> Tensor:
    return make_op(a.data * a.data, (a,), lambda g: (2 * g * a.data,), "square")


_UNARY = {
    "exp": exp,
    "log": log,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softplus": softplus,
    "abs": absolute,
    "sqrt": sqrt,
}


def ew_op(a, b=None, kind: str = "add", constant: float | None = None) -> Tensor:
    """Dispatch an element-wise operation by name.

    Binary kinds: add, sub, mul, div.  ``scale`` multiplies ``a`` by
    ``constant``.  Everything else is unary.
    """
    if kind in ("add", "sub", "mul", "div"):
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return {"add": add, "sub": sub, "mul": mul, "div": div}[kind](a, b)
    a = lift(a)
    if kind == "scale":
        if constant is None:
            raise ValueError("scale needs a constant")
        return scale(a, constant)
    try:
        return _UNARY[kind](a)
    except KeyError:
        raise ValueError(f"unknown element-wise kind {kind!r}") from None


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(out))


def reduce(a: Tensor, axis=None, kind: str = "sum", keepdims: bool = False) -> Tensor:
    """sum / mean / max / min over ``axis`` (``None`` = all, sum/mean only).

    max and min route the adjoint to the first attaining element along the
    reduced axis.
    """
    axes = _norm_axis(axis, a.ndim)
    if axes is not None and any(a.shape[ax] == 0 for ax in axes):
        raise ShapeError(f"cannot reduce over an empty axis of shape {a.shape}")
    if kind in ("sum", "mean"):
        if kind == "sum":
            out = a.data.sum(axis=axes, keepdims=keepdims)
            factor = 1.0
        else:
            out = a.data.mean(axis=axes, keepdims=keepdims)
            count = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
            factor = 1.0 / count

        def bw(g):
            if axes is not None and not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g * factor, a.shape).astype(a.dtype),)

        return make_op(np.asarray(out, dtype=a.dtype), (a,), bw, kind)

    if kind not in ("max", "min"):
        raise ValueError(f"unknown reduction {kind!r}")
    if axes is None or len(axes) != 1:
        raise ShapeError("max/min reduce over exactly one axis")
    ax = axes[0]
    idx = (np.argmax if kind == "max" else np.argmin)(a.data, axis=ax)
    idx_k = np.expand_dims(idx, ax)
    out = np.take_along_axis(a.data, idx_k, axis=ax)
    if not keepdims:
        out = np.squeeze(out, ax)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx_k, g, axis=ax)
        return (ga,)

    return make_op(out, (a,), bw, kind)


def sum(a: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    return reduce(a, axis, "sum", keepdims)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    return reduce(a, axis, "mean", keepdims)


def amax(a: Tensor, axis: int, keepdims=False) -> Tensor:
    return reduce(a, axis, "max", keepdims)


def amin(a: Tensor, axis: int, keepdims=False) -> Tensor:
    return reduce(a, axis, "min", keepdims)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def cast(a: Tensor, dtype) -> Tensor:
    dtype = np.dtype(dtype)
    if a.dtype == dtype:
        return a
    src = a.dtype
    return make_op(a.data.astype(dtype), (a,), lambda g: (g.astype(src),), "cast")


def getitem(a: Tensor, index) -> Tensor:
    """Basic (view) indexing only: ints, slices, Ellipsis, None."""
    idx = index if isinstance(index, tuple) else (index,)
    for i in idx:
        if not (i is None or i is Ellipsis or isinstance(i, (int, np.integer, slice))):
            raise TypeError("only basic indexing is differentiable; use permute_along for gathers")
    out = np.array(a.data[index], copy=True)

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[index] += g
        return (ga,)

    return make_op(out, (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    ax = axis % tensors[0].ndim
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}") from None
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return make_op(out, tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack needs equal shapes, got {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    return make_op(out, tensors, lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(tensors))), "stack")


def split(a: Tensor, sections: int, axis: int = -1) -> list[Tensor]:
    """Split into ``sections`` equal contiguous pieces along ``axis``."""
    ax = axis % a.ndim
    n = a.shape[ax]
    if n % sections:
        raise ShapeError(f"axis of extent {n} does not split into {sections} equal parts")
    w = n // sections
    out = []
    for k in range(sections):
        sl = [slice(None)] * a.ndim
        sl[ax] = slice(k * w, (k + 1) * w)
        out.append(getitem(a, tuple(sl)))
    return out


def permute_along(a: Tensor, perm: np.ndarray, axis: int) -> Tensor:
    """Reorder entries along ``axis``: ``out[..., i, ...] = a[..., perm[i], ...]``."""
    perm = np.asarray(perm)
    ax = axis % a.ndim
    if perm.shape != (a.shape[ax],) or not np.array_equal(np.sort(perm), np.arange(a.shape[ax])):
        raise ValueError("perm must be a permutation of the axis indices")
    inv = np.argsort(perm)
    return make_op(np.take(a.data, perm, axis=ax), (a,), lambda g: (np.take(g, inv, axis=ax),), "permute")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes (rank >= 2)."""
    a, b = lift(a, b if isinstance(b, Tensor) else None), lift(b, a if isinstance(a, Tensor) else None)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    out = a.data @ b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(out, (a, b), bw, "matmul")


def axis_linear(a: Tensor, matrix: np.ndarray, axis: int) -> Tensor:
    """Apply a constant matrix [m, n] along an axis of extent n."""
    M = np.asarray(matrix, dtype=a.dtype)
    ax = axis % a.ndim
    if M.ndim != 2 or M.shape[1] != a.shape[ax]:
        raise ShapeError(f"matrix {M.shape} cannot act on axis {ax} of shape {a.shape}")
    out = np.moveaxis(np.moveaxis(a.data, ax, -1) @ M.T, -1, ax)

    def bw(g):
        return (np.ascontiguousarray(np.moveaxis(np.moveaxis(g, ax, -1) @ M, -1, ax)),)

    return make_op(np.ascontiguousarray(out), (a,), bw, "axis_linear")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply per-channel affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gb

    return make_op(out.astype(x.dtype), (x, gamma, beta), bw, "layer_norm")


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def _rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _pick_components(size: int, max_components: int | None, rng) -> np.ndarray:
    if max_components is None or size <= max_components:
        return np.arange(size)
    rng = np.random.default_rng(0) if rng is None else rng
    return np.sort(rng.choice(size, max_components, replace=False))


def gradcheck(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5,
              max_components: int | None = None, rng=None) -> float:
    """Max relative error between backward() and central differences.

    ``f`` maps a tensor to a scalar tensor.  ``x`` should be float64.
    """
    x0 = np.array(_as_float_array(x), copy=True)
    xt = Tensor(x0.copy(), requires_grad=True)
    loss = f(xt)
    if not np.isfinite(loss.data).all():
        raise GradcheckError("non-finite loss at the base point")
    backward(loss)
    analytic = np.zeros_like(x0) if xt.grad is None else xt.grad
    comps = _pick_components(x0.size, max_components, rng)
    numeric = np.empty(len(comps))
    flat = x0.reshape(-1)
    with no_grad():
        for k, i in enumerate(comps):
            old = flat[i]
            flat[i] = old + eps
            fp = f(Tensor(x0.copy())).item()
            flat[i] = old - eps
            fm = f(Tensor(x0.copy())).item()
            flat[i] = old
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradcheckError(f"non-finite value while perturbing component {int(i)}")
            numeric[k] = (fp - fm) / (2 * eps)
    return float(_rel_err(analytic.reshape(-1)[comps], numeric).max(initial=0.0))


def gradcheck_params(f: Callable[[], Tensor], params: Iterable[Parameter], eps: float = 1e-5,
                     max_components: int | None = 64, rng=None, floor: float = 1e-8) -> float:
    """Like :func:`gradcheck` but perturbs parameters in place.

    ``f`` takes no arguments and rebuilds the loss from the current
    parameter values.  Frozen parameters are skipped.  ``floor`` bounds the
    relative-error denominator from below, so components whose true
    gradient is at the finite-difference noise level do not dominate.
    """
    params = [p for p in params if not p.frozen]
    for p in params:
        p.zero_grad()
    loss = f()
    backward(loss)
    worst = 0.0
    with no_grad():
        for j, p in enumerate(params):
            analytic = p.grad.reshape(-1).copy()
            comps = _pick_components(p.size, max_components,
                                     np.random.default_rng(j) if rng is None else rng)
            flat = p.data.reshape(-1)
            numeric = np.empty(len(comps))
            for k, i in enumerate(comps):
                old = flat[i]
                flat[i] = old + eps
                fp = f().item()
                flat[i] = old - eps
                fm = f().item()
                flat[i] = old
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise GradcheckError(f"non-finite value while perturbing component {int(i)} of parameter {j}")
                numeric[k] = (fp - fm) / (2 * eps)
            worst = max(worst, float(_rel_err(analytic[comps], numeric, floor).max(initial=0.0)))
    for p in params:
        p.zero_grad()
    return worst
