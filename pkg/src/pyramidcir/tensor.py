"""Dense tensors with reverse-mode differentiation.

Only the operations the retrieval pipeline needs are provided.  Storage is a
C-ordered numpy array; each differentiable op records a closure that pushes
the output gradient back to its parents.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DegenerateInputError, DimensionError, NumericError, ParameterError

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True
_CHECKED = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ParameterError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def checked_mode(enabled: bool = True):
    """Toggle NaN/Inf detection on every op output."""
    global _CHECKED
    prev = _CHECKED
    _CHECKED = enabled
    try:
        yield
    finally:
        _CHECKED = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a sum is non-finite whenever any term is; locate the culprit only on failure
    if _CHECKED and not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(arr))[0])
        raise NumericError(f"non-finite value produced by {op} at index {bad}", index=bad)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or (data.dtype if isinstance(data, np.ndarray)
                                               and data.dtype in (np.float32, np.float64)
                                               else _DEFAULT_DTYPE))
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
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
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient over broadcast leading axes (bias-add only)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def _binary_shapes_ok(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    # bias-add: trailing dims of b equal trailing dims of a
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise DimensionError(f"{op}: incompatible shapes {list(a.shape)} and {list(b.shape)}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes_ok(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(_sum_to_shape(g, b.shape))

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes_ok(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-_sum_to_shape(g, b.shape))

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product of equal shapes, or scaling by a python scalar."""
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return scale(b, float(a))
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes_ok(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(_sum_to_shape(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.data.dtype.type(c)

    def backward(g):
        a._accumulate(g * c)

    return _result(a.data * c, (a,), backward, "scale")


def add_const(a, c: np.ndarray) -> Tensor:
    """Add a non-differentiable constant (e.g. an attention mask)."""
    a = as_tensor(a)
    out = a.data + np.asarray(c, dtype=a.data.dtype)
    if out.shape != a.shape:
        raise DimensionError(f"add_const: constant {np.shape(c)} changes shape of {list(a.shape)}")

    def backward(g):
        a._accumulate(g)

    # masks may legitimately hold -inf before softmax; finiteness is checked downstream
    out_t = Tensor(out)
    if _GRAD_ENABLED and a.requires_grad:
        out_t.requires_grad = True
        out_t._parents = (a,)
        out_t._backward = backward
    return out_t


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out)

    return _result(out, (a,), backward, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g / a.data)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), backward, "log")


def square(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(2.0 * g * a.data)

    return _result(a.data * a.data, (a,), backward, "square")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    t = x * x
    t *= 0.044715 * _GELU_C
    t += _GELU_C
    t *= x
    np.tanh(t, out=t)
    out = t + 1.0
    out *= x
    out *= 0.5

    def backward(g):
        x2 = x * x
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        a._accumulate(g * d)

    return _result(out, (a,), backward, "gelu")


# ---------------------------------------------------------------- reductions / shape

def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _result(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {list(a.shape)} as {list(shape)}") from exc

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _result(out, (a,), backward, "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[:-2] + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))

    def backward(g):
        a._accumulate(np.transpose(g, inv))

    return _result(out, (a,), backward, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _result(out, tensors, backward, "concat")


def take_rows(table, index) -> Tensor:
    """Gather rows of a 2-D table; output shape is index.shape + (cols,)."""
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError("take_rows expects a 2-D table")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise DimensionError("take_rows: index out of range")
    out = table.data[index]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accumulate(gt)

    return _result(out, (table,), backward, "take_rows")


def pick(a, index) -> Tensor:
    """out[r] = a[r, index[r]] for a 2-D tensor."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.shape[0])
    out = a.data[rows, index]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, index), g)
        a._accumulate(ga)

    return _result(out, (a,), backward, "pick")


def replace_first_token(x, values) -> Tensor:
    """Return x with x[:, 0, :] replaced by ``values`` (B x D)."""
    x, values = as_tensor(x), as_tensor(values)
    if values.shape != (x.shape[0], x.shape[2]):
        raise DimensionError(f"replace_first_token: expected {[x.shape[0], x.shape[2]]}, got {list(values.shape)}")
    out = x.data.copy()
    out[:, 0, :] = values.data

    def backward(g):
        if x.requires_grad:
            gx = g.copy()
            gx[:, 0, :] = 0.0
            x._accumulate(gx)
        if values.requires_grad:
            values._accumulate(g[:, 0, :])

    return _result(out, (x, values), backward, "replace_first_token")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a plain (k, n) matrix
    shared across the batch or has the same batch axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ {list(a.shape)} x {list(b.shape)}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes differ {list(a.shape)} x {list(b.shape)}")
    shared = b.ndim == 2
    if shared and a.ndim > 2:
        k = a.shape[-1]
        out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (b.shape[1],))
    else:
        out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if shared:
                k = a.shape[-1]
                b._accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
            else:
                b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _result(out, (a, b), backward, "matmul")


# ---------------------------------------------------------------- row-wise ops

def row_softmax(x, temperature: float = 1.0, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along the last axis of ``x / temperature``.

    ``mask`` is an optional additive constant (broadcast against ``x``) applied
    after the temperature, e.g. a causal attention mask of large negatives.
    """
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    x = as_tensor(x)
    out = x.data / x.data.dtype.type(temperature) if temperature != 1.0 else x.data.copy()
    if mask is not None:
        out += mask
    out -= out.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)

    def backward(g):
        gx = g * out
        gx -= out * gx.sum(axis=-1, keepdims=True)
        if temperature != 1.0:
            gx /= temperature
        x._accumulate(gx)

    return _result(out, (x,), backward, "row_softmax")


def log_softmax(x, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    x = as_tensor(x)
    z = x.data / x.data.dtype.type(temperature)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def backward(g):
        x._accumulate((g - soft * g.sum(axis=-1, keepdims=True)) / temperature)

    return _result(out, (x,), backward, "log_softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError("layer_norm: gain/bias must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            gx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            x._accumulate(gx)

    return _result(out, (x, gamma, beta), backward, "layer_norm")


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """Scale each vector along the last axis to unit L2 norm."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if (norm <= eps).any():
        bad = tuple(int(i) for i in np.argwhere(norm[..., 0] <= eps)[0]) if x.ndim > 1 else ()
        raise DegenerateInputError(f"cannot normalize a near-zero vector (index {bad})", index=bad)
    out = x.data / norm

    def backward(g):
        x._accumulate((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm)

    return _result(out, (x,), backward, "l2_normalize")


# ---------------------------------------------------------------- gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray
    worst_index: tuple


def numeric_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(Tensor(x)).item()
            flat[i] = orig - step
            fm = f(Tensor(x)).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                idx = tuple(int(j) for j in np.unravel_index(i, x.shape))
                raise NumericError(f"non-finite objective while perturbing index {idx}", index=idx)
            gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5, tol: float = 1e-4,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f`` at ``x`` with central differences.

    Relative error per element is |a - n| / max(|a|, |n|, floor).
    """
    if not step > 0:
        raise ParameterError("step must be positive")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x.copy(), requires_grad=True)
    out = f(xt)
    if out.size != 1:
        raise DimensionError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x)
    numeric = numeric_gradient(f, x, step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
    err = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(err, err <= tol, analytic, numeric, tuple(int(i) for i in worst))


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None)))
