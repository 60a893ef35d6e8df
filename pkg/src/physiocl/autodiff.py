"""Minimal reverse-mode automatic differentiation on numpy arrays.

The graph supports exactly the operations the encoders, projection heads,
fusion head, and contrastive losses need.  Every operation registers a
backward rule, and `grad_check` / `gradcheck_all` verify each rule against
central finite differences.

Broadcasting is deliberately restricted: `add`/`sub` accept equal shapes or
a trailing-suffix bias; everything else requires exact shape agreement.
Use float64 (the default dtype) for gradient checking and float32 for
training speed via `set_default_dtype`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.dtype(np.float64)


def set_default_dtype(dtype) -> None:
    """Set the dtype used by `tensor` and fresh parameter arrays."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    _DEFAULT_DTYPE = dt


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


class Tensor:
    """A numpy array plus an optional position in a backward graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), op: str = "leaf"):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self.op = op
        self._parents = tuple(p for p in parents if p.requires_grad)
        self._backward: Callable[[], None] | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- graph ----------------------------------------------------------
    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    def take(self, index: int, axis: int):
        return take_index(self, index, axis)


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Wrap `data` as a Tensor in the current default dtype."""
    return Tensor(np.asarray(data, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=_DEFAULT_DTYPE), requires_grad=True)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g)
    else:
        t.grad = t.grad + g


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values produced by {op}")


# -- elementwise / structural primitives ---------------------------------


def _suffix_reduce(g: np.ndarray, target_shape) -> np.ndarray:
    """Sum `g` over the leading axes so it matches `target_shape`."""
    extra = g.ndim - len(target_shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _addlike(a, b, op_name: str, sign: float):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        # Suffix broadcast: one operand's shape must be a trailing suffix of
        # the other's (bias-add style); anything else is a contract violation.
        big, small = (a, b) if a.ndim >= b.ndim else (b, a)
        if big.shape[big.ndim - small.ndim:] != small.shape:
            raise ValueError(f"{op_name}: incompatible shapes {a.shape} and {b.shape}")
    data = a.data + sign * b.data
    out = Tensor(data, parents=(a, b), op=op_name)

    def _bw():
        g = out.grad
        if a.requires_grad:
            _accum(a, _suffix_reduce(g, a.shape))
        if b.requires_grad:
            _accum(b, sign * _suffix_reduce(g, b.shape))

    out._backward = _bw
    return out


def add(a, b) -> Tensor:
    return _addlike(a, b, "add", 1.0)


def sub(a, b) -> Tensor:
    return _addlike(a, b, "sub", -1.0)


def hadamard(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"hadamard: shapes differ {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data, parents=(a, b), op="hadamard")

    def _bw():
        g = out.grad
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    out._backward = _bw
    return out


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    out = Tensor(x.data * c, parents=(x,), op="scale")

    def _bw():
        if x.requires_grad:
            _accum(x, out.grad * c)

    out._backward = _bw
    return out


def matmul(a, b) -> Tensor:
    """Matrix product.

    Supported shapes: (2D, 2D); (ND, 2D) contracting the last axis; and
    (ND, ND) with identical leading batch axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul: operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims differ {a.shape} vs {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch dims differ {a.shape} vs {b.shape}")
    out = Tensor(np.matmul(a.data, b.data), parents=(a, b), op="matmul")

    def _bw():
        g = out.grad
        if a.requires_grad:
            _accum(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum(b, gb)

    out._backward = _bw
    return out


def transpose(x, axes=None) -> Tensor:
    """Permute axes; default swaps the last two."""
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(x.data, axes), parents=(x,), op="transpose")

    def _bw():
        if x.requires_grad:
            _accum(x, np.transpose(out.grad, inv))

    out._backward = _bw
    return out


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    orig = x.shape
    out = Tensor(x.data.reshape(shape), parents=(x,), op="reshape")

    def _bw():
        if x.requires_grad:
            _accum(x, out.grad.reshape(orig))

    out._backward = _bw
    return out


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis), parents=tuple(ts), op="concat")

    def _bw():
        g = out.grad
        offset = 0
        for t, size in zip(ts, sizes):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offset, offset + size)
                _accum(t, g[tuple(sl)])
            offset += size

    out._backward = _bw
    return out


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in ts], axis=axis), parents=tuple(ts), op="stack")

    def _bw():
        g = out.grad
        for i, t in enumerate(ts):
            if t.requires_grad:
                _accum(t, np.take(g, i, axis=axis))

    out._backward = _bw
    return out


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims), parents=(x,), op="sum")

    def _bw():
        if not x.requires_grad:
            return
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape).copy())

    out._backward = _bw
    return out


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return scale(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0), parents=(x,), op="relu")

    def _bw():
        if x.requires_grad:
            _accum(x, out.grad * mask)

    out._backward = _bw
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(s, parents=(x,), op="sigmoid")

    def _bw():
        if x.requires_grad:
            _accum(x, out.grad * s * (1.0 - s))

    out._backward = _bw
    return out


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    _check_finite(e, "exp")
    out = Tensor(e, parents=(x,), op="exp")

    def _bw():
        if x.requires_grad:
            _accum(x, out.grad * e)

    out._backward = _bw
    return out


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log: input must be strictly positive")
    out = Tensor(np.log(x.data), parents=(x,), op="log")

    def _bw():
        if x.requires_grad:
            _accum(x, out.grad / x.data)

    out._backward = _bw
    return out


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, parents=(x,), op="softmax")

    def _bw():
        if x.requires_grad:
            g = out.grad
            dot = (g * y).sum(axis=axis, keepdims=True)
            _accum(x, (g - dot) * y)

    out._backward = _bw
    return out


def clamp_min(x, floor: float) -> Tensor:
    x = as_tensor(x)
    mask = x.data > floor
    out = Tensor(np.where(mask, x.data, floor), parents=(x,), op="clamp_min")

    def _bw():
        if x.requires_grad:
            _accum(x, out.grad * mask)

    out._backward = _bw
    return out


def take_index(x, index: int, axis: int) -> Tensor:
    """Select one slice along `axis`, dropping that axis."""
    x = as_tensor(x)
    out = Tensor(np.take(x.data, index, axis=axis), parents=(x,), op="take_index")

    def _bw():
        if x.requires_grad:
            g = np.zeros_like(x.data)
            sl = [slice(None)] * x.ndim
            sl[axis] = index
            g[tuple(sl)] = out.grad
            _accum(x, g)

    out._backward = _bw
    return out


def take_per_row(x, indices) -> Tensor:
    """Gather x[b, indices[b]] for each row b of a 2-D tensor."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ValueError("take_per_row expects a 2-D tensor")
    idx = np.asarray(indices, dtype=np.int64)
    rows = np.arange(x.shape[0])
    out = Tensor(x.data[rows, idx], parents=(x,), op="take_per_row")

    def _bw():
        if x.requires_grad:
            g = np.zeros_like(x.data)
            np.add.at(g, (rows, idx), out.grad)
            _accum(x, g)

    out._backward = _bw
    return out


def slice_rows(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data[start:stop].copy(), parents=(x,), op="slice_rows")

    def _bw():
        if x.requires_grad:
            g = np.zeros_like(x.data)
            g[start:stop] = out.grad
            _accum(x, g)

    out._backward = _bw
    return out


def diag_part(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ValueError("diag_part expects a square 2-D tensor")
    out = Tensor(np.diagonal(x.data).copy(), parents=(x,), op="diag_part")

    def _bw():
        if x.requires_grad:
            g = np.zeros_like(x.data)
            np.fill_diagonal(g, out.grad)
            _accum(x, g)

    out._backward = _bw
    return out


def expand_leading(x, n: int) -> Tensor:
    """Replicate `x` along a new leading axis of length `n`."""
    x = as_tensor(x)
    out = Tensor(np.broadcast_to(x.data, (n,) + x.shape).copy(), parents=(x,), op="expand_leading")

    def _bw():
        if x.requires_grad:
            _accum(x, out.grad.sum(axis=0))

    out._backward = _bw
    return out


def scale_rows(x, weights: np.ndarray) -> Tensor:
    """Multiply each row of `x` by a scalar from `weights` (no gradient to weights)."""
    x = as_tensor(x)
    w = np.asarray(weights)
    if w.ndim != 1 or w.shape[0] != x.shape[0]:
        raise ValueError("scale_rows: weights must be 1-D with one entry per row")
    w_col = w.reshape((-1,) + (1,) * (x.ndim - 1))
    out = Tensor(x.data * w_col, parents=(x,), op="scale_rows")

    def _bw():
        if x.requires_grad:
            _accum(x, out.grad * w_col)

    out._backward = _bw
    return out


def l2_normalize(x, eps_forbidden: float = 0.0) -> Tensor:
    """Normalize each row of a 2-D tensor to unit Euclidean length."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ValueError("l2_normalize expects a 2-D tensor")
    norms = np.linalg.norm(x.data, axis=1, keepdims=True)
    if np.any(norms <= eps_forbidden):
        raise ValueError("l2_normalize: zero-length row")
    y = x.data / norms
    out = Tensor(y, parents=(x,), op="l2_normalize")

    def _bw():
        if x.requires_grad:
            g = out.grad
            dot = (g * y).sum(axis=1, keepdims=True)
            _accum(x, (g - y * dot) / norms)

    out._backward = _bw
    return out


def dropout(x, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: scales kept activations by 1/(1-p) at train time."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an explicit rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    mask = mask.astype(x.dtype)
    out = Tensor(x.data * mask, parents=(x,), op="dropout")

    def _bw():
        if x.requires_grad:
            _accum(x, out.grad * mask)

    out._backward = _bw
    return out


# -- normalization layers -------------------------------------------------


class BatchNormState:
    """Running statistics for one batch-norm layer (momentum 0.1)."""

    __slots__ = ("running_mean", "running_var", "momentum", "eps")

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5, dtype=None):
        dt = dtype or _DEFAULT_DTYPE
        self.running_mean = np.zeros(dim, dtype=dt)
        self.running_var = np.ones(dim, dtype=dt)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x, gamma, beta, state: BatchNormState, train: bool) -> Tensor:
    """Per-feature batch normalization over axis 0 of a 2-D tensor."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2:
        raise ValueError("batch_norm expects a 2-D [batch, features] tensor")
    if train:
        if x.shape[0] < 2:
            raise ValueError("batch_norm in train mode needs batch size >= 2")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu
        state.running_var = (1 - m) * state.running_var + m * var
    else:
        mu = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv_std
    out = Tensor(xhat * gamma.data + beta.data, parents=(x, gamma, beta), op="batch_norm")

    def _bw():
        g = out.grad
        if beta.requires_grad:
            _accum(beta, g.sum(axis=0))
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            if train:
                b = x.shape[0]
                dx = inv_std / b * (b * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0))
            else:
                dx = gx * inv_std
            _accum(x, dx)

    out._backward = _bw
    return out


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with learnable gain and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = Tensor(xhat * gamma.data + beta.data, parents=(x, gamma, beta), op="layer_norm")

    def _bw():
        g = out.grad
        lead = tuple(range(g.ndim - 1))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=lead))
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=lead))
        if x.requires_grad:
            gx = g * gamma.data
            dx = inv_std / d * (
                d * gx
                - gx.sum(axis=-1, keepdims=True)
                - xhat * (gx * xhat).sum(axis=-1, keepdims=True)
            )
            _accum(x, dx)

    out._backward = _bw
    return out


# -- gradient checking -----------------------------------------------------


def grad_check(f, inputs: Sequence[Tensor], eps: float = 1e-5, kink_tol: float = 1e-3) -> float:
    """Compare analytic gradients of scalar-valued `f` with central differences.

    Returns the maximum over components of |a - n| / max(1e-8, |a| + |n|).
    Components where the two one-sided slopes disagree (non-differentiable
    points, e.g. relu at exactly zero) are excluded from the check.
    """
    for inp in inputs:
        if inp.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        if not inp.data.flags["C_CONTIGUOUS"]:
            inp.data = np.ascontiguousarray(inp.data)

    def run() -> float:
        out = f(*inputs)
        val = float(out.data)
        if not math.isfinite(val):
            raise FloatingPointError("grad_check: non-finite function value")
        return val

    out = f(*inputs)
    if out.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    if not np.isfinite(out.data):
        raise FloatingPointError("grad_check: non-finite function value")
    for inp in inputs:
        inp.grad = None
    out.backward()
    analytic = [np.zeros_like(i.data) if i.grad is None else i.grad.copy() for i in inputs]

    f0 = float(out.data)
    max_err = 0.0
    for inp, a in zip(inputs, analytic):
        flat = inp.data.reshape(-1)
        a_flat = a.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            fp = run()
            flat[idx] = orig - eps
            fm = run()
            flat[idx] = orig
            s_plus = (fp - f0) / eps
            s_minus = (f0 - fm) / eps
            if abs(s_plus - s_minus) > kink_tol * (abs(s_plus) + abs(s_minus) + 1.0):
                continue
            numeric = (fp - fm) / (2 * eps)
            err = abs(a_flat[idx] - numeric) / max(1e-8, abs(a_flat[idx]) + abs(numeric))
            max_err = max(max_err, err)
    return max_err


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _gradcheck_cases(rng: np.random.Generator):
    """One (f, inputs) pair per registered primitive."""
    cases = {}

    x = _rand(rng, 3, 4)
    w = _rand(rng, 4, 2)
    cases["matmul_2d"] = (lambda x, w: reduce_sum(hadamard(matmul(x, w), matmul(x, w))), [x, w])

    a = _rand(rng, 2, 3, 4)
    b = _rand(rng, 2, 4, 3)
    cases["matmul_batched"] = (lambda a, b: reduce_sum(matmul(a, b)), [a, b])

    a = _rand(rng, 2, 3, 4)
    w = _rand(rng, 4, 2)
    cases["matmul_nd_2d"] = (lambda a, w: reduce_sum(hadamard(matmul(a, w), matmul(a, w))), [a, w])

    a = _rand(rng, 3, 4)
    b = _rand(rng, 3, 4)
    cases["add"] = (lambda a, b: reduce_sum(hadamard(add(a, b), add(a, b))), [a, b])

    a = _rand(rng, 3, 2, 4)
    bias = _rand(rng, 4)
    cases["add_bias"] = (lambda a, bias: reduce_sum(hadamard(add(a, bias), add(a, bias))), [a, bias])

    a = _rand(rng, 3, 4)
    b = _rand(rng, 3, 4)
    cases["sub"] = (lambda a, b: reduce_sum(hadamard(sub(a, b), sub(a, b))), [a, b])

    a = _rand(rng, 3, 4)
    b = _rand(rng, 3, 4)
    cases["hadamard"] = (lambda a, b: reduce_sum(hadamard(a, b)), [a, b])

    x = _rand(rng, 3, 4)
    cases["scale"] = (lambda x: reduce_sum(hadamard(scale(x, -2.5), scale(x, -2.5))), [x])

    a = _rand(rng, 2, 3)
    b = _rand(rng, 4, 3)
    cases["concat"] = (lambda a, b: reduce_sum(hadamard(concat([a, b], axis=0), concat([a, b], axis=0))), [a, b])

    a = _rand(rng, 2, 3)
    b = _rand(rng, 2, 3)
    cases["stack"] = (lambda a, b: reduce_sum(hadamard(stack([a, b], axis=1), stack([a, b], axis=1))), [a, b])

    x = _rand(rng, 3, 4)
    cases["sum_axis"] = (lambda x: reduce_sum(hadamard(reduce_sum(x, axis=1), reduce_sum(x, axis=1))), [x])

    x = _rand(rng, 3, 4)
    cases["mean_axis"] = (lambda x: reduce_sum(hadamard(reduce_mean(x, axis=0), reduce_mean(x, axis=0))), [x])

    x = _rand(rng, 3, 4)
    cases["relu"] = (lambda x: reduce_sum(hadamard(relu(x), relu(x))), [x])

    x = _rand(rng, 3, 4)
    cases["sigmoid"] = (lambda x: reduce_sum(hadamard(sigmoid(x), sigmoid(x))), [x])

    x = _rand(rng, 3, 4)
    cases["exp"] = (lambda x: reduce_sum(exp(scale(x, 0.5))), [x])

    x = Tensor(rng.random((3, 4)) + 0.5, requires_grad=True)
    cases["log"] = (lambda x: reduce_sum(hadamard(log(x), log(x))), [x])

    x = _rand(rng, 3, 4)
    w = _rand(rng, 3, 4)
    cases["softmax"] = (lambda x, w: reduce_sum(hadamard(softmax(x, axis=1), w)), [x, w])

    x = _rand(rng, 2, 3, 4)
    cases["transpose"] = (lambda x: reduce_sum(hadamard(transpose(x, (1, 2, 0)), transpose(x, (1, 2, 0)))), [x])

    x = _rand(rng, 2, 6)
    cases["reshape"] = (lambda x: reduce_sum(hadamard(reshape(x, (3, 4)), reshape(x, (3, 4)))), [x])

    x = _rand(rng, 3, 4)
    cases["take_index"] = (lambda x: reduce_sum(hadamard(take_index(x, 1, 1), take_index(x, 1, 1))), [x])

    x = _rand(rng, 4, 3)
    idx = rng.integers(0, 3, size=4)
    cases["take_per_row"] = (lambda x: reduce_sum(hadamard(take_per_row(x, idx), take_per_row(x, idx))), [x])

    x = _rand(rng, 5, 3)
    cases["slice_rows"] = (lambda x: reduce_sum(hadamard(slice_rows(x, 1, 4), slice_rows(x, 1, 4))), [x])

    x = _rand(rng, 4, 4)
    cases["diag_part"] = (lambda x: reduce_sum(hadamard(diag_part(x), diag_part(x))), [x])

    x = _rand(rng, 2, 3)
    cases["expand_leading"] = (lambda x: reduce_sum(hadamard(expand_leading(x, 4), expand_leading(x, 4))), [x])

    x = _rand(rng, 4, 3)
    wts = rng.random(4) + 0.5
    cases["scale_rows"] = (lambda x: reduce_sum(hadamard(scale_rows(x, wts), scale_rows(x, wts))), [x])

    x = Tensor(rng.standard_normal((4, 3)) + 0.1, requires_grad=True)
    w = _rand(rng, 4, 3)
    cases["l2_normalize"] = (lambda x, w: reduce_sum(hadamard(l2_normalize(x), w)), [x, w])

    x = _rand(rng, 3, 4)
    cases["clamp_min"] = (lambda x: reduce_sum(hadamard(clamp_min(x, -0.05), clamp_min(x, -0.05))), [x])

    x = _rand(rng, 4, 3)
    seed = int(rng.integers(0, 2**31))
    cases["dropout"] = (
        lambda x: reduce_sum(hadamard(dropout(x, 0.3, np.random.default_rng(seed), True),
                                      dropout(x, 0.3, np.random.default_rng(seed), True))),
        [x],
    )

    # Quadratic functionals of train-mode BN are constant in x (standardized
    # columns have fixed moments), so mix with weights to keep the check live.
    x = _rand(rng, 6, 3)
    gamma = Tensor(rng.random(3) + 0.5, requires_grad=True)
    beta = _rand(rng, 3)
    w = _rand(rng, 6, 3)
    cases["batch_norm_train"] = (
        lambda x, gamma, beta, w: reduce_sum(
            hadamard(batch_norm(x, gamma, beta, BatchNormState(3), True), w)),
        [x, gamma, beta, w],
    )

    x = _rand(rng, 4, 3)
    gamma = Tensor(rng.random(3) + 0.5, requires_grad=True)
    beta = _rand(rng, 3)
    eval_state = BatchNormState(3)
    eval_state.running_mean = rng.standard_normal(3)
    eval_state.running_var = rng.random(3) + 0.5
    cases["batch_norm_eval"] = (
        lambda x, gamma, beta: reduce_sum(
            hadamard(batch_norm(x, gamma, beta, eval_state, False),
                     batch_norm(x, gamma, beta, eval_state, False))),
        [x, gamma, beta],
    )

    x = _rand(rng, 2, 5, 3)
    gamma = Tensor(rng.random(3) + 0.5, requires_grad=True)
    beta = _rand(rng, 3)
    cases["layer_norm"] = (
        lambda x, gamma, beta: reduce_sum(
            hadamard(layer_norm(x, gamma, beta), layer_norm(x, gamma, beta))),
        [x, gamma, beta],
    )

    return cases


def gradcheck_all(n_seeds: int = 20, eps: float = 1e-5, base_seed: int = 0) -> dict[str, float]:
    """Run grad_check on every registered primitive; returns max error per op."""
    worst: dict[str, float] = {}
    for s in range(n_seeds):
        rng = np.random.default_rng(base_seed + s)
        for name, (f, inputs) in _gradcheck_cases(rng).items():
            err = grad_check(f, inputs, eps=eps)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
