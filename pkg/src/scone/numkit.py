"""Minimal dense-tensor kernel with reverse-mode autodiff.

Everything upstream (the transformer, the bridge, the trainer) is built on
these ops.  Tensors wrap row-major numpy arrays; float32 is the default
training precision, float64 is required for finite-difference checks.
No broadcasting beyond row-wise affine; all shapes are explicit.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
NORM_EPS = 1e-12
LAYERNORM_EPS = 1e-5


class NumkitError(Exception):
    """Base class for kernel errors."""


class ShapeError(NumkitError):
    """Operand shapes are incompatible."""


class DegenerateRowError(NumkitError):
    """A softmax row contains no finite entry."""


class ZeroVectorError(NumkitError):
    """Attempted to normalize a (near-)zero vector."""


class EvaluationError(NumkitError):
    """A checked function produced a non-finite value or violated a precondition."""


class Tensor:
    """A dense array plus the backward closure that produced it.

    The autodiff graph is the set of ``_parents`` links; ``backward`` walks it
    in reverse topological order and accumulates gradients into ``grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.data.shape}")
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
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # convenience operators used sparingly in model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction; forward values only."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not (t.requires_grad or t._parents):
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- ops ---------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard matrix product a[m,k] @ b[k,n]."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _result(out_data, (a, b), backward)


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """a[m,k] @ b[n,k].T -> [m,n]; the attention-logit product."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ShapeError(f"matmul_nt: incompatible shapes {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data.T

    def backward(g):
        _accum(a, g @ b.data)
        _accum(b, g.T @ a.data)

    return _result(out_data, (a, b), backward)


def add(a: Tensor, b) -> Tensor:
    """Elementwise add; also supports [n,d] + [d] (row-wise affine) and scalars."""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        out_data = a.data + b

        def backward_s(g):
            _accum(a, g)

        return _result(out_data, (a,), backward_s)
    b = _as_tensor(b)
    if a.data.shape == b.data.shape:
        out_data = a.data + b.data

        def backward_e(g):
            _accum(a, g)
            _accum(b, g)

        return _result(out_data, (a, b), backward_e)
    if a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
        out_data = a.data + b.data[None, :]

        def backward_r(g):
            _accum(a, g)
            _accum(b, g.sum(axis=0))

        return _result(out_data, (a, b), backward_r)
    raise ShapeError(f"add: incompatible shapes {a.data.shape} + {b.data.shape}")


def sub(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        return add(a, -b)
    b = _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub: incompatible shapes {a.data.shape} - {b.data.shape}")
    out_data = a.data - b.data

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return _result(out_data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; scalar or same-shape, plus [n,d] * [n,1] row gating."""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        out_data = a.data * b

        def backward_s(g):
            _accum(a, g * b)

        return _result(out_data, (a,), backward_s)
    b = _as_tensor(b)
    if a.data.shape == b.data.shape:
        out_data = a.data * b.data

        def backward_e(g):
            _accum(a, g * b.data)
            _accum(b, g * a.data)

        return _result(out_data, (a, b), backward_e)
    if a.data.ndim == 2 and b.data.ndim == 2 and b.data.shape == (a.data.shape[0], 1):
        out_data = a.data * b.data

        def backward_c(g):
            _accum(a, g * b.data)
            _accum(b, (g * a.data).sum(axis=1, keepdims=True))

        return _result(out_data, (a, b), backward_c)
    raise ShapeError(f"mul: incompatible shapes {a.data.shape} * {b.data.shape}")


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_rows: empty input")
    widths = {p.data.shape[1] for p in parts if p.data.ndim == 2}
    if any(p.data.ndim != 2 for p in parts) or len(widths) != 1:
        raise ShapeError("concat_rows: all inputs must be 2-D with equal width")
    out_data = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.data.shape[0] for p in parts]

    def backward(g):
        lo = 0
        for p, n in zip(parts, sizes):
            _accum(p, g[lo : lo + n])
            lo += n

    return _result(out_data, tuple(parts), backward)


def concat_cols(parts: Iterable[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_cols: empty input")
    heights = {p.data.shape[0] for p in parts if p.data.ndim == 2}
    if any(p.data.ndim != 2 for p in parts) or len(heights) != 1:
        raise ShapeError("concat_cols: all inputs must be 2-D with equal height")
    out_data = np.concatenate([p.data for p in parts], axis=1)
    sizes = [p.data.shape[1] for p in parts]

    def backward(g):
        lo = 0
        for p, n in zip(parts, sizes):
            _accum(p, g[:, lo : lo + n])
            lo += n

    return _result(out_data, tuple(parts), backward)


def slice_rows(x: Tensor, lo: int, hi: int) -> Tensor:
    x = _as_tensor(x)
    out_data = x.data[lo:hi].copy()

    def backward(g):
        full = np.zeros_like(x.data)
        full[lo:hi] = g
        _accum(x, full)

    return _result(out_data, (x,), backward)


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("slice_cols: input must be 2-D")
    out_data = x.data[:, lo:hi].copy()

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, lo:hi] = g
        _accum(x, full)

    return _result(out_data, (x,), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    out_data = x.data.reshape(shape).copy()

    def backward(g):
        _accum(x, g.reshape(x.data.shape))

    return _result(out_data, (x,), backward)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows of ``table`` at integer ``ids``."""
    table = _as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows: ids must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError(f"gather_rows: id out of range for table of {table.data.shape[0]} rows")
    out_data = table.data[idx].copy()

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        _accum(table, full)

    return _result(out_data, (table,), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction; -inf entries map to exactly 0.

    Raises DegenerateRowError when a row has no finite entry.
    """
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("softmax_rows: input must be 2-D")
    row_max = np.max(x.data, axis=1, keepdims=True)
    bad = ~np.isfinite(row_max[:, 0])
    if bad.any():
        raise DegenerateRowError(f"softmax_rows: rows {np.nonzero(bad)[0].tolist()} have no finite entry")
    shifted = x.data - row_max
    # exp(-inf) == 0, so masked entries vanish exactly
    with np.errstate(invalid="ignore"):
        e = np.exp(shifted)
    e[np.isneginf(shifted)] = 0.0
    denom = e.sum(axis=1, keepdims=True)
    y = e / denom

    def backward(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        _accum(x, y * (g - dot))

    return _result(y, (x,), backward)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Per-row normalization to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.data.ndim != 2:
        raise ShapeError("layernorm: input must be 2-D")
    d = x.data.shape[1]
    if d < 2:
        raise ShapeError("layernorm: row width must be >= 2")
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError("layernorm: gain/bias must have shape (d,)")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYERNORM_EPS)
    xhat = (x.data - mu) * inv_std
    out_data = xhat * gain.data[None, :] + bias.data[None, :]

    def backward(g):
        _accum(gain, (g * xhat).sum(axis=0))
        _accum(bias, g.sum(axis=0))
        gx = g * gain.data[None, :]
        m1 = gx.mean(axis=1, keepdims=True)
        m2 = (gx * xhat).mean(axis=1, keepdims=True)
        _accum(x, inv_std * (gx - m1 - xhat * m2))

    return _result(out_data, (x, gain, bias), backward)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximate GELU."""
    x = _as_tensor(x)
    c = np.sqrt(2.0 / np.pi).astype(x.data.dtype) if x.data.dtype == np.float32 else np.sqrt(2.0 / np.pi)
    u = c * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    out_data = 0.5 * x.data * (1.0 + t)

    def backward(g):
        du = c * (1.0 + 3 * 0.044715 * x.data**2)
        dt = (1.0 - t**2) * du
        _accum(x, g * (0.5 * (1.0 + t) + 0.5 * x.data * dt))

    return _result(out_data, (x,), backward)


def square(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = x.data**2

    def backward(g):
        _accum(x, 2.0 * x.data * g)

    return _result(out_data, (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = np.asarray(x.data.mean(), dtype=x.data.dtype)

    def backward(g):
        _accum(x, np.full_like(x.data, float(g) / x.data.size))

    return _result(out_data, (x,), backward)


def l2_normalize(v: Tensor) -> Tensor:
    """Scale a 1-D vector to unit L2 norm; near-zero input is an error."""
    v = _as_tensor(v)
    if v.data.ndim != 1:
        raise ShapeError("l2_normalize: input must be 1-D")
    n = float(np.linalg.norm(v.data))
    if n <= NORM_EPS:
        raise ZeroVectorError(f"l2_normalize: norm {n:.3e} below {NORM_EPS}")
    y = v.data / n

    def backward(g):
        _accum(v, (g - y * float(np.dot(y, g))) / n)

    return _result(y, (v,), backward)


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise unit normalization for plain arrays; shared with the bridge."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeError("l2_normalize_rows: input must be 2-D")
    norms = np.linalg.norm(x, axis=1)
    bad = norms <= NORM_EPS
    if bad.any():
        raise ZeroVectorError(f"l2_normalize_rows: zero row(s) at indices {np.nonzero(bad)[0].tolist()}")
    return x / norms[:, None]


# -- gradient verification ---------------------------------------------------


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    n_coords: int = 200,
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Compare analytic gradients of scalar ``f()`` to central differences.

    Returns the max over sampled coordinates of
    |analytic - cd| / (|analytic| + |cd| + 1e-8).  Parameters must be float64.
    """
    tensors = list(params.values())
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise EvaluationError(f"grad_check requires float64 parameters; {name} is {p.data.dtype}")
    zero_grads(tensors)
    loss = f()
    if not np.isfinite(loss.data).all():
        raise EvaluationError("grad_check: non-finite loss at base point")
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}

    flat_index = []
    for name, p in params.items():
        flat_index.extend((name, i) for i in range(p.data.size))
    rng = np.random.default_rng(seed)
    if len(flat_index) > n_coords:
        chosen = [flat_index[i] for i in rng.choice(len(flat_index), size=n_coords, replace=False)]
    else:
        chosen = flat_index

    max_rel = 0.0
    for name, i in chosen:
        p = params[name]
        flat = p.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f().data)
        flat[i] = orig - h
        fm = float(f().data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"grad_check: non-finite loss while probing {name}[{i}]")
        cd = (fp - fm) / (2.0 * h)
        a = float(analytic[name].reshape(-1)[i])
        rel = abs(a - cd) / (abs(a) + abs(cd) + 1e-8)
        max_rel = max(max_rel, rel)
    return max_rel
