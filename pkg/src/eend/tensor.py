"""Dense float64 tensors with reverse-mode differentiation.

The op set is deliberately small: scalars, vectors and 2-D matrices, with
row-vector bias addition as the only implicit broadcast. Each differentiable
op records its parent tensors and a backward closure; creation order doubles
as a topological order because inputs always exist before their outputs, so
`backward` replays reachable nodes in reverse creation order, visiting each
exactly once and accumulating adjoints additively across fan-out. That fixed
replay order makes gradients bit-reproducible.

Ops that take an `n_valid` argument confine the computation to the leading
`n_valid` rows (and, for row softmax, columns): trailing rows of the output
are zero and receive zero gradient, so batch padding is exactly loss-neutral.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes violate an op's contract."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (e.g. backward from a non-scalar)."""


_uid = itertools.count()
_state = threading.local()   # graphs on different threads stay independent


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager disabling tape recording (inference / oracles)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_uid")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor initialized with non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._uid = next(_uid)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def accum_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _node(data: np.ndarray, parents: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._uid = next(_uid)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# arithmetic primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def bw(g):
        a.accum_grad(g)
        b.accum_grad(g)

    return _node(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def bw(g):
        a.accum_grad(g)
        b.accum_grad(-g)

    return _node(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def bw(g):
        a.accum_grad(g * b.data)
        b.accum_grad(g * a.data)

    return _node(a.data * b.data, (a, b), bw)


def affine(a: Tensor, alpha: float, beta: float = 0.0) -> Tensor:
    """alpha * a + beta, elementwise with scalar constants."""

    def bw(g):
        a.accum_grad(alpha * g)

    return _node(alpha * a.data + beta, (a,), bw)


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Elementwise product with a constant array of the same shape."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != a.data.shape:
        raise DimensionError(f"mul_const: shapes {a.data.shape} and {c.shape} differ")

    def bw(g):
        a.accum_grad(g * c)

    return _node(a.data * c, (a,), bw)


def _matmul_data(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Sizes up to 8x8x8 accumulate in index order, bit-identical to a scalar
    # triple loop; beyond that the BLAS product is used.
    m, k = a.shape
    n = b.shape[1]
    if max(m, k, n) > 8:
        return a @ b
    out = np.zeros((m, n))
    for p in range(k):
        out += a[:, p:p + 1] * b[p:p + 1, :]
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")

    def bw(g):
        a.accum_grad(_matmul_data(g, b.data.T))
        b.accum_grad(_matmul_data(a.data.T, g))

    return _node(_matmul_data(a.data, b.data), (a, b), bw)


def matmul_valid(a: Tensor, b: Tensor, n_valid: int) -> Tensor:
    """Product using only a's leading n_valid x n_valid block and b's leading
    n_valid rows; all other output rows are zero.

    Used for the attention-context product under padding: rows and columns
    of the weight matrix beyond n_valid are exactly zero, so this equals the
    full product, but the computation (and hence every rounding) matches the
    unpadded run bit for bit.
    """
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul_valid: incompatible shapes {a.data.shape} and {b.data.shape}")
    v = n_valid
    out = np.zeros((a.data.shape[0], b.data.shape[1]))
    out[:v] = _matmul_data(a.data[:v, :v], b.data[:v])

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[:v, :v] = _matmul_data(g[:v], b.data[:v].T)
        a.accum_grad(ga)
        gb = np.zeros_like(b.data)
        gb[:v] = _matmul_data(a.data[:v, :v].T, g[:v])
        b.accum_grad(gb)

    return _node(out, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    def bw(g):
        a.accum_grad(g.T)

    return _node(a.data.T.copy(), (a,), bw)


def add_row_bias(a: Tensor, b: Tensor) -> Tensor:
    """a (T, D) plus bias b (D,) replicated over rows (the `1 b^T` pattern)."""
    if a.data.ndim != 2 or b.data.shape != (a.data.shape[1],):
        raise DimensionError(
            f"add_row_bias: shapes {a.data.shape} and {b.data.shape} incompatible")

    def bw(g):
        a.accum_grad(g)
        b.accum_grad(g.sum(axis=0))

    return _node(a.data + b.data, (a, b), bw)


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def sigmoid(a: Tensor) -> Tensor:
    y = np.empty_like(a.data)
    pos = a.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    y[~pos] = e / (1.0 + e)

    def bw(g):
        a.accum_grad(g * y * (1.0 - y))

    return _node(y, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def bw(g):
        a.accum_grad(g * (1.0 - y * y))

    return _node(y, (a,), bw)


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0.0)

    def bw(g):
        a.accum_grad(g * (a.data > 0))

    return _node(y, (a,), bw)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def bw(g):
        a.accum_grad(g * y)

    return _node(y, (a,), bw)


def log(a: Tensor) -> Tensor:
    def bw(g):
        a.accum_grad(g / a.data)

    return _node(np.log(a.data), (a,), bw)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is zero where the clip is active."""
    y = np.clip(a.data, lo, hi)

    def bw(g):
        a.accum_grad(g * ((a.data > lo) & (a.data < hi)))

    return _node(y, (a,), bw)


_ELEMENTWISE = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def elementwise(op: str, a: Tensor) -> Tensor:
    """Named dispatch for the supported activations."""
    try:
        return _ELEMENTWISE[op](a)
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    def bw(g):
        a.accum_grad(np.full_like(a.data, float(g)))

    return _node(np.asarray(a.data.sum()), (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g):
        a.accum_grad(np.full_like(a.data, float(g) / n))

    return _node(np.asarray(a.data.mean()), (a,), bw)


# ---------------------------------------------------------------------------
# row/column structure
# ---------------------------------------------------------------------------

def take_rows(a: Tensor, n: int) -> Tensor:
    """First n rows of a 2-D tensor."""

    def bw(g):
        full = np.zeros_like(a.data)
        full[:n] = g
        a.accum_grad(full)

    return _node(a.data[:n].copy(), (a,), bw)


def take_cols(a: Tensor, start: int, stop: int) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        a.accum_grad(full)

    return _node(a.data[:, start:stop].copy(), (a,), bw)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = parts[0].data.shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[0] != rows:
            raise DimensionError("concat_cols: row counts differ")
    widths = [p.data.shape[1] for p in parts]
    offs = np.cumsum([0] + widths)

    def bw(g):
        for p, s, e in zip(parts, offs[:-1], offs[1:]):
            p.accum_grad(g[:, s:e])

    return _node(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bw)


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack (1, D) tensors into (T, D)."""

    def bw(g):
        for i, p in enumerate(parts):
            p.accum_grad(g[i:i + 1])

    return _node(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bw)


def row(a: Tensor, i: int) -> Tensor:
    """Row i of a 2-D tensor as a (1, D) tensor."""

    def bw(g):
        full = np.zeros_like(a.data)
        full[i] = g[0]
        a.accum_grad(full)

    return _node(a.data[i:i + 1].copy(), (a,), bw)


def reverse_rows(a: Tensor) -> Tensor:
    def bw(g):
        a.accum_grad(g[::-1])

    return _node(a.data[::-1].copy(), (a,), bw)


# ---------------------------------------------------------------------------
# normalizations
# ---------------------------------------------------------------------------

def scaled_softmax_rows(a: Tensor, scale: float, n_valid: int | None = None) -> Tensor:
    """Row-wise softmax of `scale * a` with max subtraction.

    With n_valid = v, only the leading v x v block is computed; all other
    entries of the output are zero (used to make padded frames inert).
    """
    if scale <= 0:
        raise ValueError(f"softmax scale must be positive, got {scale}")
    if a.data.ndim != 2:
        raise DimensionError(f"scaled_softmax_rows: expected 2-D, got {a.data.shape}")
    if n_valid is None:
        if not np.all(np.isfinite(a.data)):
            raise NumericError("scaled_softmax_rows: non-finite input")
        z = a.data * scale
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        sm = e / e.sum(axis=1, keepdims=True)

        def bw(g):
            dot = (g * sm).sum(axis=1, keepdims=True)
            a.accum_grad(scale * sm * (g - dot))

        return _node(sm, (a,), bw)

    if a.data.shape[0] != a.data.shape[1]:
        raise DimensionError("scaled_softmax_rows: n_valid requires a square input")
    v = n_valid
    block = a.data[:v, :v]
    if not np.all(np.isfinite(block)):
        raise NumericError("scaled_softmax_rows: non-finite input")
    z = block * scale
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    sm = e / e.sum(axis=1, keepdims=True)
    y = np.zeros_like(a.data)
    y[:v, :v] = sm

    def bw(g):
        gb = g[:v, :v]
        dot = (gb * sm).sum(axis=1, keepdims=True)
        full = np.zeros_like(a.data)
        full[:v, :v] = scale * sm * (gb - dot)
        a.accum_grad(full)

    return _node(y, (a,), bw)


def layer_norm(e: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Per-row standardization followed by a per-dimension affine map."""
    if e.data.ndim != 2:
        raise DimensionError(f"layer_norm: expected 2-D, got {e.data.shape}")
    d = e.data.shape[1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain/bias {gain.data.shape}/{bias.data.shape} vs D={d}")
    mu = e.data.mean(axis=1, keepdims=True)
    xc = e.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def bw(g):
        bias.accum_grad(g.sum(axis=0))
        gain.accum_grad((g * xhat).sum(axis=0))
        gx = g * gain.data
        m1 = gx.mean(axis=1, keepdims=True)
        m2 = (gx * xhat).mean(axis=1, keepdims=True)
        e.accum_grad(inv * (gx - m1 - xhat * m2))

    return _node(y, (e, gain, bias), bw)


def l2_normalize_rows(a: Tensor, eps: float = 1e-30) -> Tensor:
    """Scale each row to unit Euclidean norm."""
    n = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    n = np.maximum(n, eps)
    y = a.data / n

    def bw(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        a.accum_grad((g - y * dot) / n)

    return _node(y, (a,), bw)


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate .grad for every tensor reachable from a scalar loss."""
    if loss.data.shape != ():
        raise GraphError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._uid, reverse=True)
    loss.grad = np.ones(())
    for t in nodes:
        if t._backward_fn is not None and t.grad is not None:
            t._backward_fn(t.grad)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients by name; parameters untouched by the loss get zeros."""
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for k, p in params.items()}


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor], eps: float = 1e-5,
               max_coords: int = 40, seed: int = 0, floor: float = 1e-6) -> float:
    """Worst relative error between backward() and central differences.

    f re-evaluates the scalar loss from the current parameter values. For
    each parameter, up to max_coords coordinates are perturbed (choice is
    deterministic in `seed`); the relative error uses an absolute floor so
    near-zero gradients compare on an absolute scale.
    """
    if eps <= 0:
        raise ValueError(f"grad_check eps must be positive, got {eps}")
    zero_grads(params.values())
    loss = f()
    backward(loss)
    grads = collect_grads(params)
    picker = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= max_coords else picker.choice(n, size=max_coords, replace=False)
        g = grads[name].reshape(-1)
        for i in idx:
            keep = flat[i]
            flat[i] = keep + eps
            with no_grad():
                fp = float(f().data)
            flat[i] = keep - eps
            with no_grad():
                fm = float(f().data)
            flat[i] = keep
            fd = (fp - fm) / (2.0 * eps)
            err = abs(g[i] - fd) / max(abs(g[i]), abs(fd), floor)
            if err > worst:
                worst = err
    return worst
