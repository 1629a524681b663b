"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable op records a node on an implicit tape: the output tensor
keeps references to its parents plus a closure that maps the output gradient
to parent gradients. Each node carries a monotonically increasing sequence
number, so ``backward`` can replay the reachable part of the tape in exact
reverse execution order.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import warnings
from typing import Callable, Iterable, Sequence

import numba
import numpy as np

LOG_CLAMP = 1e-12
NORM_EPS = 1e-12
DEGENERACY_TOL = 1e-8

_sequence = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class SVDConvergenceError(ArithmeticError):
    def __init__(self, sweeps: int, off: float):
        super().__init__(f"Jacobi SVD did not converge after {sweeps} sweeps (max off-diagonal {off:.3e})")
        self.sweeps = sweeps
        self.off = off


class DegenerateSpectrumWarning(RuntimeWarning):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_sequence)
        self.name = name

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; use mul with a reciprocal")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out._seq = next(_sequence)
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    out.grad = None
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in order:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            # leaf
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    def grad_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), grad_fn)


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    """Natural log with inputs clamped at 1e-12; clamped entries get zero gradient."""
    x = np.maximum(a.data, LOG_CLAMP)
    live = a.data >= LOG_CLAMP
    return _node(np.log(x), (a,), lambda g: (np.where(live, g / x, 0.0),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = a.data
    x2 = x * x
    th = x2 * 0.044715
    th += 1.0
    th *= x
    th *= _GELU_C
    np.tanh(th, out=th)
    half = th + 1.0
    half *= 0.5
    out = x * half

    def grad_fn(g):
        # d/dx = half + 0.5 x (1 - th^2) sqrt(2/pi) (1 + 3 * 0.044715 x^2)
        d = x2 * (3 * 0.044715)
        d += 1.0
        d *= _GELU_C * 0.5
        d *= x
        sech2 = th * th
        np.subtract(1.0, sech2, out=sech2)
        d *= sech2
        d += half
        d *= g
        return (d,)

    return _node(out, (a,), grad_fn)


# -- reductions and shape ----------------------------------------------------

def sum(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), grad_fn)


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _node(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in parts)


def getitem(a: Tensor, index) -> Tensor:
    """Indexing with slices, integers or integer arrays; gradients scatter back."""
    basic = _is_basic(index)

    def grad_fn(g):
        out = np.zeros_like(a.data)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _node(np.array(a.data[index]), (a,), grad_fn)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select rows along axis -2.

    ``a`` is (L, d) with ``index`` of shape (k,), or (N, L, d) with ``index``
    of shape (N, k). Gradients scatter back to the selected rows.
    """
    index = np.asarray(index, dtype=np.int64)
    if a.ndim == 2:
        out = a.data[index]

        def grad_fn(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            return (full,)
    elif a.ndim == 3:
        batch = np.arange(a.shape[0])[:, None]
        out = a.data[batch, index]

        def grad_fn(g):
            full = np.zeros_like(a.data)
            np.add.at(full, (batch, index), g)
            return (full,)
    else:
        raise ShapeError(f"gather_rows expects a 2-d or 3-d tensor, got shape {a.shape}")
    return _node(out, (a,), grad_fn)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)

    def grad_fn(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (full,)

    return _node(weight.data[ids], (weight,), grad_fn)


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), grad_fn)


def softmax_rows(x: Tensor, temperature: float = 1.0, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis of ``x / temperature``.

    ``mask`` (broadcastable boolean, True = keep) excludes entries exactly.
    """
    if not temperature > 0:
        raise DomainError(f"softmax temperature must be positive, got {temperature}")
    z = x.data / temperature
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot) / temperature,)

    return _node(p, (x,), grad_fn)


def l2_normalize_rows(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Divide each row (last axis) by max(||row||, eps)."""
    norm = np.sqrt((x.data ** 2).sum(axis=-1, keepdims=True))
    big = norm >= eps
    denom = np.where(big, norm, eps)
    y = x.data / denom

    def grad_fn(g):
        proj = (g * y).sum(axis=-1, keepdims=True)
        return (np.where(big, (g - y * proj) / denom, g / eps),)

    return _node(y, (x,), grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def grad_fn(g):
        gx_hat = g * gamma.data
        d = x.shape[-1]
        gx = inv / d * (d * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        return (gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape))

    return _node(out, (x, gamma, beta), grad_fn)


# -- singular value decomposition ---------------------------------------------

def _left_vectors(work: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Orthonormal U from the rotated columns, largest singular value first.

    Columns are re-orthogonalized against the earlier ones, which removes the
    O(eps * sigma_1 / sigma_j) drift of small singular values; null columns
    are completed from the standard basis.
    """
    m, n = work.shape
    u = np.zeros((m, n))
    floor = sigma[0] * np.finfo(np.float64).eps if n else 0.0
    for j in range(n):
        basis = u[:, :j]
        vec = work[:, j] / sigma[j] if sigma[j] > floor else np.zeros(m)
        for _ in range(2):
            vec = vec - basis @ (basis.T @ vec)
        nv = np.linalg.norm(vec)
        if nv <= 0.5:
            resid = np.eye(m) - basis @ basis.T
            resid = resid - basis @ (basis.T @ resid)
            norms = np.linalg.norm(resid, axis=0)
            vec = resid[:, int(np.argmax(norms))]
            nv = np.linalg.norm(vec)
        u[:, j] = vec / nv
    return u


@numba.njit(cache=True)
def _jacobi_sweeps(x: np.ndarray, m: int, max_sweeps: int) -> tuple[int, float]:
    """Cyclic one-sided (Hestenes) Jacobi on the rows of ``x``.

    Row ``j`` holds column ``j`` of A in ``x[j, :m]`` followed by column ``j``
    of V. Every pair (p, q) is rotated until its columns are orthogonal to
    relative precision ``eps * m``. Rows below ``eps * ||A||_F`` are
    numerically null and are skipped. Returns (sweeps used, last max
    off-diagonal); sweeps == max_sweeps + 1 signals non-convergence.
    """
    n, width = x.shape
    eps = 2.220446049250313e-16
    tol = eps * m
    fro = 0.0
    for i in range(n):
        for k in range(m):
            fro += x[i, k] * x[i, k]
    negligible = eps * eps * fro
    norms = np.empty(n)
    off = 0.0
    for sweep in range(max_sweeps):
        for i in range(n):
            acc = 0.0
            for k in range(m):
                acc += x[i, k] * x[i, k]
            norms[i] = acc
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = norms[p]
                beta = norms[q]
                if alpha <= negligible or beta <= negligible:
                    continue
                gamma = 0.0
                for k in range(m):
                    gamma += x[p, k] * x[q, k]
                rel = abs(gamma) / np.sqrt(alpha * beta)
                if rel <= tol:
                    continue
                if rel > off:
                    off = rel
                zeta = (beta - alpha) / (2.0 * gamma)
                sign = 1.0 if zeta >= 0 else -1.0
                t = sign / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for k in range(width):
                    xp = x[p, k]
                    xq = x[q, k]
                    x[p, k] = c * xp - s * xq
                    x[q, k] = s * xp + c * xq
                norms[p] = alpha - t * gamma
                norms[q] = beta + t * gamma
        if off <= tol:
            return sweep + 1, off
    return max_sweeps + 1, off


def _jacobi_svd(a: np.ndarray, max_sweeps: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    m, n = a.shape
    x = np.ascontiguousarray(np.hstack([a.T, np.eye(n)]))
    sweeps, off = _jacobi_sweeps(x, m, max_sweeps)
    if sweeps > max_sweeps:
        raise SVDConvergenceError(max_sweeps, off)
    work, vt = x[:, :m], x[:, m:]
    sigma = np.sqrt(np.einsum("ij,ij->i", work, work))
    order = np.argsort(-sigma, kind="stable")
    sigma, work, vt = sigma[order], work[order], vt[order]
    return _left_vectors(work.T, sigma), sigma, np.ascontiguousarray(vt.T)


def svd_numpy(s: np.ndarray, max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD of a plain array: returns (U m×r, sigma r, V n×r), r = min(m, n).

    sigma is descending; each U column has its largest-magnitude entry
    positive (first index on ties) with V flipped to match.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2:
        raise ShapeError(f"svd expects a matrix, got shape {s.shape}")
    if not np.isfinite(s).all():
        raise DomainError("svd input contains non-finite entries")
    m, n = s.shape
    if m >= n:
        u, sigma, v = _jacobi_svd(s, max_sweeps)
    else:
        v, sigma, u = _jacobi_svd(s.T, max_sweeps)
    lead = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[lead, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    return u * signs, sigma, v * signs


def svd(s: Tensor, max_sweeps: int = 60) -> tuple[Tensor, Tensor, Tensor]:
    """SVD whose singular values stay on the tape.

    Only sigma is differentiable: d(sigma_k)/dS = u_k v_k^T. U and V are
    returned detached.
    """
    s = as_tensor(s)
    u, sigma, v = svd_numpy(s.data, max_sweeps)
    live = sigma > DEGENERACY_TOL
    _check_gaps(sigma, np.flatnonzero(live))

    def grad_fn(g):
        gl = np.where(live, g, 0.0)
        return ((u * gl) @ v.T,)

    return Tensor(u), _node(sigma, (s,), grad_fn), Tensor(v)


def _check_gaps(sigma: np.ndarray, ks: Iterable[int]) -> None:
    for k in ks:
        gaps = []
        if k > 0:
            gaps.append(sigma[k - 1] - sigma[k])
        if k + 1 < len(sigma):
            gaps.append(sigma[k] - sigma[k + 1])
        if gaps and min(gaps) <= DEGENERACY_TOL:
            warnings.warn(
                f"singular value {k + 1} is within {DEGENERACY_TOL:g} of a neighbour; "
                "its gradient depends on the chosen singular vectors",
                DegenerateSpectrumWarning,
                stacklevel=3,
            )


def grad_sigma_k(u, v, k: int, sigma=None) -> Tensor:
    """d(sigma_k)/dS = u_k v_k^T for 1-based ``k``.

    When ``sigma`` is given, a DegenerateSpectrumWarning is emitted if sigma_k
    sits within the degeneracy tolerance of a neighbour.
    """
    u = u.data if isinstance(u, Tensor) else np.asarray(u)
    v = v.data if isinstance(v, Tensor) else np.asarray(v)
    r = u.shape[1]
    if not 1 <= k <= r:
        raise IndexError(f"singular value index {k} out of range 1..{r}")
    if sigma is not None:
        sig = sigma.data if isinstance(sigma, Tensor) else np.asarray(sigma)
        _check_gaps(sig, [k - 1])
    return Tensor(np.outer(u[:, k - 1], v[:, k - 1]))
