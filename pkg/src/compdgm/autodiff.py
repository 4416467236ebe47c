"""Define-by-run reverse-mode automatic differentiation on float64 numpy arrays.

Every operation returns a new :class:`Tensor` holding its forward value, its
parents and a closure that maps the output cotangent to parent cotangents.
:func:`grad` walks the recorded graph once in reverse topological order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import special as _sp


class DomainError(ValueError):
    """Raised when an op is evaluated outside its mathematical domain."""


class ShapeError(ValueError):
    pass


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "op", "name", "kink_input")
    __array_priority__ = 100.0

    def __init__(self, data, parents: tuple = (), backward_fn=None, op: str = "leaf", name: str | None = None):
        self.data = _as_array(data)
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.name = name
        # pre-activation values of relu-type ops, used to skip kinks in FD checks
        self.kink_input = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(x, name: str | None = None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, name=name)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return Tensor(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return Tensor(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return Tensor(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul"
    )


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast(a.data, b.data, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: zero denominator")
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return Tensor(out, (a, b), back, "div")


def neg(a) -> Tensor:
    a = tensor(a)
    return Tensor(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = tensor(a)
    out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise DomainError("exp: overflow")
    return Tensor(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = tensor(a)
    ad = a.data
    if np.any(ad <= 0.0):
        raise DomainError("log: non-positive input")
    return Tensor(np.log(ad), (a,), lambda g: (g / ad,), "log")


def square(a) -> Tensor:
    a = tensor(a)
    ad = a.data
    return Tensor(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def sqrt(a) -> Tensor:
    a = tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("sqrt: non-positive input (gradient undefined at 0)")
    out = np.sqrt(a.data)
    return Tensor(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def lgamma(a) -> Tensor:
    a = tensor(a)
    ad = a.data
    if np.any(ad <= 0.0):
        raise DomainError("lgamma: non-positive input")
    return Tensor(_sp.gammaln(ad), (a,), lambda g: (g * _sp.digamma(ad),), "lgamma")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp; gradient passes only where the input is strictly inside (lo, hi)."""
    a = tensor(a)
    ad = a.data
    inside = (ad > lo) & (ad < hi)
    return Tensor(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------- activations


def relu(a) -> Tensor:
    return leaky_relu(a, 0.0)


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    # subgradient at exactly 0 is the negative-slope branch
    a = tensor(a)
    ad = a.data
    pos = ad > 0.0
    factor = np.where(pos, 1.0, slope)
    out = Tensor(ad * factor, (a,), lambda g: (g * factor,), "relu" if slope == 0.0 else "leaky_relu")
    out.kink_input = ad
    return out


def softplus(a) -> Tensor:
    a = tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad)
    sig = _sp.expit(ad)
    return Tensor(out, (a,), lambda g: (g * sig,), "softplus")


def sigmoid(a) -> Tensor:
    a = tensor(a)
    out = _sp.expit(a.data)
    return Tensor(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = tensor(a)
    out = np.tanh(a.data)
    return Tensor(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def softmax_rows(a) -> Tensor:
    a = tensor(a)
    if a.ndim != 2:
        raise ShapeError("softmax_rows expects a 2-D tensor")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return Tensor(out, (a,), back, "softmax")


# ---------------------------------------------------------------- reductions / shape


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor(out, (a,), back, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data
    return Tensor(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def transpose(a) -> Tensor:
    a = tensor(a)
    return Tensor(a.data.T, (a,), lambda g: (g.T,), "transpose")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [tensor(t) for t in tensors]
    widths = [t.shape[axis] for t in ts]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    cuts = np.cumsum(widths)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor(out, tuple(ts), back, "concat")


def slice_last(a, start: int, stop: int) -> Tensor:
    a = tensor(a)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return Tensor(a.data[..., start:stop], (a,), back, "slice")


# ---------------------------------------------------------------- fused layers


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` with a row-vector bias."""
    x, w = tensor(x), tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    if b is None:
        return Tensor(xd @ wd, (x, w), lambda g: (g @ wd.T, xd.T @ g), "linear")
    b = tensor(b)
    return Tensor(xd @ wd + b.data, (x, w, b), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)), "linear")


def batch_norm_train(x, gamma, beta, eps: float) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalize with batch statistics. Returns output, batch mean, biased batch variance."""
    x, gamma, beta = tensor(x), tensor(gamma), tensor(beta)
    n = x.shape[0]
    if n < 2:
        raise ShapeError("batch norm in train mode needs batch size >= 2")
    mu = x.data.mean(axis=0)
    xc = x.data - mu
    var = (xc * xc).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def back(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return Tensor(out, (x, gamma, beta), back, "batch_norm"), mu, var


# ---------------------------------------------------------------- differentiation


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, inputs before consumers."""
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to each tensor in ``wrt``.

    Tensors that do not influence ``loss`` get an explicit zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    order = topological_order(loss)
    cot: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    keep = {id(t) for t in wrt}
    for node in reversed(order):
        g = cot.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        if id(node) not in keep:
            del cot[id(node)]
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None:
                continue
            pid = id(parent)
            prev = cot.get(pid)
            cot[pid] = pg if prev is None else prev + pg
    return [np.asarray(cot.get(id(t), np.zeros_like(t.data))).reshape(t.shape) for t in wrt]


# ---------------------------------------------------------------- finite differences


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: dict[str, float]
    excluded: dict[str, int] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)


def _kink_signature(loss: Tensor) -> tuple:
    return tuple(
        np.packbits(node.kink_input > 0.0).tobytes()
        for node in topological_order(loss)
        if node.kink_input is not None
    )


def check_gradient_fd(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-7,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn`` rebuilds the graph from the current ``params`` contents.
    Entries whose perturbation flips any relu/leaky-relu activation pattern
    are reported as non-differentiable points and excluded. The relative
    error denominator never drops below ``floor`` or the central-difference
    resolution ``10 * eps * |loss| / (step * tolerance)``, so exactly-zero
    gradients (a bias feeding batch norm) are not judged on rounding noise.
    """
    if not (0.0 < step <= 1e-2):
        raise ValueError("step must lie in (0, 1e-2]")
    names = list(params)
    base = loss_fn()
    analytic = dict(zip(names, grad(base, [params[n] for n in names])))
    base_sig = _kink_signature(base)
    floor = max(floor, 10.0 * np.finfo(float).eps * abs(base.item()) / (step * tolerance))
    report = GradCheckReport(passed=True, max_rel_error={}, excluded={})
    for name in names:
        p = params[name]
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        worst, skipped = 0.0, 0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            lp = loss_fn()
            sig_p = _kink_signature(lp)
            flat[i] = orig - step
            lm = loss_fn()
            sig_m = _kink_signature(lm)
            flat[i] = orig
            if sig_p != base_sig or sig_m != base_sig:
                skipped += 1
                continue
            num = (lp.item() - lm.item()) / (2.0 * step)
            ana = float(analytic[name].reshape(-1)[i])
            err = abs(num - ana) / max(abs(num), abs(ana), floor)
            worst = max(worst, err)
        report.max_rel_error[name] = worst
        report.excluded[name] = skipped
        if skipped:
            report.notes.append(f"{name}: {skipped} entries at non-differentiable point, excluded")
        if worst > tolerance:
            report.passed = False
    return report
