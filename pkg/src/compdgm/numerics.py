"""Seeded random streams, samplers, special functions and small dense linear algebra."""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special as _sp


class RankDeficientError(np.linalg.LinAlgError):
    pass


class ConvergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------- random streams


class Rng:
    """Philox-4x64 counter-based generator with named, independent substreams.

    A substream's key is derived from ``(seed, name)`` through BLAKE2b, so
    ``Rng(3).stream("data")`` and ``Rng(3).stream("init")`` never overlap and
    are reproducible across processes.
    """

    def __init__(self, seed: int, name: str = "root"):
        self.seed = int(seed)
        self.name = name
        self.gen = np.random.Generator(np.random.Philox(key=self._key(self.seed, name)))

    @staticmethod
    def _key(seed: int, name: str) -> int:
        h = hashlib.blake2b(f"{seed}/{name}".encode(), digest_size=16).digest()
        return int.from_bytes(h, "little")

    def stream(self, name: str) -> "Rng":
        return Rng(self.seed, f"{self.name}/{name}")

    def normal(self, size) -> np.ndarray:
        return self.gen.standard_normal(size)

    def uniform(self, low: float, high: float, size) -> np.ndarray:
        return self.gen.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)


def sample(rng: Rng, dist: str, size, **kw) -> np.ndarray:
    """Draw from one of the supported distributions.

    ``normal``; ``uniform(a, b)``; ``gamma(shape, scale)``; ``poisson(rate)``;
    ``nb(mean, theta)`` as Poisson(Gamma(shape=theta, scale=mean/theta));
    ``bernoulli(p)``. Parameters may be arrays broadcastable to ``size``.
    """
    g = rng.gen
    if dist == "normal":
        return g.standard_normal(size)
    if dist == "uniform":
        a, b = kw["a"], kw["b"]
        if np.any(np.asarray(b) < np.asarray(a)):
            raise ValueError("uniform: b < a")
        return g.uniform(a, b, size)
    if dist == "gamma":
        shape, scale = np.asarray(kw["shape"], float), np.asarray(kw["scale"], float)
        if np.any(shape <= 0) or np.any(scale <= 0):
            raise ValueError("gamma: shape and scale must be positive")
        return g.gamma(shape, scale, size)
    if dist == "poisson":
        rate = np.asarray(kw["rate"], float)
        if np.any(rate < 0) or not np.all(np.isfinite(rate)):
            raise ValueError("poisson: rate must be finite and >= 0")
        return g.poisson(rate, size).astype(np.int64)
    if dist == "nb":
        mean, theta = np.asarray(kw["mean"], float), np.asarray(kw["theta"], float)
        if np.any(mean < 0):
            raise ValueError("nb: mean must be >= 0")
        if np.any(theta <= 0):
            raise ValueError("nb: theta must be > 0")
        u = g.gamma(np.broadcast_to(theta, size), 1.0, size) * (mean / theta)
        return g.poisson(u).astype(np.int64)
    if dist == "bernoulli":
        p = np.asarray(kw["p"], float)
        if np.any(p < 0) or np.any(p > 1):
            raise ValueError("bernoulli: p outside [0, 1]")
        return (g.random(size) < p).astype(np.int64)
    raise ValueError(f"unknown distribution {dist!r}")


# ---------------------------------------------------------------- special functions


def _check_open_unit(x, fn):
    x = np.asarray(x, float)
    if np.any(x <= 0) or np.any(x >= 1):
        raise ValueError(f"{fn}: argument must lie in (0, 1)")
    return x


def special(fn: str, x, *args):
    """Evaluate a special function by name.

    Supported: ``erf``, ``erfinv``, ``lgamma``, ``betainc`` (regularized
    I_x(a, b), args a, b), ``norm_cdf``, ``norm_ppf``, ``beta_cdf``
    (symmetric Beta(lam, lam) CDF, arg lam).
    """
    x = np.asarray(x, float)
    if fn == "erf":
        return _sp.erf(x)
    if fn == "erfinv":
        if np.any(np.abs(x) >= 1):
            raise ValueError("erfinv: argument must lie in (-1, 1)")
        return _sp.erfinv(x)
    if fn == "lgamma":
        if np.any(x <= 0):
            raise ValueError("lgamma: argument must be positive")
        return _sp.gammaln(x)
    if fn == "betainc":
        a, b = args
        if a <= 0 or b <= 0 or np.any(x < 0) or np.any(x > 1):
            raise ValueError("betainc: need a, b > 0 and x in [0, 1]")
        return _sp.betainc(a, b, x)
    if fn == "norm_cdf":
        return _sp.ndtr(x)
    if fn == "norm_ppf":
        return _sp.ndtri(_check_open_unit(x, "norm_ppf"))
    if fn == "beta_cdf":
        (lam,) = args
        if lam <= 0 or np.any(x < 0) or np.any(x > 1):
            raise ValueError("beta_cdf: need lam > 0 and x in [0, 1]")
        return _sp.betainc(lam, lam, x)
    raise ValueError(f"unknown special function {fn!r}")


# ---------------------------------------------------------------- linear algebra


def orthonormalize_columns(m: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Modified Gram-Schmidt with one reorthogonalization pass."""
    a = np.array(m, dtype=float, copy=True)
    d, k = a.shape
    if k > d:
        raise RankDeficientError(f"cannot orthonormalize {k} columns in dimension {d}")
    q = np.zeros_like(a)
    for j in range(k):
        v = a[:, j].copy()
        scale = np.linalg.norm(v)
        for _ in range(2):
            for i in range(j):
                v -= (q[:, i] @ v) * q[:, i]
        nv = np.linalg.norm(v)
        if scale == 0.0 or nv <= tol * max(1.0, scale):
            raise RankDeficientError(f"column {j} is linearly dependent on previous columns")
        q[:, j] = v / nv
    return q


@dataclass(frozen=True)
class SymMatrix:
    """Packed upper-triangular storage; symmetric by construction."""

    n: int
    packed: np.ndarray

    @classmethod
    def from_dense(cls, m: np.ndarray) -> "SymMatrix":
        m = np.asarray(m, float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("SymMatrix needs a square matrix")
        iu = np.triu_indices(m.shape[0])
        return cls(m.shape[0], 0.5 * (m + m.T)[iu].copy())

    def dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        iu = np.triu_indices(self.n)
        out[iu] = self.packed
        out.T[iu] = self.packed
        return out


def sym_eigendecompose(m, tol: float = 1e-12, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigensolver. Returns eigenvalues descending and column eigenvectors."""
    a = (m if isinstance(m, SymMatrix) else SymMatrix.from_dense(m)).dense()
    n = a.shape[0]
    if n > 64:
        raise ValueError("sym_eigendecompose is meant for n <= 64")
    v = np.eye(n)
    scale = max(np.linalg.norm(a), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(tau) > 1e150:
                    t = 0.5 / tau  # tau**2 would overflow; first-order rotation angle
                else:
                    t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau)) if tau != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps")
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


@dataclass
class LstsqResult:
    coef: np.ndarray  # (k+1) x m, last row is the intercept
    ridge_fallback: bool

    def predict(self, a: np.ndarray) -> np.ndarray:
        return a @ self.coef[:-1] + self.coef[-1]


def least_squares(a: np.ndarray, b: np.ndarray, jitter: float = 1e-8) -> LstsqResult:
    """Ordinary least squares of ``b`` on ``[a, 1]``.

    Collinear predictors trigger a ridge solve with ``jitter`` on the
    normal-matrix diagonal and set ``ridge_fallback``.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if b.ndim == 1:
        b = b[:, None]
    n, k = a.shape
    if n <= k + 1:
        raise ValueError(f"least_squares needs n > k+1 (n={n}, k={k})")
    # center first; intercept recovered afterwards (better conditioned than raw [A, 1])
    am, bm = a.mean(axis=0), b.mean(axis=0)
    ac, bc = a - am, b - bm
    gram = ac.T @ ac
    rhs = ac.T @ bc
    fallback = False
    if k == 0:
        beta = np.zeros((0, b.shape[1]))
    else:
        ev = np.linalg.eigvalsh(gram)
        if ev[0] <= 1e-12 * max(ev[-1], 1e-300):
            fallback = True
            warnings.warn("least_squares: singular normal matrix, ridge fallback", RuntimeWarning, stacklevel=2)
            beta = np.linalg.solve(gram + jitter * np.eye(k) * max(ev[-1], 1.0), rhs)
        else:
            beta = np.linalg.solve(gram, rhs)
            # one step of iterative refinement
            beta += np.linalg.solve(gram, rhs - gram @ beta)
    intercept = bm - am @ beta
    return LstsqResult(np.vstack([beta, intercept[None, :]]), fallback)
