"""Biased HSIC estimator and centered kernel alignment on autodiff tensors."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


class ZeroSelfHSIC(ValueError):
    pass


def pairwise_sq_dists(x: ad.Tensor) -> ad.Tensor:
    sq = ad.sum(ad.square(x), axis=1, keepdims=True)
    return sq + sq.T - 2.0 * ad.matmul(x, x.T)


def median_bandwidth(x: np.ndarray) -> float:
    """Median pairwise Euclidean distance over distinct pairs (no gradient)."""
    x = np.asarray(x, float)
    sq = (x * x).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    iu = np.triu_indices(x.shape[0], k=1)
    med = float(np.median(np.sqrt(d2[iu])))
    return med if med > 0 else 1.0


def rbf_kernel(x, bandwidth: float | None = None) -> ad.Tensor:
    """``exp(-||xi - xj||^2 / (2 h^2))`` with ``h`` the median distance by default."""
    x = ad.tensor(x)
    h = median_bandwidth(x.data) if bandwidth is None else bandwidth
    return ad.exp(pairwise_sq_dists(x) * (-0.5 / (h * h)))


def linear_kernel(x) -> ad.Tensor:
    x = ad.tensor(x)
    return ad.matmul(x, x.T)


def kernel_matrix(x, kind: str) -> ad.Tensor:
    if kind in ("rbf", "rbf-median"):
        return rbf_kernel(x)
    if kind == "linear":
        return linear_kernel(x)
    raise ValueError(f"unknown kernel {kind!r}")


def center(k) -> ad.Tensor:
    """``H K H`` with ``H = I - 11^T / M``."""
    k = ad.tensor(k)
    return k - ad.mean(k, axis=0, keepdims=True) - ad.mean(k, axis=1, keepdims=True) + ad.mean(k)


def hsic(k, l) -> ad.Tensor:
    """``Tr(K H L H) / (M - 1)^2``."""
    k, l = ad.tensor(k), ad.tensor(l)
    m = k.shape[0]
    if m < 2:
        raise ValueError("hsic needs at least two samples")
    if k.shape != (m, m) or l.shape != (m, m):
        raise ad.ShapeError("kernel matrices must be square and of equal size")
    return _hsic_centered(center(k), l, m)


def _hsic_centered(kc: ad.Tensor, l: ad.Tensor, m: int) -> ad.Tensor:
    # Tr(HKH L) = sum((HKH) * L) for symmetric L
    return ad.sum(kc * l) * (1.0 / (m - 1) ** 2)


def hsic_terms(z, s, kernel: str = "rbf") -> tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
    """(HSIC(Kz, Ks), HSIC(Kz, Kz), HSIC(Ks, Ks)) sharing one centering per block."""
    z, s = ad.tensor(z), ad.tensor(s)
    m = z.shape[0]
    if m < 2:
        raise ValueError("hsic needs at least two samples")
    kz, ks = kernel_matrix(z, kernel), kernel_matrix(s, kernel)
    kzc, ksc = center(kz), center(ks)
    scale = 1.0 / (m - 1) ** 2
    return ad.sum(kzc * ksc) * scale, ad.sum(kzc * kzc) * scale, ad.sum(ksc * ksc) * scale


def _check_self(hzz: float, hss: float) -> None:
    if hzz <= 1e-12 or hss <= 1e-12:
        raise ZeroSelfHSIC("zero self-HSIC: a latent block is degenerate")


def cka(z, s, kernel: str = "rbf") -> ad.Tensor:
    """``HSIC(Kz, Ks) / sqrt(HSIC(Kz, Kz) HSIC(Ks, Ks))``."""
    hzs, hzz, hss = hsic_terms(z, s, kernel)
    _check_self(hzz.item(), hss.item())
    return hzs / ad.sqrt(hzz * hss)


def constraint_residual(z, s, beta: float, kernel: str = "rbf") -> tuple[ad.Tensor, ad.Tensor]:
    """``HSIC(z, s) - beta * sqrt(HSIC(z, z)) * sqrt(HSIC(s, s))`` and the cross-HSIC term."""
    hzs, hzz, hss = hsic_terms(z, s, kernel)
    _check_self(hzz.item(), hss.item())
    return hzs - beta * ad.sqrt(hzz * hss), hzs
