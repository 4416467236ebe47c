"""Disentanglement and clustering metrics: linear MCC blocks, delta-MCC, cPCA split, k-means, ARI/NMI/ASW."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .numerics import Rng, SymMatrix, least_squares, sym_eigendecompose


def _corr(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    if na == 0.0 or nb == 0.0:
        warnings.warn("constant column in correlation; defined as 0", RuntimeWarning, stacklevel=3)
        return 0.0
    return float(a @ b / (na * nb))


def linear_mcc(predictors: np.ndarray, targets: np.ndarray, kind: str = "pearson") -> float:
    """Mean component-wise correlation between ``targets`` and their OLS prediction from ``predictors``."""
    if kind not in ("pearson", "spearman"):
        raise ValueError("kind must be pearson or spearman")
    predictors = np.asarray(predictors, float)
    targets = np.asarray(targets, float)
    if targets.ndim == 1:
        targets = targets[:, None]
    if predictors.shape[0] <= predictors.shape[1] + 1:
        raise ValueError("linear_mcc needs more samples than predictors + 1")
    if predictors.shape[1] == 0:
        pred = np.repeat(targets.mean(axis=0, keepdims=True), targets.shape[0], axis=0)
    else:
        pred = least_squares(predictors, targets).predict(predictors)
    vals = []
    for j in range(targets.shape[1]):
        a, b = pred[:, j], targets[:, j]
        if kind == "spearman":
            a, b = rankdata(a), rankdata(b)
        vals.append(_corr(a, b))
    return float(np.mean(vals))


def cross_mcc(latents_a: np.ndarray, latents_b: np.ndarray, kind: str = "pearson") -> float:
    return linear_mcc(latents_a, latents_b, kind)


@dataclass
class MccBlock:
    mcc_zz: float
    mcc_zs: float
    mcc_sz: float
    mcc_ss: float
    kind: str = "pearson"


def delta_mcc(block: MccBlock) -> float:
    """Within-block recovery minus cross-block leakage: ``(zz + ss)/2 - (zs + sz)/2``."""
    return 0.5 * (block.mcc_zz + block.mcc_ss) - 0.5 * (block.mcc_zs + block.mcc_sz)


def mcc_block(z_hat: np.ndarray, s_hat: np.ndarray, z_true: np.ndarray, s_true: np.ndarray,
              target_rows: slice | np.ndarray, kind: str = "pearson") -> MccBlock:
    """Four regressions. ``z_hat``/``z_true`` cover all rows (background then
    target); ``s_hat``/``s_true`` cover target rows only, which ``target_rows``
    selects from the z arrays."""
    zt_hat, zt_true = z_hat[target_rows], z_true[target_rows]
    return MccBlock(
        mcc_zz=linear_mcc(z_hat, z_true, kind),
        mcc_zs=linear_mcc(zt_hat, s_true, kind),
        mcc_sz=linear_mcc(s_hat, zt_true, kind),
        mcc_ss=linear_mcc(s_hat, s_true, kind),
        kind=kind,
    )


# ---------------------------------------------------------------- cPCA split


def cpca_split(latents_background: np.ndarray, latents_target: np.ndarray, q_hat: int,
               contrast: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Rank latent units by ``|v|`` for the top eigenvector ``v`` of ``C_t - contrast * C_b``.

    The ``q_hat`` highest-scoring units are salient, the rest background. Ties
    go to the lower index.
    """
    if contrast < 0:
        raise ValueError("contrast must be >= 0")
    d = latents_target.shape[1]
    if not 0 <= q_hat <= d:
        raise ValueError("q_hat out of range")
    c_t = np.cov(latents_target, rowvar=False).reshape(d, d)
    c_b = np.cov(latents_background, rowvar=False).reshape(d, d)
    _, vecs = sym_eigendecompose(SymMatrix.from_dense(c_t - contrast * c_b))
    score = np.abs(vecs[:, 0])
    order = sorted(range(d), key=lambda i: (-score[i], i))
    salient = np.array(sorted(order[:q_hat]), dtype=int)
    background = np.array(sorted(order[q_hat:]), dtype=int)
    return background, salient


# ---------------------------------------------------------------- clustering


def kmeans(points: np.ndarray, k: int, rng: Rng, max_iter: int = 300) -> np.ndarray:
    """k-means++ seeding then Lloyd iterations until the assignment stops changing."""
    x = np.asarray(points, float)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError("need 1 <= k <= N")
    g = rng.gen
    centers = [x[g.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(np.argmax(d2 == d2.max()))
            # all remaining points coincide with a centre: take any unused point
            used = {tuple(c) for c in centers}
            idx = next((i for i in range(n) if tuple(x[i]) not in used), idx)
        else:
            idx = int(g.choice(n, p=d2 / total))
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    c = np.array(centers)
    labels = None
    for _ in range(max_iter):
        dist = ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
        new = dist.argmin(axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = x[labels == j]
            if members.shape[0] == 0:
                far = int(dist.min(axis=1).argmax())
                c[j] = x[far]
                labels[far] = j
            else:
                c[j] = members.mean(axis=0)
    return labels


def _contingency(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)
    return table


def _comb2(x):
    return x * (x - 1) / 2.0


def adjusted_rand_index(true: np.ndarray, pred: np.ndarray) -> float:
    t = _contingency(np.asarray(true), np.asarray(pred))
    n = t.sum()
    sum_ij = _comb2(t).sum()
    sum_a = _comb2(t.sum(axis=1)).sum()
    sum_b = _comb2(t.sum(axis=0)).sum()
    expected = sum_a * sum_b / _comb2(n)
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def normalized_mutual_info(true: np.ndarray, pred: np.ndarray) -> float:
    """``2 MI / (H(y) + H(y'))`` with natural logs."""
    t = _contingency(np.asarray(true), np.asarray(pred))
    n = t.sum()
    p = t / n
    pa, pb = t.sum(axis=1) / n, t.sum(axis=0) / n  # integer marginals, exact
    nz = p > 0
    # fsum is exactly rounded, so relabelling (which only reorders terms) leaves the value unchanged
    mi = math.fsum(p[nz] * np.log(p[nz] / np.outer(pa, pb)[nz]))
    ha = -math.fsum(pa * np.log(pa))
    hb = -math.fsum(pb * np.log(pb))
    if ha + hb == 0.0:
        warnings.warn("NMI undefined for two single-cluster labelings; returning 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return 2.0 * mi / (ha + hb)


def silhouette(embedding: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette width, Euclidean distance; singletons score 0."""
    x = np.asarray(embedding, float)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise ValueError("silhouette needs at least two distinct labels")
    sq = (x * x).sum(axis=1)
    dist = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0))
    masks = [labels == u for u in uniq]
    sizes = np.array([m.sum() for m in masks])
    sums = np.stack([dist[:, m].sum(axis=1) for m in masks], axis=1)
    own = np.searchsorted(uniq, labels)
    rows = np.arange(x.shape[0])
    own_size = sizes[own]
    a = np.where(own_size > 1, sums[rows, own] / np.maximum(own_size - 1, 1), 0.0)
    other = sums / sizes
    other[rows, own] = np.inf
    b = other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own_size > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def clustering_scores(pred: np.ndarray, true: np.ndarray, embedding: np.ndarray) -> tuple[float, float, float]:
    return adjusted_rand_index(true, pred), normalized_mutual_info(true, pred), silhouette(embedding, true)


# ---------------------------------------------------------------- report


@dataclass
class MetricsReport:
    pearson: MccBlock | None
    spearman: MccBlock | None
    delta_mcc: float | None
    delta_mcc_spearman: float | None
    cmcc_pearson: float | None
    cmcc_spearman: float | None
    ari: float | None = None
    nmi: float | None = None
    asw: float | None = None
    final_cka: float | None = None
    salient_units: list[int] | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        for key in ("pearson", "spearman"):
            if d.get(key) is not None:
                d[key] = MccBlock(**d[key])
        return cls(**d)
