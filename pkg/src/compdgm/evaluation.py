"""Turn a fitted model plus a dataset into a ``MetricsReport``."""

from __future__ import annotations

import numpy as np

from . import metrics as mt
from .models import ComparativeVAE
from .numerics import Rng
from .optim import batch_cka

CKA_ROWS = 512  # rows used for the posterior-mean CKA when no training history is given


def latent_estimates(model: ComparativeVAE, x_background: np.ndarray, x_target: np.ndarray,
                     cpca_contrast: float = 1.0) -> tuple[np.ndarray, np.ndarray, list[int] | None]:
    """Posterior-mean ``z_hat`` over background then target rows and ``s_hat`` over target rows.

    For the plain VAE the latent units are split by contrastive PCA.
    """
    x_all = np.vstack([x_background, x_target])
    if model.kind == "cvae":
        return model.posterior_means(x_all, "encoder_z"), model.posterior_means(x_target, "encoder_s"), None
    if model.kind == "vae":
        u_b = model.posterior_means(x_background, "encoder")
        u_t = model.posterior_means(x_target, "encoder")
        bg, sal = mt.cpca_split(u_b, u_t, model.q_hat, cpca_contrast)
        return np.vstack([u_b, u_t])[:, bg], u_t[:, sal], sal.tolist()
    raise ValueError("latent_estimates handles cvae and vae models; use multigroup metrics for multigroup")


def evaluate(model: ComparativeVAE, x_background: np.ndarray, x_target: np.ndarray,
             z_true: np.ndarray | None = None, s_true: np.ndarray | None = None,
             labels: np.ndarray | None = None, history: list[dict] | None = None,
             seed: int = 0, cpca_contrast: float = 1.0, config: dict | None = None) -> mt.MetricsReport:
    z_hat, s_hat, salient = latent_estimates(model, x_background, x_target, cpca_contrast)
    n_b = x_background.shape[0]
    zt_hat = z_hat[n_b:]
    blocks = {}
    if z_true is not None and s_true is not None:
        for kind in ("pearson", "spearman"):
            blocks[kind] = mt.mcc_block(z_hat, s_hat, z_true, s_true, slice(n_b, None), kind)
    ari = nmi = asw = None
    if labels is not None:
        labels = np.asarray(labels)
        k = np.unique(labels).size
        pred = mt.kmeans(s_hat, k, Rng(seed, "kmeans"))
        ari, nmi, asw = mt.clustering_scores(pred, labels, s_hat)
    return mt.MetricsReport(
        pearson=blocks.get("pearson"),
        spearman=blocks.get("spearman"),
        delta_mcc=mt.delta_mcc(blocks["pearson"]) if blocks else None,
        delta_mcc_spearman=mt.delta_mcc(blocks["spearman"]) if blocks else None,
        cmcc_pearson=mt.cross_mcc(zt_hat, s_hat, "pearson"),
        cmcc_spearman=mt.cross_mcc(zt_hat, s_hat, "spearman"),
        ari=ari, nmi=nmi, asw=asw,
        final_cka=final_cka(history, zt_hat, s_hat),
        salient_units=salient,
        config=dict(config or {}),
    )


def final_cka(history: list[dict] | None, zt_hat: np.ndarray, s_hat: np.ndarray, last: int = 10) -> float | None:
    """Mean batch CKA over the last ``last`` epochs, or the posterior-mean CKA without a history."""
    if history:
        vals = [h["cka_estimate"] for h in history[-last:] if h.get("cka_estimate") is not None]
        if vals:
            return float(np.mean(vals))
    return batch_cka(zt_hat[:CKA_ROWS], s_hat[:CKA_ROWS], "rbf")
