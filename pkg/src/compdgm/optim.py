"""Adam, two-objective MGDA, HSIC penalty / primal-dual constraint, and the training driver."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import hsic as hs
from .models import (
    ComparativeVAE,
    build_model,
    elbo_background,
    elbo_target,
    multigroup_elbos,
    vae_elbo,
    wasserstein_penalty,
)
from .numerics import Rng

log = logging.getLogger(__name__)

REGULARIZERS = ("none", "penalty", "constrained", "wasserstein")


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """One training run. Flat so it maps 1:1 onto the JSON config file.

    ``dropout`` (0.1), ``batch_size`` (128) and the batch-norm settings are
    conventions, not values fixed by the method description.
    """

    model: str = "cvae"  # cvae | vae | multigroup
    likelihood: str = "poisson"  # poisson | nb | gaussian
    p_hat: int = 5
    q_hat: int = 5
    objective: str = "SO"  # SO | MO
    regularizer: str = "none"
    penalty_lambda: float = 0.0
    penalty_form: str = "cross"  # cross: lambda*HSIC(z,s); residual: lambda*(HSIC - beta*norms)
    beta: float = 0.05
    wasserstein_weight: float = 1.0
    epochs: int = 500
    batch_size: int = 128
    lr_primal: float = 1e-3
    lr_dual: float = 1.0
    kernel: str = "rbf"
    val_fraction: float = 0.1
    patience: int = 20
    dropout: float = 0.1
    gaussian_sigma2: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.objective not in ("SO", "MO"):
            raise ValueError("objective must be SO or MO")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"regularizer must be one of {REGULARIZERS}")
        if self.penalty_lambda < 0:
            raise ValueError("penalty_lambda must be >= 0")
        if self.regularizer == "constrained" and self.beta <= 0:
            raise ValueError("beta must be > 0 in constrained mode")
        if self.regularizer != "none" and self.model != "cvae":
            raise ValueError("regularizers are defined for the cvae model only")
        if self.penalty_form not in ("cross", "residual"):
            raise ValueError("penalty_form must be cross or residual")
        if self.kernel not in ("rbf", "linear"):
            raise ValueError("kernel must be rbf or linear")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.epochs < 0 or self.patience < 1:
            raise ValueError("epochs must be >= 0 and patience >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def label(self) -> str:
        if self.model == "vae":
            return "VAE"
        reg = {"none": "", "penalty": f"U(lambda={self.penalty_lambda:g})-", "constrained": "CO-",
               "wasserstein": "W-"}[self.regularizer]
        return f"{self.objective}-{reg}cVAE"


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(state: AdamState, params: dict[str, ad.Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
    """In-place Adam update with bias correction."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name} at optimizer step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name].data = params[name].data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------- MGDA


@dataclass(frozen=True)
class AlphaResult:
    alpha: float
    stationary: bool = False


def mgda_alpha(g_b: np.ndarray, g_t: np.ndarray) -> AlphaResult:
    """Minimizer over [0, 1] of ``||a g_b + (1 - a) g_t||^2`` in closed form."""
    g_b = np.ravel(g_b)
    g_t = np.ravel(g_t)
    diff = g_t - g_b
    denom = float(diff @ diff)
    if denom == 0.0:
        stationary = not (np.any(g_b) or np.any(g_t))
        return AlphaResult(0.5, stationary)
    a = float(diff @ g_t) / denom
    return AlphaResult(min(1.0, max(0.0, a)))


def combine(g_b: dict, g_t: dict, w_b: float, w_t: float, extra: dict | None = None) -> dict[str, np.ndarray]:
    out = {k: w_b * g_b[k] + w_t * g_t[k] for k in g_b}
    if extra is not None:
        for k, v in extra.items():
            out[k] = out[k] + v
    return out


# ---------------------------------------------------------------- objectives


@dataclass
class TrainState:
    adam: AdamState = field(default_factory=AdamState)
    lam: float = 0.0
    epoch: int = 0
    best_val: float = -math.inf
    bad_epochs: int = 0
    alpha: float | None = None
    residuals: list[float] = field(default_factory=list)
    stopped_early: bool = False


@dataclass
class StepInfo:
    elbo_b: float
    elbo_t: float
    alpha: float | None
    lam: float
    residual: float | None
    cka: float | None
    reg_value: float | None


def objectives(model: ComparativeVAE, xb, xt, rng: Rng, mode: str = "train", eps: dict | None = None):
    """(-L^B, -L^T, extras) for one pair of minibatches."""
    if model.kind == "cvae":
        lb = elbo_background(model, xb, rng, mode, eps)
        lt = elbo_target(model, xt, rng, mode, eps)
        extras = {"z": lt.latents["z"], "s": lt.latents["s"]}
    elif model.kind == "vae":
        lb = vae_elbo(model, xb, rng, mode, None if eps is None else {"u": eps["ub"]} if "ub" in eps else None)
        lt = vae_elbo(model, xt, rng, mode, None if eps is None else {"u": eps["ut"]} if "ut" in eps else None)
        extras = {}
    else:
        lb, lt = multigroup_elbos(model, xb, xt, rng, mode, eps)
        extras = {}
    return -lb.total, -lt.total, extras


def regularizer_term(model: ComparativeVAE, cfg: TrainConfig, lam: float, extras: dict, xb, rng: Rng,
                     mode: str = "train") -> tuple[ad.Tensor | None, float | None, float | None]:
    """(term added to the loss, detached constraint residual, detached CKA)."""
    if cfg.regularizer == "wasserstein":
        qs = model.encode("encoder_s", xb, mode, rng)
        return wasserstein_penalty(qs) * cfg.wasserstein_weight, None, None
    if cfg.regularizer in ("penalty", "constrained"):
        z, s = extras["z"], extras["s"]
        try:
            hzs, hzz, hss = hs.hsic_terms(z, s, cfg.kernel)
            hs._check_self(hzz.item(), hss.item())
        except hs.ZeroSelfHSIC:
            warnings.warn("degenerate HSIC block, constraint skipped for this batch", RuntimeWarning, stacklevel=2)
            return None, None, None
        norms = ad.sqrt(hzz * hss)
        residual = hzs - cfg.beta * norms
        cka_val = hzs.item() / norms.item()
        # a zero-weighted term is left out of the graph so lambda = 0 matches the plain objective bit for bit
        weight = cfg.penalty_lambda if cfg.regularizer == "penalty" else lam
        if weight == 0.0:
            return None, residual.item(), cka_val
        term = hzs if cfg.regularizer == "penalty" and cfg.penalty_form == "cross" else residual
        return term * weight, residual.item(), cka_val
    return None, None, None


def batch_cka(z: np.ndarray, s: np.ndarray, kernel: str) -> float | None:
    if s.shape[1] == 0:
        return None
    try:
        return hs.cka(ad.Tensor(z), ad.Tensor(s), kernel).item()
    except hs.ZeroSelfHSIC:
        return None


def mgda_direction(model: ComparativeVAE, loss_b: ad.Tensor, loss_t: ad.Tensor, reg: ad.Tensor | None = None,
                   alpha_override: float | None = None) -> tuple[dict[str, np.ndarray], AlphaResult]:
    """``alpha * grad(-L^B) + (1 - alpha) * grad(-L^T)`` (+ the regularizer gradient, unweighted).

    ``alpha`` comes from the last decoder layer's weight gradients only.
    """
    params = model.parameters()
    names = list(params)
    plist = [params[n] for n in names]
    g_b = dict(zip(names, ad.grad(loss_b, plist)))
    g_t = dict(zip(names, ad.grad(loss_t, plist)))
    key = model.last_decoder_weight
    res = mgda_alpha(g_b[key], g_t[key]) if alpha_override is None else AlphaResult(alpha_override)
    extra = None if reg is None else dict(zip(names, ad.grad(reg, plist)))
    return combine(g_b, g_t, res.alpha, 1.0 - res.alpha, extra), res


def so_direction(model: ComparativeVAE, loss_b: ad.Tensor, loss_t: ad.Tensor, reg: ad.Tensor | None = None,
                 w_b: float = 1.0, w_t: float = 1.0) -> dict[str, np.ndarray]:
    params = model.parameters()
    total = loss_b * w_b + loss_t * w_t
    if reg is not None:
        total = total + reg
    names = list(params)
    return dict(zip(names, ad.grad(total, [params[n] for n in names])))


def train_step(model: ComparativeVAE, state: TrainState, xb, xt, cfg: TrainConfig, rng: Rng) -> StepInfo:
    loss_b, loss_t, extras = objectives(model, xb, xt, rng, "train")
    reg, residual, cka_val = regularizer_term(model, cfg, state.lam, extras, xb, rng)
    if cka_val is None and "s" in extras:
        cka_val = batch_cka(extras["z"].data, extras["s"].data, cfg.kernel)
    alpha = None
    if cfg.objective == "MO":
        grads, res = mgda_direction(model, loss_b, loss_t, reg)
        alpha = state.alpha = res.alpha
    else:
        grads = so_direction(model, loss_b, loss_t, reg)
    adam_step(state.adam, model.parameters(), grads, cfg.lr_primal)
    lam_used = state.lam
    if cfg.regularizer == "constrained" and residual is not None:
        state.lam = dual_update(state.lam, residual, cfg.lr_dual)
        state.residuals.append(residual)
    return StepInfo(-loss_b.item(), -loss_t.item(), alpha, lam_used, residual, cka_val,
                    None if reg is None else reg.item())


def dual_update(lam: float, residual: float, lr_dual: float) -> float:
    """Projected ascent: ``max(0, lam + lr * residual)``."""
    return max(0.0, lam + lr_dual * residual)


def constrained_step(model: ComparativeVAE, state: TrainState, xb, xt, cfg: TrainConfig, rng: Rng) -> StepInfo:
    if cfg.regularizer != "constrained":
        raise ValueError("constrained_step needs regularizer='constrained'")
    return train_step(model, state, xb, xt, cfg, rng)


# ---------------------------------------------------------------- driver


@dataclass
class TrainResult:
    model: ComparativeVAE
    state: TrainState
    history: list[dict]
    split: dict[str, np.ndarray]


def split_indices(n: int, val_fraction: float, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def composite_elbo(model: ComparativeVAE, xb, xt, seed: int) -> float:
    """Eval-mode composite ELBO (sum of the two batch-mean ELBOs), noise fixed by ``seed``."""
    loss_b, loss_t, _ = objectives(model, xb, xt, Rng(seed, "val"), "eval")
    return -(loss_b.item() + loss_t.item())


def _cyclic_batch(perm: np.ndarray, step: int, size: int) -> np.ndarray:
    return perm[(step * size + np.arange(size)) % perm.size]


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def model_for_config(cfg: TrainConfig, n_features: int) -> ComparativeVAE:
    from .distributions import LikelihoodSpec

    lik = LikelihoodSpec(cfg.likelihood, sigma2=cfg.gaussian_sigma2)
    return build_model(cfg.model, cfg.p_hat, cfg.q_hat, n_features, lik, Rng(cfg.seed, "model"), cfg.dropout)


def train(model: ComparativeVAE, x_background: np.ndarray, x_target: np.ndarray, cfg: TrainConfig,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Paired-minibatch training with validation-ELBO early stopping.

    Every step draws one background and one target minibatch of
    ``batch_size`` rows, cycling through a fresh permutation of each side, so
    the smaller data set is recycled. An epoch has ``ceil(max(n_b, n_t) / B)``
    steps. The best validation parameters are restored at the end.
    """
    if x_background.shape[0] == 0 or x_target.shape[0] == 0:
        raise ValueError("both data sets must be non-empty")
    root = Rng(cfg.seed, "train")
    tr_b, va_b = split_indices(x_background.shape[0], cfg.val_fraction, root.stream("split-b"))
    tr_t, va_t = split_indices(x_target.shape[0], cfg.val_fraction, root.stream("split-t"))
    split = {"train_b": tr_b, "val_b": va_b, "train_t": tr_t, "val_t": va_t}
    state = TrainState()
    history: list[dict] = []
    if cfg.epochs == 0:
        return TrainResult(model, state, history, split)

    if min(va_b.size, va_t.size) < cfg.batch_size:
        warnings.warn("validation split smaller than one batch; early stopping uses the full-data ELBO",
                      RuntimeWarning, stacklevel=2)
        val_b, val_t = x_background, x_target
    else:
        val_b, val_t = x_background[va_b], x_target[va_t]
    xb_tr, xt_tr = x_background[tr_b], x_target[tr_t]
    shuffle = root.stream("shuffle")
    step_rng = root.stream("step")
    bsize = cfg.batch_size
    n_steps = math.ceil(max(xb_tr.shape[0], xt_tr.shape[0]) / bsize)
    best = model.snapshot()

    for epoch in range(1, cfg.epochs + 1):
        state.epoch = epoch
        perm_b = shuffle.permutation(xb_tr.shape[0])
        perm_t = shuffle.permutation(xt_tr.shape[0])
        infos = []
        for step in range(n_steps):
            xb = xb_tr[_cyclic_batch(perm_b, step, min(bsize, xb_tr.shape[0]))]
            xt = xt_tr[_cyclic_batch(perm_t, step, min(bsize, xt_tr.shape[0]))]
            infos.append(train_step(model, state, xb, xt, cfg, step_rng))
        val = composite_elbo(model, val_b, val_t, cfg.seed)
        rec = {
            "epoch": epoch,
            "train_elbo_b": _mean([i.elbo_b for i in infos]),
            "train_elbo_t": _mean([i.elbo_t for i in infos]),
            "val_elbo": val,
            "alpha_mean": _mean([i.alpha for i in infos]),
            "lambda": state.lam,
            "cka_estimate": _mean([i.cka for i in infos]),
        }
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if not np.isfinite(val):
            raise NonFiniteGradient(f"non-finite validation ELBO at epoch {epoch}")
        if val > state.best_val:
            state.best_val = val
            state.bad_epochs = 0
            best = model.snapshot()
        else:
            state.bad_epochs += 1
            if state.bad_epochs >= cfg.patience:
                state.stopped_early = True
                log.info("early stop at epoch %d", epoch)
                break
    model.restore(best)
    return TrainResult(model, state, history, split)


def history_jsonl(history: list[dict]) -> str:
    return "".join(json.dumps(rec) + "\n" for rec in history)
