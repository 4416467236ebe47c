"""Contrastive, multi-group and plain VAEs with their ELBO objectives."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .distributions import (
    RATE_FLOOR,
    DiagGaussian,
    LikelihoodSpec,
    clamp_logvar,
    kl_diag_gaussian_to_standard,
    log_likelihood,
    reparam_sample,
)
from .numerics import Rng

MODEL_KINDS = ("cvae", "vae", "multigroup")


@dataclass
class ComparativeVAE:
    """Parameter container shared by all three model kinds.

    ``cvae``: encoders ``encoder_z`` (width p_hat) and ``encoder_s`` (q_hat),
    decoder on ``[z, s]``. ``vae``: one ``encoder`` of width p_hat + q_hat.
    ``multigroup``: encoders ``encoder_z``, ``encoder_t1``, ``encoder_t2`` and a
    decoder on ``[z, t1, t2]``.
    """

    kind: str
    p_hat: int
    q_hat: int
    n_features: int
    likelihood: LikelihoodSpec
    specs: dict[str, nn.MlpSpec]
    stores: dict[str, nn.ParamStore]
    log_theta: ad.Tensor | None = None
    log_input: bool = True
    extra: dict = field(default_factory=dict)

    # -- parameters

    def parameters(self) -> dict[str, ad.Tensor]:
        out = {}
        for net, store in self.stores.items():
            for k, t in store.params.items():
                out[f"{net}/{k}"] = t
        if self.log_theta is not None:
            out["decoder/log_theta"] = self.log_theta
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{net}/{k}": v for net, store in self.stores.items() for k, v in store.buffers.items()}

    def snapshot(self) -> dict[str, np.ndarray]:
        snap = {k: t.data.copy() for k, t in self.parameters().items()}
        snap.update({f"buffer:{k}": v.copy() for k, v in self.buffers().items()})
        return snap

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, t in self.parameters().items():
            t.data = snap[k].copy()
        for k in self.buffers():
            net, name = k.split("/", 1)
            self.stores[net].buffers[name] = snap[f"buffer:{k}"].copy()

    @property
    def last_decoder_weight(self) -> str:
        return "decoder/rate.w"

    # -- forward pieces

    def _input(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        return np.log1p(x) if self.log_input else x

    def encode(self, net: str, x, mode: str = "eval", rng: Rng | None = None) -> DiagGaussian:
        out = nn.mlp_forward(self.stores[net], self.specs[net], self._input(x), mode, rng)
        return DiagGaussian(out["mu"], clamp_logvar(out["logvar"]))

    def decode(self, latent: ad.Tensor, mode: str = "eval", rng: Rng | None = None) -> ad.Tensor:
        out = nn.mlp_forward(self.stores["decoder"], self.specs["decoder"], latent, mode, rng)
        return out["rate"] + RATE_FLOOR

    def theta(self) -> ad.Tensor | None:
        return None if self.log_theta is None else ad.exp(self.log_theta)

    def posterior_means(self, x, net: str) -> np.ndarray:
        return self.encode(net, x, "eval").mean.data


def build_model(kind: str, p_hat: int, q_hat: int, n_features: int, likelihood: LikelihoodSpec | str,
                rng: Rng, dropout: float = 0.1, log_input: bool | None = None) -> ComparativeVAE:
    if kind not in MODEL_KINDS:
        raise ValueError(f"model kind must be one of {MODEL_KINDS}")
    if isinstance(likelihood, str):
        likelihood = LikelihoodSpec(likelihood)
    if log_input is None:
        log_input = likelihood.is_count
    init = rng.stream("init")
    if kind == "cvae":
        specs = {
            "encoder_z": nn.encoder_spec(n_features, p_hat, dropout=dropout),
            "encoder_s": nn.encoder_spec(n_features, q_hat, dropout=dropout),
            "decoder": nn.decoder_spec(p_hat + q_hat, n_features, dropout=dropout),
        }
    elif kind == "vae":
        specs = {
            "encoder": nn.encoder_spec(n_features, p_hat + q_hat, dropout=dropout),
            "decoder": nn.decoder_spec(p_hat + q_hat, n_features, dropout=dropout),
        }
    else:
        specs = {
            "encoder_z": nn.encoder_spec(n_features, p_hat, dropout=dropout),
            "encoder_t1": nn.encoder_spec(n_features, q_hat, dropout=dropout),
            "encoder_t2": nn.encoder_spec(n_features, q_hat, dropout=dropout),
            "decoder": nn.decoder_spec(p_hat + 2 * q_hat, n_features, dropout=dropout),
        }
    stores = {name: nn.init_params(spec, init.stream(name)) for name, spec in specs.items()}
    log_theta = ad.Tensor(np.zeros(n_features), name="log_theta") if likelihood.kind == "nb" else None
    return ComparativeVAE(kind, p_hat, q_hat, n_features, likelihood, specs, stores, log_theta, log_input)


@dataclass
class ElboTerms:
    """Batch-mean ELBO pieces; ``total = reconstruction - kl_z - kl_s``."""

    reconstruction: ad.Tensor
    kl_z: ad.Tensor
    kl_s: ad.Tensor
    total: ad.Tensor
    latents: dict[str, ad.Tensor] = field(default_factory=dict)
    posteriors: dict[str, DiagGaussian] = field(default_factory=dict)

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("reconstruction", "kl_z", "kl_s", "total")}


def _terms(model, x, rate, kls, latents, posteriors) -> ElboTerms:
    rec = ad.mean(log_likelihood(model.likelihood, x, rate, model.theta()))
    kl_vals = [ad.mean(k) if k is not None else ad.Tensor(0.0) for k in kls]
    total = rec - kl_vals[0] - kl_vals[1]
    return ElboTerms(rec, kl_vals[0], kl_vals[1], total, latents, posteriors)


def _noise(rng: Rng | None, eps: dict | None, key: str, shape) -> np.ndarray:
    if eps is not None and key in eps:
        return eps[key]
    return rng.normal(shape)


def elbo_target(model: ComparativeVAE, x, rng: Rng | None, mode: str = "train",
                eps: dict | None = None, force_s_zero: bool = False) -> ElboTerms:
    """Single-sample ELBO of target points under ``q(z|x) q(s|x)``.

    ``eps`` optionally fixes the standard-normal draws (keys ``z`` and ``s``).
    ``force_s_zero`` decodes ``[z, 0]`` and drops the salient KL.
    """
    qz = model.encode("encoder_z", x, mode, rng)
    z = reparam_sample(qz, eps=_noise(rng, eps, "z", qz.mean.shape))
    if force_s_zero:
        s = ad.Tensor(np.zeros((z.shape[0], model.q_hat)))
        kl_s, posts = None, {"z": qz}
    else:
        qs = model.encode("encoder_s", x, mode, rng)
        s = reparam_sample(qs, eps=_noise(rng, eps, "s", qs.mean.shape))
        kl_s, posts = kl_diag_gaussian_to_standard(qs), {"z": qz, "s": qs}
    rate = model.decode(ad.concat([z, s]), mode, rng)
    return _terms(model, x, rate, (kl_diag_gaussian_to_standard(qz), kl_s), {"z": z, "s": s}, posts)


def elbo_background(model: ComparativeVAE, x, rng: Rng | None, mode: str = "train",
                    eps: dict | None = None) -> ElboTerms:
    """Background ELBO: decoder sees ``[z, 0]``; ``encoder_s`` is never evaluated."""
    return elbo_target(model, x, rng, mode, eps, force_s_zero=True)


def vae_elbo(model: ComparativeVAE, x, rng: Rng | None, mode: str = "train", eps: dict | None = None) -> ElboTerms:
    q = model.encode("encoder", x, mode, rng)
    u = reparam_sample(q, eps=_noise(rng, eps, "u", q.mean.shape))
    rate = model.decode(u, mode, rng)
    return _terms(model, x, rate, (kl_diag_gaussian_to_standard(q), None), {"u": u}, {"u": q})


def multigroup_elbos(model: ComparativeVAE, x1, x2, rng: Rng | None, mode: str = "train",
                     eps: dict | None = None) -> tuple[ElboTerms, ElboTerms]:
    """(L1, L2): set 1 decodes ``[z, t1, 0]``, set 2 decodes ``[z, 0, t2]``.

    Each ELBO reports the shared-block KL as ``kl_z`` and its private-block KL as ``kl_s``.
    """
    out = []
    for group, x in ((1, x1), (2, x2)):
        suffix = str(group)
        qz = model.encode("encoder_z", x, mode, rng)
        qt = model.encode(f"encoder_t{group}", x, mode, rng)
        z = reparam_sample(qz, eps=_noise(rng, eps, "z" + suffix, qz.mean.shape))
        t = reparam_sample(qt, eps=_noise(rng, eps, "t" + suffix, qt.mean.shape))
        zeros = ad.Tensor(np.zeros((z.shape[0], model.q_hat)))
        latent = ad.concat([z, t, zeros] if group == 1 else [z, zeros, t])
        rate = model.decode(latent, mode, rng)
        out.append(_terms(model, x, rate, (kl_diag_gaussian_to_standard(qz), kl_diag_gaussian_to_standard(qt)),
                          {"z": z, "t": t}, {"z": qz, "t": qt}))
    return out[0], out[1]


def wasserstein_penalty(q_s: DiagGaussian) -> ad.Tensor:
    """Batch mean of ``||mu||^2 + ||sigma||^2``: squared W2 distance to a point mass at 0."""
    return ad.mean(ad.sum(ad.square(q_s.mean) + ad.exp(q_s.logvar), axis=1))
