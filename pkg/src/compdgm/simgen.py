"""Synthetic contrastive / multi-group count data from a random injective mixing network."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .numerics import Rng, sample

NOISE_KINDS = ("poisson", "nb", "gaussian")


@dataclass(frozen=True)
class SimConfig:
    p: int = 5
    q: int = 5
    n_features: int = 150
    n_background: int = 1500
    n_target: int = 1500
    noise: str = "poisson"
    library_size: float = 1500.0
    theta_range: tuple[float, float] = (1.0, 5.0)
    seed: int = 0
    group_count: int | None = None
    group_mean_scale: float = 2.0  # group means ~ N(0, scale^2 I)
    mixing_width: int = 40
    mixing_depth: int = 4
    mixing_slope: float = 0.2
    mixing_activation: str = "leaky_relu"
    mixing_input_scale: float = 1.0
    gaussian_sigma2: float = 1.0

    def __post_init__(self):
        for name in ("p", "q", "n_features", "n_background", "n_target"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.noise not in NOISE_KINDS:
            raise ValueError(f"noise must be one of {NOISE_KINDS}")
        if self.library_size <= 0:
            raise ValueError("library_size must be positive")
        lo, hi = self.theta_range
        if not (0 < lo <= hi):
            raise ValueError("theta_range must satisfy 0 < lo <= hi")
        if self.group_count is not None and self.group_count < 1:
            raise ValueError("group_count must be >= 1")
        if self.mixing_activation not in ("leaky_relu", "tanh"):
            raise ValueError("mixing_activation must be leaky_relu or tanh")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["theta_range"] = list(self.theta_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown SimConfig keys: {sorted(unknown)}")
        d = dict(d)
        if "theta_range" in d:
            d["theta_range"] = tuple(d["theta_range"])
        return cls(**d)


# presets for the tanh-mixing misspecification experiment
TANH_QUASI_LINEAR_SCALE = 0.1
TANH_NONLINEAR_SCALE = 1.0


@dataclass
class SimDataset:
    x_background: np.ndarray
    x_target: np.ndarray
    z_true: np.ndarray | None  # background rows first, then target rows
    s_true: np.ndarray | None  # target rows only
    noise: str
    theta_true: np.ndarray | None = None
    labels: np.ndarray | None = None  # target rows only
    mixing: nn.ParamStore | None = None
    mixing_spec: nn.MlpSpec | None = None
    config: dict = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return self.x_target.shape[1]

    @property
    def has_latents(self) -> bool:
        return self.z_true is not None and self.s_true is not None


def build_mixing(cfg: SimConfig, d_latent: int, rng: Rng) -> tuple[nn.MlpSpec, nn.ParamStore]:
    spec = nn.mixing_spec(
        d_latent, cfg.n_features, width=cfg.mixing_width, depth=cfg.mixing_depth,
        slope=cfg.mixing_slope, activation=cfg.mixing_activation, input_scale=cfg.mixing_input_scale,
    )
    return spec, nn.init_params(spec, rng, scheme="orthogonal")


def mixing_rates(spec: nn.MlpSpec, store: nn.ParamStore, latents: np.ndarray, library_size: float) -> np.ndarray:
    """``L * softmax(f(latents))``, one rate vector per row."""
    return library_size * nn.mlp_forward(store, spec, latents, mode="eval")["out"].data


def _observe(cfg: SimConfig, rates: np.ndarray, theta: np.ndarray | None, rng: Rng) -> np.ndarray:
    if cfg.noise == "poisson":
        return sample(rng, "poisson", rates.shape, rate=rates)
    if cfg.noise == "nb":
        return sample(rng, "nb", rates.shape, mean=rates, theta=theta)
    return rates + np.sqrt(cfg.gaussian_sigma2) * rng.normal(rates.shape)


def _draw_theta(cfg: SimConfig, rng: Rng) -> np.ndarray | None:
    # drawn regardless of noise kind so other streams never shift
    lo, hi = cfg.theta_range
    theta = rng.uniform(lo, hi, cfg.n_features)
    return theta if cfg.noise == "nb" else None


def generate_contrastive(cfg: SimConfig) -> SimDataset:
    root = Rng(cfg.seed, "simgen")
    spec, mixing = build_mixing(cfg, cfg.p + cfg.q, root.stream("mixing"))
    lat = root.stream("latents")
    z = lat.normal((cfg.n_background + cfg.n_target, cfg.p))
    s = lat.normal((cfg.n_target, cfg.q))
    labels = None
    if cfg.group_count is not None:
        grp = root.stream("groups")
        means = cfg.group_mean_scale * grp.normal((cfg.group_count, cfg.q))
        labels = (np.arange(cfg.n_target) % cfg.group_count)[grp.permutation(cfg.n_target)]
        s = s + means[labels]
    theta = _draw_theta(cfg, root.stream("theta"))
    zb, zt = z[: cfg.n_background], z[cfg.n_background :]
    rates_b = mixing_rates(spec, mixing, np.hstack([zb, np.zeros((cfg.n_background, cfg.q))]), cfg.library_size)
    rates_t = mixing_rates(spec, mixing, np.hstack([zt, s]), cfg.library_size)
    noise = root.stream("noise")
    xb = _observe(cfg, rates_b, theta, noise.stream("background"))
    xt = _observe(cfg, rates_t, theta, noise.stream("target"))
    return SimDataset(xb, xt, z, s, cfg.noise, theta, labels, mixing, spec, cfg.to_dict())


def generate_grouped_salient(cfg: SimConfig) -> SimDataset:
    if cfg.group_count is None or cfg.group_count < 2:
        raise ValueError("generate_grouped_salient needs group_count >= 2")
    return generate_contrastive(cfg)


@dataclass
class MultiGroupDataset:
    x1: np.ndarray
    x2: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    t1: np.ndarray  # private block of data set 1
    t2: np.ndarray  # private block of data set 2
    noise: str
    theta_true: np.ndarray | None
    mixing: nn.ParamStore
    mixing_spec: nn.MlpSpec


def multigroup_latents(z: np.ndarray, t: np.ndarray, group: int) -> np.ndarray:
    """Decoder input ``[z, t1, 0]`` for group 1 and ``[z, 0, t2]`` for group 2."""
    zeros = np.zeros_like(t)
    return np.hstack([z, t, zeros] if group == 1 else [z, zeros, t])


def generate_multigroup(cfg: SimConfig, mixing: nn.ParamStore | None = None) -> MultiGroupDataset:
    """Data set 1 (``n_background`` rows) from f(z, t1, 0), data set 2 (``n_target`` rows) from f(z, 0, t2)."""
    root = Rng(cfg.seed, "simgen-mg")
    spec, default_mixing = build_mixing(cfg, cfg.p + 2 * cfg.q, root.stream("mixing"))
    mixing = default_mixing if mixing is None else mixing
    lat = root.stream("latents")
    z1 = lat.normal((cfg.n_background, cfg.p))
    z2 = lat.normal((cfg.n_target, cfg.p))
    t1 = lat.normal((cfg.n_background, cfg.q))
    t2 = lat.normal((cfg.n_target, cfg.q))
    theta = _draw_theta(cfg, root.stream("theta"))
    r1 = mixing_rates(spec, mixing, multigroup_latents(z1, t1, 1), cfg.library_size)
    r2 = mixing_rates(spec, mixing, multigroup_latents(z2, t2, 2), cfg.library_size)
    noise = root.stream("noise")
    x1 = _observe(cfg, r1, theta, noise.stream("1"))
    x2 = _observe(cfg, r2, theta, noise.stream("2"))
    return MultiGroupDataset(x1, x2, z1, z2, t1, t2, cfg.noise, theta, mixing, spec)
