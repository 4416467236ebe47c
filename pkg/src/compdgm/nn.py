"""MLP building blocks and the fixed architectures used for comparative VAEs.

Weights use the ``x @ W`` convention: a layer mapping ``d_in -> d_out`` stores
``W`` with shape ``(d_in, d_out)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .numerics import Rng, orthonormalize_columns

ACTIVATIONS = ("relu", "leaky_relu", "softplus", "tanh", "softmax", "none")


@dataclass(frozen=True)
class Layer:
    width: int
    activation: str = "relu"
    batch_norm: bool = False
    dropout: float = 0.0
    bias: bool = True


@dataclass(frozen=True)
class MlpSpec:
    """Trunk of hidden layers followed by one linear head per named output."""

    d_in: int
    hidden: tuple[Layer, ...]
    heads: tuple[tuple[str, int, str], ...]
    slope: float = 0.2
    input_scale: float = 1.0
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.d_in <= 0:
            raise ValueError("d_in must be positive")
        for layer in self.hidden:
            if layer.width <= 0:
                raise ValueError("layer widths must be positive")
            if not 0.0 <= layer.dropout < 1.0:
                raise ValueError("dropout rate must lie in [0, 1)")
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation}")
        for _, width, act in self.heads:
            if width < 0:
                raise ValueError("head width must be non-negative")
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act}")


@dataclass
class ParamStore:
    """Trainable tensors plus non-trainable batch-norm running statistics."""

    params: dict[str, ad.Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> ad.Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def copy(self) -> "ParamStore":
        return ParamStore(
            {k: ad.Tensor(v.data.copy(), name=k) for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def n_params(self) -> int:
        return int(sum(v.data.size for v in self.params.values()))


def _layer_dims(spec: MlpSpec):
    dims = []
    d = spec.d_in
    for i, layer in enumerate(spec.hidden):
        dims.append((f"h{i}", d, layer.width))
        d = layer.width
    for name, width, _ in spec.heads:
        dims.append((name, d, width))
    return dims


def leaky_gain(slope: float) -> float:
    return float(np.sqrt(2.0 / (1.0 + slope * slope)))


def init_params(spec: MlpSpec, rng: Rng, scheme: str = "fan_in") -> ParamStore:
    """Initialize weights.

    ``fan_in``: N(0, 1/d_in) entries, for trainable networks.
    ``orthogonal``: Gaussian matrix whose ``d_in`` rows are orthonormalized,
    i.e. the ``(d_out, d_in)`` map has orthogonal columns and is injective.
    Rows are rescaled by ``c = sqrt(d_out / d_in) * gain`` so each unit keeps
    roughly unit variance (gain is the leaky-relu gain for hidden layers, 1
    for heads); hence ``W W^T = c^2 I``. Biases start at zero in both schemes.
    """
    store = ParamStore()
    g = rng.gen
    hidden_count = len(spec.hidden)
    for idx, (name, d_in, d_out) in enumerate(_layer_dims(spec)):
        if scheme == "fan_in":
            w = g.standard_normal((d_in, d_out)) / np.sqrt(d_in)
        elif scheme == "orthogonal":
            if d_out < d_in:
                raise ValueError(f"orthogonal scheme needs d_out >= d_in for injectivity ({name})")
            raw = g.standard_normal((d_out, d_in))
            q = orthonormalize_columns(raw)
            act = spec.hidden[idx].activation if idx < hidden_count else "none"
            gain = leaky_gain(spec.slope) if act == "leaky_relu" else 1.0
            w = q.T * (np.sqrt(d_out / d_in) * gain)
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
        store.params[f"{name}.w"] = ad.Tensor(w, name=f"{name}.w")
        has_bias = spec.hidden[idx].bias if idx < hidden_count else True
        if has_bias:
            store.params[f"{name}.b"] = ad.Tensor(np.zeros(d_out), name=f"{name}.b")
        if idx < hidden_count and spec.hidden[idx].batch_norm:
            store.params[f"{name}.bn.gamma"] = ad.Tensor(np.ones(d_out), name=f"{name}.bn.gamma")
            store.params[f"{name}.bn.beta"] = ad.Tensor(np.zeros(d_out), name=f"{name}.bn.beta")
            store.buffers[f"{name}.bn.mean"] = np.zeros(d_out)
            store.buffers[f"{name}.bn.var"] = np.ones(d_out)
    return store


def _activate(h: ad.Tensor, act: str, slope: float) -> ad.Tensor:
    if act == "relu":
        return ad.relu(h)
    if act == "leaky_relu":
        return ad.leaky_relu(h, slope)
    if act == "softplus":
        return ad.softplus(h)
    if act == "tanh":
        return ad.tanh(h)
    if act == "softmax":
        return ad.softmax_rows(h)
    return h


def mlp_forward(
    store: ParamStore,
    spec: MlpSpec,
    x,
    mode: str = "eval",
    rng: Rng | None = None,
    update_stats: bool = True,
    trunk: ad.Tensor | None = None,
) -> dict[str, ad.Tensor]:
    """Run the trunk and all heads. ``mode`` is ``train`` or ``eval``.

    In train mode batch norm uses batch statistics (and, when
    ``update_stats``, moves the running averages) and dropout is active.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    h = ad.tensor(x)
    if h.ndim != 2 or h.shape[1] != spec.d_in:
        raise ad.ShapeError(f"expected input of width {spec.d_in}, got shape {h.shape}")
    if spec.input_scale != 1.0:
        h = h * spec.input_scale
    p = store.params
    for i, layer in enumerate(spec.hidden):
        name = f"h{i}"
        h = ad.linear(h, p[f"{name}.w"], p.get(f"{name}.b"))
        if layer.batch_norm:
            gamma, beta = p[f"{name}.bn.gamma"], p[f"{name}.bn.beta"]
            if mode == "train":
                h, mu, var = ad.batch_norm_train(h, gamma, beta, spec.bn_eps)
                if update_stats:
                    n = h.shape[0]
                    m = spec.bn_momentum
                    store.buffers[f"{name}.bn.mean"] = (1 - m) * store.buffers[f"{name}.bn.mean"] + m * mu
                    unbiased = var * n / (n - 1)
                    store.buffers[f"{name}.bn.var"] = (1 - m) * store.buffers[f"{name}.bn.var"] + m * unbiased
            else:
                rm, rv = store.buffers[f"{name}.bn.mean"], store.buffers[f"{name}.bn.var"]
                inv = 1.0 / np.sqrt(rv + spec.bn_eps)
                h = (h - rm) * (gamma * inv) + beta
        h = _activate(h, layer.activation, spec.slope)
        if layer.dropout > 0.0 and mode == "train":
            if rng is None:
                raise ValueError("train-mode dropout needs an rng")
            keep = 1.0 - layer.dropout
            mask = (rng.gen.random(h.shape) < keep) / keep
            h = h * mask
    out = {}
    for name, width, act in spec.heads:
        z = ad.linear(h, p[f"{name}.w"], p.get(f"{name}.b"))
        out[name] = _activate(z, act, spec.slope)
    out["_trunk"] = h
    return out


@dataclass(frozen=True)
class Architectures:
    encoder_z: MlpSpec
    encoder_s: MlpSpec
    decoder: MlpSpec
    mixing: MlpSpec


def encoder_spec(d_in: int, latent: int, hidden: int = 128, dropout: float = 0.1) -> MlpSpec:
    return MlpSpec(
        d_in=d_in,
        hidden=(Layer(hidden, "relu", batch_norm=True, dropout=dropout),),
        heads=(("mu", latent, "none"), ("logvar", latent, "none")),
    )


def decoder_spec(d_latent: int, d_out: int, hidden: int = 128, dropout: float = 0.1) -> MlpSpec:
    return MlpSpec(
        d_in=d_latent,
        hidden=(
            Layer(hidden, "relu", batch_norm=True, dropout=dropout),
            Layer(hidden, "relu", batch_norm=True, dropout=dropout),
        ),
        heads=(("rate", d_out, "softplus"),),
    )


def mixing_spec(
    d_latent: int, d_out: int, width: int = 40, depth: int = 4, slope: float = 0.2,
    activation: str = "leaky_relu", input_scale: float = 1.0,
) -> MlpSpec:
    return MlpSpec(
        d_in=d_latent,
        hidden=tuple(Layer(width, activation, bias=False) for _ in range(depth)),
        heads=(("out", d_out, "softmax"),),
        slope=slope,
        input_scale=input_scale,
    )


def build_architectures(p_hat: int, q_hat: int, n_features: int, likelihood: str = "poisson",
                        p_true: int | None = None, q_true: int | None = None,
                        dropout: float = 0.1) -> Architectures:
    """Encoders: 1x128 BN/ReLU/dropout trunk with (mu, logvar) heads.
    Decoder: 2x128 trunk on ``[z, s]`` and a softplus rate head of width G.
    Mixing: 4x40 leaky-relu(0.2) with a row-softmax output.

    The NB dispersion is a separate per-feature parameter created by the model
    (see :mod:`compdgm.models`), not an MLP head.
    """
    if min(p_hat, n_features) <= 0 or q_hat < 0:
        raise ValueError("dimensions must be positive")
    del likelihood
    p_true = p_hat if p_true is None else p_true
    q_true = q_hat if q_true is None else q_true
    return Architectures(
        encoder_z=encoder_spec(n_features, p_hat, dropout=dropout),
        encoder_s=encoder_spec(n_features, q_hat, dropout=dropout),
        decoder=decoder_spec(p_hat + q_hat, n_features, dropout=dropout),
        mixing=mixing_spec(p_true + q_true, n_features),
    )
