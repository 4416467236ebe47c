"""Monte Carlo and linear-algebra verifiers for the non-identifiability counterexamples.

Each check returns a ``CheckReport`` whose pass flag is a deterministic
function of its statistics. Every Monte Carlo tolerance is a 3-sigma bound
computed from the sample size, never a fixed constant. Each check also has a
perturbed negative control (``negative_control=True``) that must fail.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import RankDeficientError, Rng, orthonormalize_columns, special

Z_CRIT = 3.0


@dataclass
class CheckReport:
    name: str
    passed: bool
    statistics: dict[str, float]
    tolerances: dict[str, float]
    n_samples: int
    seed: int
    negative_control: bool = False
    notes: str = ""
    criteria: dict[str, bool] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _se_mean(samples: np.ndarray) -> np.ndarray:
    return samples.std(axis=0, ddof=1) / np.sqrt(samples.shape[0])


def _moment_battery(x: np.ndarray) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Sample means of x, of its centred cross products and of x**4, with their standard errors."""
    n, d = x.shape
    xc = x - x.mean(axis=0)
    iu = np.triu_indices(d)
    prods = xc[:, iu[0]] * xc[:, iu[1]]
    fourth = x**4
    return {
        "mean": (x.mean(axis=0), _se_mean(x)),
        "cov": (prods.mean(axis=0), _se_mean(prods)),
        "m4": (fourth.mean(axis=0), _se_mean(fourth)),
    }


def _max_z_vs_reference(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> tuple[float, float]:
    """Largest |deviation| / se for the mean and covariance of ``x`` against known values."""
    m = _moment_battery(x)
    d = x.shape[1]
    iu = np.triu_indices(d)
    z_mean = np.abs(m["mean"][0] - mean) / m["mean"][1]
    z_cov = np.abs(m["cov"][0] - cov[iu]) / m["cov"][1]
    return float(z_mean.max()), float(z_cov.max())


def _max_z_two_sample(a: np.ndarray, b: np.ndarray) -> dict[str, float]:
    ma, mb = _moment_battery(a), _moment_battery(b)
    out = {}
    for key in ma:
        diff = np.abs(ma[key][0] - mb[key][0])
        se = np.sqrt(ma[key][1] ** 2 + mb[key][1] ** 2)
        out[key] = float((diff / se).max())
    return out


def _finish(name, criteria, stats, tol, n, seed, negative, notes="") -> CheckReport:
    criteria = {k: bool(v) for k, v in criteria.items()}
    return CheckReport(name, all(criteria.values()), stats, tol, n, seed, negative, notes, criteria)


# ---------------------------------------------------------------- rotation


def rotation_map(u: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Rotate (z1, z2) by the angle s; ``scale`` != 1 stretches the first output (negative control)."""
    z1, z2, s = u[:, 0], u[:, 1], u[:, 2]
    c, sn = np.cos(s), np.sin(s)
    return np.stack([scale * (z1 * c - z2 * sn), z1 * sn + z2 * c, s], axis=1)


def check_rotation_counterexample(n_samples: int = 200_000, seed: int = 0,
                                  negative_control: bool = False) -> CheckReport:
    if n_samples < 100_000:
        raise ValueError("n_samples must be >= 1e5")
    rng = Rng(seed, "theory/rotation")
    scale = 1.3 if negative_control else 1.0
    u = rng.normal((n_samples, 3))
    out = rotation_map(u, scale)
    zm, zc = _max_z_vs_reference(out, np.zeros(3), np.eye(3))
    u0 = u.copy()
    u0[:, 2] = 0.0
    out0 = rotation_map(u0, scale)[:, :2]
    zm0, zc0 = _max_z_vs_reference(out0, np.zeros(2), np.eye(2))
    witness = float(np.corrcoef(out[:, 0], np.sin(u[:, 2]) * u[:, 1])[0, 1])
    stats = {"max_z_mean": zm, "max_z_cov": zc, "max_z_mean_s0": zm0, "max_z_cov_s0": zc0,
             "witness_corr": witness}
    tol = {"z_crit": Z_CRIT, "witness_min": 0.1}
    criteria = {
        "distribution_preserved": zm <= Z_CRIT and zc <= Z_CRIT,
        "background_preserved": zm0 <= Z_CRIT and zc0 <= Z_CRIT,
        "entangled": abs(witness) > 0.1,
    }
    return _finish("rotation", criteria, stats, tol, n_samples, seed, negative_control,
                   "negative control stretches the first output by 1.3" if negative_control else "")


# ---------------------------------------------------------------- linear misspecification


def _orthonormal_rows(rows: int, cols: int, rng: Rng) -> np.ndarray:
    """``rows x cols`` matrix with orthonormal rows (rows <= cols)."""
    return orthonormalize_columns(rng.normal((cols, rows))).T


def _injective(d: int, k: int, rng: Rng, tries: int = 10) -> np.ndarray:
    for _ in range(tries):
        a = rng.normal((d, k))
        try:
            orthonormalize_columns(a)
            return a
        except RankDeficientError:
            continue
    raise RankDeficientError(f"could not draw an injective {d}x{k} matrix in {tries} tries")


def check_linear_misspec(p: int = 5, q: int = 5, p_prime: int = 5, q_prime: int = 10, d: int = 150,
                         seed: int = 0, negative_control: bool = False, leakage: float = 0.1) -> CheckReport:
    """Overcomplete linear Gaussian model with ``p' >= p``, ``q' >= q`` latents stays block-disentangled."""
    if p_prime < p or q_prime < q or d < p_prime + q_prime:
        raise ValueError("need p' >= p, q' >= q and d >= p' + q'")
    rng = Rng(seed, "theory/linear")
    u, v = _injective(d, p, rng), _injective(d, q, rng)
    o1, o2 = _orthonormal_rows(p, p_prime, rng), _orthonormal_rows(q, q_prime, rng)
    u_t, v_t = u @ o1, v @ o2
    if negative_control:
        v_t = v_t.copy()
        v_t[:, 0] += leakage * u[:, 0]
    cov_err = max(np.abs(u @ u.T - u_t @ u_t.T).max(), np.abs(v @ v.T - v_t @ v_t.T).max())
    mix = np.linalg.lstsq(np.hstack([u, v]), np.hstack([u_t, v_t]), rcond=None)[0]
    cross = max(np.abs(mix[:p, p_prime:]).max(), np.abs(mix[p:, :p_prime]).max())
    block = max(np.abs(mix[:p, :p_prime] - o1).max(), np.abs(mix[p:, p_prime:] - o2).max())
    stats = {"covariance_error": float(cov_err), "cross_block_max": float(cross), "block_error": float(block)}
    tol = {"covariance": 1e-10, "cross_block": 1e-8, "block": 1e-8}
    criteria = {
        "equal_covariance": cov_err <= 1e-10,
        "block_diagonal": cross <= 1e-8,
        "blocks_match": block <= 1e-8,
    }
    return _finish("linear", criteria, stats, tol, 0, seed, negative_control,
                   f"negative control adds {leakage} x U[:, 0] to the salient loadings" if negative_control else "")


# ---------------------------------------------------------------- nonlinear misspecification


def switch_map(z: np.ndarray, s: np.ndarray, v: np.ndarray, branch_scale: float = 1.0) -> np.ndarray:
    """``(z 1[s >= 0] + v 1[s < 0], s)``; ``branch_scale`` rescales the v branch (negative control)."""
    first = np.where(s >= 0, z, branch_scale * v)
    return np.stack([first, s], axis=1)


def check_nonlinear_misspec(n_samples: int = 200_000, seed: int = 0,
                            negative_control: bool = False) -> CheckReport:
    if n_samples < 100_000:
        raise ValueError("n_samples must be >= 1e5")
    rng = Rng(seed, "theory/nonlinear")
    z, s, v = rng.normal((3, n_samples))
    scale = 1.5 if negative_control else 1.0
    out = switch_map(z, s, v, scale)
    ref = np.stack([z, s], axis=1)
    two = _max_z_two_sample(out, ref)
    zero = switch_map(z, np.zeros_like(z), np.zeros_like(z), scale)
    background_err = float(np.abs(zero - np.stack([z, np.zeros_like(z)], axis=1)).max())
    wit_samples = (s < 0) * (out[:, 0] - z) ** 2
    witness = float(wit_samples.mean())
    stats = {"max_z_mean": two["mean"], "max_z_cov": two["cov"], "max_z_m4": two["m4"],
             "background_error": background_err, "witness": witness,
             "witness_se": float(wit_samples.std(ddof=1) / np.sqrt(n_samples))}
    tol = {"z_crit": Z_CRIT, "background": 0.0, "witness_min": 0.5}
    criteria = {
        "same_distribution": max(two.values()) <= Z_CRIT,
        "background_identity": background_err == 0.0,
        "entangled": witness > 0.5,
    }
    return _finish("nonlinear", criteria, stats, tol, n_samples, seed, negative_control,
                   "negative control scales the v branch by 1.5" if negative_control else "")


# ---------------------------------------------------------------- Bernoulli


def beta_normal_rates(z: np.ndarray, a: float, b: float) -> np.ndarray:
    """``F_Beta(Phi(z); a, b)``: normal CDF first, so the Beta CDF sees values in [0, 1]."""
    return special("betainc", special("norm_cdf", z), a, b)


def check_bernoulli_counterexample(n_samples: int = 1_000_000, lam_a: float = 1.0, lam_b: float = 5.0,
                                   seed: int = 0, negative_control: bool = False) -> CheckReport:
    """Two symmetric-Beta rate maps give identical Bernoulli observations but different rate variances."""
    if lam_a == lam_b or lam_a <= 0 or lam_b <= 0:
        raise ValueError("need distinct positive lambdas")
    if n_samples < 1_000_000:
        raise ValueError("n_samples must be >= 1e6")
    rng = Rng(seed, "theory/bernoulli")
    z = rng.normal((n_samples, 2))
    y = beta_normal_rates(z, lam_a, lam_a)
    # the control breaks the symmetry of the second map, shifting its mean rate
    y_t = beta_normal_rates(z, lam_b, 2.0 * lam_b if negative_control else lam_b)
    x = (rng.uniform(0.0, 1.0, y.shape) < y).astype(int)
    x_t = (rng.uniform(0.0, 1.0, y_t.shape) < y_t).astype(int)
    cells_a = np.bincount(2 * x[:, 0] + x[:, 1], minlength=4) / n_samples
    cells_b = np.bincount(2 * x_t[:, 0] + x_t[:, 1], minlength=4) / n_samples
    se = np.sqrt((cells_a * (1 - cells_a) + cells_b * (1 - cells_b)) / n_samples)
    pmf_z = float((np.abs(cells_a - cells_b) / se).max())
    var_a, var_b = float(y[:, 0].var(ddof=1)), float(y_t[:, 0].var(ddof=1))

    def var_se(col):
        c = col - col.mean()
        return float(np.sqrt(((c**2 - (c**2).mean()) ** 2).mean() / n_samples))

    var_diff_se = float(np.hypot(var_se(y[:, 0]), var_se(y_t[:, 0])))
    stats = {"pmf_max_z": pmf_z, "var_y_a": var_a, "var_y_b": var_b, "var_diff_se": var_diff_se,
             "var_diff_z": abs(var_a - var_b) / var_diff_se}
    tol = {"z_crit": Z_CRIT, "var_gap_z": 5.0}
    criteria = {
        "same_observations": pmf_z <= Z_CRIT,
        "different_rates": abs(var_a - var_b) > 5.0 * var_diff_se,
    }
    notes = "rates = F_Beta(Phi(z); lambda, lambda)"
    if negative_control:
        notes += "; negative control uses Beta(lambda_b, 2 lambda_b) for the second map"
    return _finish("bernoulli", criteria, stats, tol, n_samples, seed, negative_control, notes)


CHECKS = {
    "rotation": check_rotation_counterexample,
    "linear": check_linear_misspec,
    "nonlinear": check_nonlinear_misspec,
    "bernoulli": check_bernoulli_counterexample,
}


def run_checks(which: str = "all", seed: int = 0, negative_control: bool = False) -> list[CheckReport]:
    names = list(CHECKS) if which == "all" else [which]
    for n in names:
        if n not in CHECKS:
            raise ValueError(f"unknown check {n!r}; choose from all, {', '.join(CHECKS)}")
    return [CHECKS[n](seed=seed, negative_control=negative_control) for n in names]
