import dataclasses

import numpy as np
import pytest

from compdgm.simgen import (
    SimConfig,
    generate_contrastive,
    generate_grouped_salient,
    generate_multigroup,
    mixing_rates,
    multigroup_latents,
)

SMALL = SimConfig(n_background=400, n_target=300, seed=11)


@pytest.fixture(scope="module")
def default_ds():
    return generate_contrastive(SimConfig())


def test_default_shapes(default_ds):
    ds = default_ds
    assert ds.x_background.shape == (1500, 150)
    assert ds.x_target.shape == (1500, 150)
    assert ds.z_true.shape == (3000, 5)
    assert ds.s_true.shape == (1500, 5)


def test_row_totals_match_library_size(default_ds):
    # Poisson row totals have mean L and variance L per row
    totals = np.vstack([default_ds.x_background, default_ds.x_target]).sum(axis=1)
    n, lib = totals.size, 1500.0
    assert abs(totals.mean() - lib) <= 3 * np.sqrt(lib / n)


def test_counts_are_non_negative_integers(default_ds):
    x = default_ds.x_target
    assert x.min() >= 0 and np.all(x == np.floor(x))


def test_determinism():
    a, b = generate_contrastive(SMALL), generate_contrastive(SMALL)
    np.testing.assert_array_equal(a.x_target, b.x_target)
    np.testing.assert_array_equal(a.z_true, b.z_true)


def test_noise_kind_changes_only_observations():
    pois = generate_contrastive(SMALL)
    nb = generate_contrastive(dataclasses.replace(SMALL, noise="nb"))
    np.testing.assert_array_equal(pois.z_true, nb.z_true)
    np.testing.assert_array_equal(pois.s_true, nb.s_true)
    assert not np.array_equal(pois.x_target, nb.x_target)
    assert nb.theta_true.shape == (150,) and np.all((nb.theta_true > 1) & (nb.theta_true < 5))


def test_background_rates_equal_target_rates_at_zero_salient():
    ds = generate_contrastive(SMALL)
    z = ds.z_true[:10]
    zeros = np.zeros((10, SMALL.q))
    r_b = mixing_rates(ds.mixing_spec, ds.mixing, np.hstack([z, zeros]), SMALL.library_size)
    r_t = mixing_rates(ds.mixing_spec, ds.mixing, np.hstack([z, zeros + 0.0]), SMALL.library_size)
    assert np.abs(r_b - r_t).max() <= 1e-12
    np.testing.assert_allclose(r_b.sum(axis=1), SMALL.library_size, rtol=1e-12)


def test_mixing_injective_on_samples():
    ds = generate_contrastive(SMALL)
    u = np.random.default_rng(0).normal(size=(10_000, 10))
    r = mixing_rates(ds.mixing_spec, ds.mixing, u, 1.0)
    assert np.unique(r, axis=0).shape[0] == r.shape[0]
    sq = (r[:2000] ** 2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2 * r[:2000] @ r[:2000].T
    np.fill_diagonal(d2, np.inf)
    assert d2.min() > 0


def test_mixing_is_bias_free_orthogonal_leaky_relu():
    ds = generate_contrastive(SMALL)
    assert [l.activation for l in ds.mixing_spec.hidden] == ["leaky_relu"] * 4
    assert all(not l.bias for l in ds.mixing_spec.hidden)
    assert ds.mixing_spec.slope == 0.2


def test_grouped_salient_labels_and_means():
    cfg = dataclasses.replace(SMALL, n_target=3000, group_count=3)
    ds = generate_grouped_salient(cfg)
    assert ds.labels.shape == (3000,)
    assert set(np.unique(ds.labels)) == {0, 1, 2}
    means = np.array([ds.s_true[ds.labels == g].mean(axis=0) for g in range(3)])
    counts = np.bincount(ds.labels)
    # group means lie within 3 sigma of the drawn centres; centres are far apart at scale 2
    spread = np.linalg.norm(means[:, None] - means[None], axis=2)
    assert spread[np.triu_indices(3, 1)].min() > 6 * np.sqrt(1 / counts.min())


def test_grouped_salient_needs_two_groups():
    with pytest.raises(ValueError):
        generate_grouped_salient(dataclasses.replace(SMALL, group_count=1))


def test_single_group_is_a_mean_shift():
    ds = generate_contrastive(dataclasses.replace(SMALL, group_count=1))
    base = generate_contrastive(SMALL)
    shift = ds.s_true - base.s_true
    assert np.abs(shift - shift[0]).max() <= 1e-12


def test_multigroup_shapes_and_blocks():
    cfg = dataclasses.replace(SMALL, n_background=200, n_target=250)
    mg = generate_multigroup(cfg)
    assert mg.x1.shape == (200, 150) and mg.x2.shape == (250, 150)
    lat = multigroup_latents(mg.z1, mg.t1, 1)
    assert np.all(lat[:, cfg.p + cfg.q:] == 0)


def test_multigroup_reduces_to_contrastive_background_when_t1_ignored():
    cfg = dataclasses.replace(SMALL, n_background=50, n_target=50)
    mg = generate_multigroup(cfg)
    spec = mg.mixing_spec
    store = mg.mixing.copy()
    # zero the first-layer rows reading t1: the mixing becomes constant in t1
    w = store.params["h0.w"].data
    w[cfg.p:cfg.p + cfg.q] = 0.0
    with_t = mixing_rates(spec, store, multigroup_latents(mg.z1, mg.t1, 1), 1.0)
    without = mixing_rates(spec, store, multigroup_latents(mg.z1, np.zeros_like(mg.t1), 1), 1.0)
    assert np.abs(with_t - without).max() <= 1e-12


def test_config_round_trip_and_validation():
    cfg = SimConfig(noise="nb", seed=4)
    assert SimConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        SimConfig.from_dict({"unknown": 1})
    with pytest.raises(ValueError):
        SimConfig(library_size=0)
    with pytest.raises(ValueError):
        SimConfig(theta_range=(3.0, 2.0))
