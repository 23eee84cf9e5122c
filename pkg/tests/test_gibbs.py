import math

import numpy as np
import pytest
from scipy import integrate, stats

from pinfield.estimators import batch_means
from pinfield.gaussian_oracle import enumerate_rho, green
from pinfield.gibbs import (
    Chain,
    FieldConfig,
    SamplerParams,
    continuous_weight,
    pin_probability,
    run_chain,
    sample_continuous,
    sweep,
)
from pinfield.lattice import Box
from pinfield.potentials import PotentialFamily
from pinfield.seeding import make_rng

GAUSS = PotentialFamily.gaussian(1.0)
COS = PotentialFamily.cosine(0.5)
LOGCOSH = PotentialFamily.logcosh(0.5)


def test_pin_probability_flat_gaussian():
    # w(0) = 1 and W = sqrt(pi/2)
    p = pin_probability([0, 0, 0, 0], 0.0, GAUSS)
    assert p == pytest.approx(1 / (1 + math.sqrt(math.pi / 2)), rel=1e-10)
    assert p == pytest.approx(0.4438, abs=1e-4)


def test_pin_probability_limits():
    assert pin_probability([0, 0, 0, 0], -math.inf, GAUSS) == 0.0
    assert pin_probability([0, 0, 0, 0], -60.0, COS) < 1e-25
    assert pin_probability([10, 10, 10, 10], 0.0, GAUSS) < 1e-80
    for fam in (GAUSS, COS, LOGCOSH):
        p = pin_probability([0.3, -1.0, 2.0, 0.5], 0.7, fam)
        assert 0 < p < 1


@pytest.mark.parametrize("fam", [COS, LOGCOSH], ids=["cosine", "logcosh"])
def test_continuous_mass_matches_scipy_quad(fam):
    nb = np.array([0.4, -1.2, 2.5, 0.0])
    info = continuous_weight(nb, fam)
    u = lambda t: sum(fam.eval(t - h)[0] for h in nb)  # noqa: E731
    W, _ = integrate.quad(lambda t: math.exp(-u(t)), -math.inf, math.inf, epsabs=0, epsrel=1e-12)
    assert info["log_W"] == pytest.approx(math.log(W), abs=1e-9)


def test_sample_continuous_gaussian_conditionals():
    rng = make_rng(1, 0, "test")
    x = sample_continuous([0, 0, 0, 0], GAUSS, rng, size=200_000)
    assert abs(x.mean()) < 4 * 0.5 / math.sqrt(x.size)
    assert stats.kstest(x, "norm", args=(0, 0.5)).pvalue > 1e-3
    y = sample_continuous([1, 1, 1, 1], GAUSS, rng, size=200_000)
    assert stats.kstest(y, "norm", args=(1, 0.5)).pvalue > 1e-3


def test_sample_continuous_cosine_moments_match_quadrature():
    nb = np.array([0.5, -0.5, 1.5, 0.2])
    u = lambda t: sum(COS.eval(t - h)[0] for h in nb)  # noqa: E731
    Z = integrate.quad(lambda t: math.exp(-u(t)), -20, 20, epsrel=1e-12)[0]
    m1 = integrate.quad(lambda t: t * math.exp(-u(t)), -20, 20, epsrel=1e-12)[0] / Z
    m2 = integrate.quad(lambda t: t * t * math.exp(-u(t)), -20, 20, epsrel=1e-12)[0] / Z
    var = m2 - m1 * m1
    x = sample_continuous(nb, COS, make_rng(2, 0, "test"), size=1_000_000)
    n = x.size
    assert abs(x.mean() - m1) < 4 * math.sqrt(var / n)
    m4 = integrate.quad(lambda t: (t - m1) ** 4 * math.exp(-u(t)), -20, 20)[0] / Z
    assert abs(x.var() - var) < 4 * math.sqrt((m4 - var * var) / n)


def test_large_J_pins_almost_everything():
    box = Box(3)
    cfg = FieldConfig.zeros(box)
    cfg.heights[...] = make_rng(0).normal(size=cfg.heights.shape)
    rng = make_rng(3)
    for _ in range(10):
        cfg = sweep(cfg, 50.0, GAUSS, rng)
    assert cfg.pinned.mean() > 0.99
    cfg.validate()


def test_sweep_deterministic():
    box = Box(2)
    a = sweep(FieldConfig.zeros(box), 0.0, COS, make_rng(9))
    b = sweep(FieldConfig.zeros(box), 0.0, COS, make_rng(9))
    assert np.array_equal(a.heights, b.heights) and np.array_equal(a.pinned, b.pinned)


def test_pinned_sites_have_zero_height():
    chain = Chain(Box(3), 0.0, COS, make_rng(4))
    for chunk in chain.snapshots(200, 0, 1):
        assert np.all(chunk.heights[chunk.pinned] == 0.0)


def test_frozen_sites_stay_at_zero():
    frozen = {(0, 0), (1, 1)}
    chain = Chain(Box(2), None, GAUSS, make_rng(5), frozen=frozen)
    for chunk in chain.snapshots(50):
        assert np.all(chunk.heights[:, 2, 2] == 0.0)
        assert np.all(chunk.heights[:, 3, 3] == 0.0)


def test_first_snapshot_index_and_count():
    params = SamplerParams(0.0, sweeps=100, burn_in=10, thin=3, seed=1)
    idx = np.concatenate([c.sweep_index for c in run_chain(params, 1, GAUSS)])
    assert idx[0] == 11
    assert len(idx) == params.n_snapshots
    assert np.all(np.diff(idx) == 3)


def test_replicas_differ_and_reproduce():
    params = SamplerParams(0.0, sweeps=20, seed=3, replicas=2)
    a0 = np.concatenate([c.heights for c in run_chain(params, 1, GAUSS, 0)])
    a1 = np.concatenate([c.heights for c in run_chain(params, 1, GAUSS, 1)])
    b0 = np.concatenate([c.heights for c in run_chain(params, 1, GAUSS, 0)])
    assert not np.array_equal(a0, a1)
    assert np.array_equal(a0, b0)


def test_chunking_does_not_change_stream():
    params = SamplerParams(0.0, sweeps=60, burn_in=5, thin=2, seed=8)
    a = np.concatenate([c.heights for c in run_chain(params, 2, COS, chunk_size=4)])
    b = np.concatenate([c.heights for c in run_chain(params, 2, COS, chunk_size=1000)])
    assert np.array_equal(a, b)


def test_params_validation():
    with pytest.raises(ValueError):
        SamplerParams(0.0, sweeps=10, burn_in=10)
    with pytest.raises(ValueError):
        SamplerParams(0.0, sweeps=10, thin=0)
    with pytest.raises(ValueError):
        SamplerParams(0.0, sweeps=10, replicas=0)


def test_uncertified_family_refused():
    with pytest.raises(ValueError):
        Chain(Box(1), 0.0, PotentialFamily.cosine(1.2, c_V=4.0), make_rng(0))


def test_single_site_stationary_mixture():
    # one free site: atom with mass p at 0, continuous part N(0, 1/4)
    p = pin_probability([0, 0, 0, 0], 0.3, GAUSS)
    params = SamplerParams(0.3, sweeps=200_000, seed=11)
    chunks = list(run_chain(params, 0, GAUSS))
    pinned = np.concatenate([c.pinned[:, 0, 0] for c in chunks])
    h = np.concatenate([c.heights[:, 0, 0] for c in chunks])
    est, se = batch_means(pinned.astype(float))
    assert abs(est - p) < 4 * se
    assert stats.kstest(h[~pinned], "norm", args=(0, 0.5)).pvalue > 1e-3


@pytest.mark.slow
def test_dry_size_matches_enumeration_on_3x3():
    table = enumerate_rho(1, 0.0, 1.0)
    params = SamplerParams(0.0, sweeps=200_000, burn_in=1000, seed=21)
    sizes = np.concatenate([c.pinned.sum(axis=(1, 2)) for c in run_chain(params, 1, GAUSS)])
    est, se = batch_means(sizes.astype(float))
    assert abs(est - table.expected_size()) < 3 * se


def test_unpinned_variance_matches_green_on_box4():
    params = SamplerParams(None, sweeps=100_000, burn_in=500, seed=31)
    x = np.concatenate([c.heights[:, 4, 4] for c in run_chain(params, 4, GAUSS)])
    est, se = batch_means(x * x - x.mean() ** 2)
    assert abs(est - green(4)((0, 0), (0, 0))) < 3 * se


def test_symmetric_means():
    params = SamplerParams(0.0, sweeps=40_000, burn_in=200, seed=41)
    h = np.concatenate([c.heights for c in run_chain(params, 1, COS)])
    for x in range(3):
        for y in range(3):
            est, se = batch_means(h[:, x, y])
            assert abs(est) < 4 * se


def test_compiled_pin_odds_match_adaptive_quadrature():
    from pinfield.gibbs import _log_pin_odds

    rng = np.random.default_rng(12)
    for fam in (COS, PotentialFamily.logcosh(0.5), PotentialFamily.cosine(-0.7)):
        for _ in range(100):
            nb = rng.normal(scale=2.0, size=4)
            J = rng.uniform(-3, 3)
            lo = _log_pin_odds(fam.code, fam.param, fam.c_V, nb, J)
            assert 1 / (1 + math.exp(-lo)) == pytest.approx(pin_probability(nb, J, fam), abs=1e-10)
