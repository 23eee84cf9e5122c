import io
import json
import math

import numpy as np
import pytest
from scipy import stats

from pinfield.gaussian_oracle import green
from pinfield.gibbs import FieldConfig, sample_continuous
from pinfield.hswalk import (
    RateBoundError,
    RateField,
    WalkTrajectory,
    diffusion_step,
    dirty_stopping_times,
    hitting_bound,
    hitting_probability,
    occupation_profile,
    occupation_time,
    simulate_walk,
    survival_bound,
    walk_step,
)
from pinfield.lattice import Box, neighbors
from pinfield.potentials import PotentialFamily
from pinfield.seeding import make_rng

GAUSS = PotentialFamily.gaussian(1.0)
COS = PotentialFamily.cosine(0.5)


def test_constant_rates_give_simple_random_walk():
    rates = RateField.constant(1.0, 2.0)
    rng = make_rng(1)
    counts = {n: 0 for n in neighbors((0, 0))}
    stays = 0
    for _ in range(40_000):
        _, y = walk_step((0, 0), 0.0, rates, rng)
        if y == (0, 0):
            stays += 1
        else:
            counts[y] += 1
    obs = np.array(list(counts.values()))
    assert stats.chisquare(obs).pvalue > 1e-3
    # jump probability per event is a / c_V = 1/2
    assert abs(stays / 40_000 - 0.5) < 4 * math.sqrt(0.25 / 40_000)


def test_unit_bound_forces_unit_rates():
    rates = RateField.constant(1.0, 1.0)
    rng = make_rng(2)
    assert all(walk_step((0, 0), 0.0, rates, rng)[1] != (0, 0) for _ in range(1000))


def test_rates_at_upper_bound_hold_for_quarter_over_c():
    c = 2.0
    size = 2 * 8 + 3
    H = np.full((1, size, size), c)
    rates = RateField("synthetic", c, 8, horizontal=H, vertical=H.copy())
    rng = make_rng(3)
    gaps = []
    for _ in range(400):
        traj = simulate_walk((0, 0), rates, (), rng, horizon=10.0, alive=set(Box(7).sites))
        assert traj.stays == 0
        gaps.extend(np.diff(traj.times))
    gaps = np.array(gaps)
    assert gaps.mean() == pytest.approx(1 / (4 * c), rel=0.03)


def test_holding_times_exponential():
    rates = RateField.constant(1.0, 3.0)
    traj = simulate_walk((0, 0), rates, (), make_rng(4), horizon=3000.0)
    gaps = np.diff(traj.times)
    assert stats.kstest(gaps, "expon", args=(0, 1 / 4.0)).pvalue > 1e-3


def test_rate_outside_bounds_is_an_error():
    bad = RateField.constant(3.0, 2.0)
    with pytest.raises(RateBoundError):
        walk_step((0, 0), 0.0, bad, make_rng(0))
    with pytest.raises(RateBoundError):
        bad.check_bounds()


def test_synthetic_rates_within_bounds():
    rates = RateField.synthetic(2.0, 4, make_rng(5))
    rates.check_bounds()
    H, V, _ = rates._tables()
    assert H.min() >= 0.5 and H.max() <= 2.0


def test_frozen_sample_rates_within_bounds():
    box = Box(3)
    cfg = FieldConfig.zeros(box)
    cfg.heights[...] = make_rng(6).normal(scale=2.0, size=cfg.heights.shape)
    rates = RateField.frozen_sample(cfg, COS)
    rates.check_bounds()
    x, y = (0, 0), (1, 0)
    expected = COS.eval(cfg.height(x) - cfg.height(y))[2]
    assert rates.rate(x, y) == pytest.approx(float(expected))


def test_trajectory_invariants_and_dump():
    rates = RateField.synthetic(2.0, 6, make_rng(7))
    killed = {(3, 0), (-2, 2)}
    box = set(Box(5).sites)
    traj = simulate_walk((0, 0), rates, killed, make_rng(8), horizon=200.0, alive=box)
    traj.validate(killed | (set(Box(7).sites) - box))
    buf = io.StringIO()
    traj.to_jsonl(buf)
    lines = [json.loads(s) for s in buf.getvalue().splitlines()]
    assert [(d["x"], d["y"]) for d in lines] == traj.sites
    assert set(lines[0]) == {"time", "x", "y"}


def test_validate_rejects_broken_trajectories():
    with pytest.raises(ValueError):
        WalkTrajectory([0.0, 1.0], [(0, 0), (2, 0)], 1.0, False).validate()
    with pytest.raises(ValueError):
        WalkTrajectory([0.0, 0.0], [(0, 0), (1, 0)], 1.0, False).validate()
    with pytest.raises(ValueError):
        WalkTrajectory([0.0, 1.0], [(0, 0), (1, 0)], 1.0, True).validate({(5, 5)})


def test_hitting_bound_values():
    assert hitting_bound(1.0, 1) == 0.25
    assert hitting_bound(2.0, 3) == pytest.approx(13.0**-3)
    assert hitting_bound(2.0, 0) == 1.0


def test_hitting_trivial_and_simple_walk():
    rates = RateField.constant(1.0, 1.0, R=4)
    est = hitting_probability((0, 0), (0, 0), 2, rates, 100, make_rng(9))
    assert est.p == 1.0 and est.bound == 1.0
    est = hitting_probability((0, 0), (1, 0), 2, rates, 20_000, make_rng(10))
    assert est.p >= 0.25
    assert est.consistent


def test_hitting_requires_sites_in_box():
    with pytest.raises(ValueError):
        hitting_probability((0, 0), (3, 0), 2, RateField.constant(1.0, 1.0, R=4), 10, make_rng(0))


def test_survival_bound_decreasing():
    vals = [survival_bound(2.0, 1, n) for n in range(5)]
    assert vals[0] == 1.0
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_dirty_stopping_times_examples():
    traj = WalkTrajectory([0.0, 1.0, 2.0], [(0, 0), (1, 0), (0, 0)], 3.0, False)
    assert dirty_stopping_times(traj, (), 1) == []
    assert dirty_stopping_times(traj, {(5, 5)}, 1) == []
    # walk confined to one dirty block
    assert dirty_stopping_times(traj, {(0, 1)}, 1) == [(0.0, 3.0)]


def test_crossing_a_fully_dirty_box_enters_every_block():
    l, r = 1, 6
    s = 2 * l + 1
    sites = [(x, 0) for x in range(0, s * r + 1)]
    traj = WalkTrajectory([float(t) for t in range(len(sites))], sites, float(len(sites)), False)
    A = {(kx * s + 1, ky * s) for kx in range(-r, r + 1) for ky in range(-r, r + 1)}
    times = dirty_stopping_times(traj, A, l)
    assert len(times) == r + 1
    for eps in (0.1, 0.5, 0.99):
        assert len(times) >= eps * r
    assert all(T < S for T, S in times)


def test_diffusion_all_pinned_is_identity():
    box = Box(1)
    cfg = FieldConfig.zeros(box)
    cfg.pinned[...] = True
    out, acc = diffusion_step(cfg, 0.1, COS, make_rng(0))
    assert np.array_equal(out.heights, cfg.heights)


def test_heatbath_step_keeps_single_site_marginal():
    box = Box(0)
    rng = make_rng(11)
    vals = []
    for _ in range(20_000):
        cfg = FieldConfig.zeros(box)
        cfg.heights[0, 0] = sample_continuous([0, 0, 0, 0], GAUSS, rng)
        out, _ = diffusion_step(cfg, 0.1, GAUSS, rng, method="heatbath")
        vals.append(out.heights[0, 0])
    g = green(0)((0, 0), (0, 0))
    assert stats.kstest(vals, "norm", args=(0, math.sqrt(g))).pvalue > 1e-3


def test_mala_acceptance_tends_to_one():
    box = Box(2)
    rng = make_rng(12)
    cfg = FieldConfig.zeros(box)
    rates = {}
    for dt in (0.2, 1e-4):
        acc = 0
        for _ in range(2000):
            cfg, a = diffusion_step(cfg, dt, COS, rng)
            acc += a
        rates[dt] = acc / 2000
    assert rates[1e-4] > 0.995
    assert rates[1e-4] >= rates[0.2]


def test_mala_preserves_single_site_law():
    # one free site under the cosine family: compare with the exact conditional law
    box = Box(0)
    rng = make_rng(13)
    cfg = FieldConfig.zeros(box)
    xs = np.empty(60_000)
    for n in range(xs.size):
        for _ in range(5):
            cfg, _ = diffusion_step(cfg, 0.2, COS, rng)
        xs[n] = cfg.heights[0, 0]
    exact = sample_continuous([0, 0, 0, 0], COS, make_rng(14), size=200_000)
    assert stats.ks_2samp(xs[1000:], exact).pvalue > 1e-3


def test_occupation_single_site_quarter():
    est = occupation_time((0, 0), (0, 0), (), 0, GAUSS, replicas=100_000, seed=1)
    assert abs(est.mean - 0.25) < 3 * est.se
    assert est.censored_fraction == 0.0


def test_occupation_two_sites():
    box = Box(1)
    A = [s for s in box.sites if s not in {(0, 0), (1, 0)}]
    prof = occupation_profile((0, 0), [(0, 0), (1, 0)], A, 1, GAUSS, replicas=100_000, seed=2)
    assert abs(prof[(1, 0)].mean - 1 / 15) < 3 * prof[(1, 0)].se
    assert abs(prof[(0, 0)].mean - 4 / 15) < 3 * prof[(0, 0)].se


def test_occupation_censoring_flagged():
    est = occupation_time((0, 0), (0, 0), (), 3, GAUSS, replicas=300, seed=3, horizon=0.01)
    assert est.censored_fraction > 0.1
    assert est.flags


def test_occupation_rejects_dry_start():
    with pytest.raises(ValueError):
        occupation_time((0, 0), (1, 0), {(0, 0)}, 2, GAUSS, replicas=10)
