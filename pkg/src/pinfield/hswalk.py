"""Random walk in the dynamic environment generated by the gradient field.

A walk ``X`` on the free sites jumps across the edge ``{x, y}`` at rate
``V''(phi_x(t) - phi_y(t))`` while the field ``phi`` follows the Langevin
diffusion that leaves ``P_A`` invariant; the walk dies on entering the dry
set or leaving the region.  The expected time the walk spends at ``j`` equals
the covariance ``<phi_i ; phi_j>_A``.

Jumps are simulated by uniformization: candidate events arrive at rate
``4 c_V`` and an event at ``x`` moves along edge ``e`` with probability
``a(e; t) / (4 c_V)``, otherwise the walk stays put.  The field is advanced
by MALA steps of size ``dt``; rates are held constant between field updates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable

import numba
import numpy as np

from .gibbs import Chain, FieldConfig
from .lattice import OFFSETS, Box, Site, block_index
from .potentials import PotentialFamily, require_certified, v_prime, v_second, v_value
from .seeding import make_rng
from .estimators import BatchAccumulator, N_BATCHES

CONSTANT, TABLE, FIELD = 0, 1, 2


class RateBoundError(ValueError):
    pass


# ---------------------------------------------------------------------------
# rate fields


@dataclass
class RateField:
    """Jump rates ``a(x, y; t)`` on a square patch ``[-R, R]^2`` (plus one layer).

    ``source`` is ``"constant"`` (all rates ``value``), ``"synthetic"``
    (per-edge random rates, redrawn every ``period`` time units and cycling
    through ``horizontal.shape[0]`` epochs) or ``"frozen-sample"`` (rates
    ``V''`` of a fixed field).  Live-diffusion rates are produced inside
    :func:`occupation_time`.
    """

    source: str
    c_V: float
    R: int
    value: float = 1.0
    period: float = 1.0
    horizontal: np.ndarray | None = None  # [epoch, X, Y]: edge (x,y)-(x+1,y)
    vertical: np.ndarray | None = None  # [epoch, X, Y]: edge (x,y)-(x,y+1)

    @classmethod
    def constant(cls, value: float, c_V: float, R: int = 64) -> "RateField":
        return cls("constant", c_V, R, value=value)

    @classmethod
    def synthetic(cls, c_V: float, R: int, rng: np.random.Generator, epochs: int = 8, period: float = 1.0) -> "RateField":
        """Log-uniform rates in ``[1/c_V, c_V]``, independent per edge and epoch."""
        size = 2 * R + 3
        lo, hi = -math.log(c_V), math.log(c_V)
        hz = np.exp(rng.uniform(lo, hi, size=(epochs, size, size)))
        vt = np.exp(rng.uniform(lo, hi, size=(epochs, size, size)))
        return cls("synthetic", c_V, R, period=period, horizontal=hz, vertical=vt)

    @classmethod
    def frozen_sample(cls, config: FieldConfig, family: PotentialFamily) -> "RateField":
        """Rates ``V''(phi_x - phi_y)`` of a fixed field (zero outside the box)."""
        N = config.box.N
        h = np.zeros((2 * N + 3, 2 * N + 3))
        h[1:-1, 1:-1] = config.heights
        _, _, hz = family.eval(h[:-1, :] - h[1:, :])
        _, _, vt = family.eval(h[:, :-1] - h[:, 1:])
        H = np.full((1, 2 * N + 3, 2 * N + 3), family.c_V)
        V = np.full((1, 2 * N + 3, 2 * N + 3), family.c_V)
        H[0, :-1, :] = hz
        V[0, :, :-1] = vt
        return cls("frozen-sample", family.c_V, N, horizontal=H, vertical=V)

    def _tables(self):
        if self.horizontal is None:
            size = 2 * self.R + 3
            one = np.full((1, size, size), self.value)
            return one, one, math.inf
        return self.horizontal, self.vertical, self.period

    def rate(self, x: Site, y: Site, t: float = 0.0) -> float:
        dx, dy = y[0] - x[0], y[1] - x[1]
        if abs(dx) + abs(dy) != 1:
            return 0.0
        if self.source == "constant":
            return self.value
        H, V, period = self._tables()
        e = int(t // period) % H.shape[0]
        ax, ay = min(x[0], y[0]) + self.R + 1, min(x[1], y[1]) + self.R + 1
        if not (0 <= ax < H.shape[1] - 1 and 0 <= ay < H.shape[2] - 1):
            raise ValueError(f"edge {x}-{y} lies outside the rate patch of radius {self.R}")
        return float(H[e, ax, ay] if dy == 0 else V[e, ax, ay])

    def check_bounds(self) -> None:
        H, V, _ = self._tables()
        lo, hi = 1.0 / self.c_V, self.c_V
        for arr in (H, V):
            if arr.min() < lo * (1 - 1e-12) or arr.max() > hi * (1 + 1e-12):
                raise RateBoundError(f"rates outside [{lo:g}, {hi:g}]")


def hitting_bound(c_V: float, steps: int) -> float:
    """Probability of following a prescribed nearest-neighbour path of ``steps`` steps
    when its rates sit at ``1/c_V`` and the three competing rates at ``c_V``."""
    return (1.0 / (3.0 * c_V * c_V + 1.0)) ** steps


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class WalkTrajectory:
    times: list[float]
    sites: list[Site]
    death_time: float
    killed: bool
    stays: int = 0

    def validate(self, killed_set: Iterable[Site] = ()) -> None:
        for a, b in zip(self.sites, self.sites[1:]):
            if abs(a[0] - b[0]) + abs(a[1] - b[1]) != 1:
                raise ValueError("non-adjacent consecutive sites")
        if any(t1 <= t0 for t0, t1 in zip(self.times, self.times[1:])):
            raise ValueError("jump times must increase strictly")
        if self.killed and killed_set and self.sites[-1] not in set(killed_set):
            raise ValueError("killed walk must end in the killing set")

    def to_jsonl(self, fh) -> None:
        for t, (x, y) in zip(self.times, self.sites):
            fh.write(json.dumps({"time": t, "x": x, "y": y}) + "\n")


def walk_step(X: Site, t: float, rates: RateField, rng: np.random.Generator) -> tuple[float, Site]:
    """Advance to the next uniformization event; the site may be unchanged."""
    lam = 4.0 * rates.c_V
    t_next = t + rng.exponential(1.0 / lam)
    for dx, dy in OFFSETS:
        a = rates.rate(X, (X[0] + dx, X[1] + dy), t_next)
        if not (1.0 / rates.c_V) * (1 - 1e-12) <= a <= rates.c_V * (1 + 1e-12):
            raise RateBoundError(f"rate {a} on edge {X}-{(X[0] + dx, X[1] + dy)} outside [1/c_V, c_V]")
    w = 4.0 * rng.random()
    d = min(int(w), 3)
    dx, dy = OFFSETS[d]
    Y = (X[0] + dx, X[1] + dy)
    if (w - d) * rates.c_V < rates.rate(X, Y, t_next):
        return t_next, Y
    return t_next, X


def simulate_walk(start: Site, rates: RateField, killed: Iterable[Site], rng: np.random.Generator, horizon: float = 1e4, alive=None) -> WalkTrajectory:
    """Walk until it enters ``killed`` (or leaves ``alive`` when given) or reaches ``horizon``."""
    killed = set(map(tuple, killed))
    t, X = 0.0, tuple(start)
    times, sites = [0.0], [X]
    stays = 0
    while True:
        t_next, Y = walk_step(X, t, rates, rng)
        if t_next >= horizon:
            return WalkTrajectory(times, sites, horizon, False, stays)
        t = t_next
        if Y == X:
            stays += 1
            continue
        X = Y
        times.append(t)
        sites.append(X)
        if X in killed or (alive is not None and X not in alive):
            return WalkTrajectory(times, sites, t, True, stays)


def dirty_stopping_times(traj: WalkTrajectory, A: Iterable[Site], l: int) -> list[tuple[float, float]]:
    """The alternating times (T_n, S_n): entry into a dirty l-block and exit from it.

    ``S_n`` is the death (or censoring) time when the walk never leaves the
    block entered at ``T_n``.
    """
    dirty = {block_index(a, l) for a in A}
    if not dirty:
        return []
    blocks = [block_index(s, l) for s in traj.sites]
    out = []
    k, n = 0, len(blocks)
    while k < n:
        while k < n and blocks[k] not in dirty:
            k += 1
        if k == n:
            break
        T, b = traj.times[k], blocks[k]
        k += 1
        while k < n and blocks[k] == b:
            k += 1
        S = traj.times[k] if k < n else traj.death_time
        out.append((T, S))
    return out


# ---------------------------------------------------------------------------
# compiled walk kernels


@numba.njit(cache=True, nogil=True)
def _edge_rate(mode, x, y, d, t, value, H, V, period, h, code, p):
    """Rate of the edge leaving padded cell (x, y) in direction d (E, W, N, S)."""
    if mode == CONSTANT:
        return value
    if mode == FIELD:
        if d == 0:
            return v_second(code, p, h[x, y] - h[x + 1, y])
        if d == 1:
            return v_second(code, p, h[x, y] - h[x - 1, y])
        if d == 2:
            return v_second(code, p, h[x, y] - h[x, y + 1])
        return v_second(code, p, h[x, y] - h[x, y - 1])
    e = int(t // period) % H.shape[0]
    if d == 0:
        return H[e, x, y]
    if d == 1:
        return H[e, x - 1, y]
    if d == 2:
        return V[e, x, y]
    return V[e, x, y - 1]


@numba.njit(cache=True, nogil=True)
def _jump(mode, x, y, t, c_V, value, H, V, period, h, code, p, u):
    """Resolve one uniformization event; returns direction index or -1 (stay).

    The uniform picks a direction (integer part of 4u) and then accepts the
    jump when the fractional part falls below ``a / c_V``.  Each edge thus
    fires with probability ``a / (4 c_V)``, and a decision depends on one
    rate only, which keeps runs on common random numbers in step.
    """
    w = 4.0 * u
    d = min(int(w), 3)
    a = _edge_rate(mode, x, y, d, t, value, H, V, period, h, code, p)
    if a < (1.0 / c_V) * (1.0 - 1e-12) or a > c_V * (1.0 + 1e-12):
        raise ValueError("jump rate outside [1/c_V, c_V]")
    if (w - d) * c_V < a:
        return d
    return -1


@numba.njit(cache=True, nogil=True)
def _move(x, y, d):
    if d == 0:
        return x + 1, y
    if d == 1:
        return x - 1, y
    if d == 2:
        return x, y + 1
    return x, y - 1


@numba.njit(cache=True, nogil=True)
def _hit_batch(sx, sy, kx, ky, lo, hi, c_V, value, H, V, period, mode, rng, replicas, horizon):
    """Fraction of walks from (sx, sy) reaching (kx, ky) before leaving [lo, hi]^2."""
    h = np.zeros((1, 1))
    hits = np.zeros(replicas, dtype=np.uint8)
    lam = 4.0 * c_V
    for r in range(replicas):
        x, y = sx, sy
        t = 0.0
        if x == kx and y == ky:
            hits[r] = 1
            continue
        while True:
            t += rng.exponential(1.0 / lam)
            if t >= horizon:
                break
            d = _jump(mode, x, y, t, c_V, value, H, V, period, h, 0, 0.0, rng.random())
            if d < 0:
                continue
            x, y = _move(x, y, d)
            if x == kx and y == ky:
                hits[r] = 1
                break
            if x < lo or x > hi or y < lo or y > hi:
                break
    return hits


@numba.njit(cache=True, nogil=True)
def _hamiltonian(h, code, p):
    s = 0.0
    nx, ny = h.shape
    for x in range(nx):
        for y in range(ny):
            if x + 1 < nx:
                s += v_value(code, p, h[x, y] - h[x + 1, y])
            if y + 1 < ny:
                s += v_value(code, p, h[x, y] - h[x, y + 1])
    return s


@numba.njit(cache=True, nogil=True)
def _gradient(h, free, code, p, out):
    nx, ny = h.shape
    for x in range(nx):
        for y in range(ny):
            if free[x, y]:
                c = h[x, y]
                out[x, y] = (v_prime(code, p, c - h[x + 1, y]) + v_prime(code, p, c - h[x - 1, y])
                             + v_prime(code, p, c - h[x, y + 1]) + v_prime(code, p, c - h[x, y - 1]))
            else:
                out[x, y] = 0.0


@numba.njit(cache=True, nogil=True)
def _mala_step(h, free, code, p, dt, rng, noise_blocks, work):
    """One Metropolis-adjusted Langevin step on the free sites; returns 1 if accepted.

    Each step consumes ``noise_blocks`` Gaussian vectors and uniforms and uses
    their normalized sum (and the first uniform), so a step of size ``dt``
    with ``noise_blocks=2`` shares its noise with two steps of size ``dt/2``.
    """
    nx, ny = h.shape
    g0 = work[0]
    g1 = work[1]
    prop = work[2]
    xi = work[3]
    _gradient(h, free, code, p, g0)
    for x in range(nx):
        for y in range(ny):
            xi[x, y] = 0.0
    u0 = 0.0
    for b in range(noise_blocks):
        for x in range(nx):
            for y in range(ny):
                if free[x, y]:
                    xi[x, y] += rng.standard_normal()
        u = rng.random()
        if b == 0:
            u0 = u
    s = math.sqrt(2.0 * dt / noise_blocks)
    for x in range(nx):
        for y in range(ny):
            if free[x, y]:
                prop[x, y] = h[x, y] - dt * g0[x, y] + s * xi[x, y]
            else:
                prop[x, y] = h[x, y]
    _gradient(prop, free, code, p, g1)
    fwd = 0.0
    bwd = 0.0
    for x in range(nx):
        for y in range(ny):
            if free[x, y]:
                a = prop[x, y] - h[x, y] + dt * g0[x, y]
                b = h[x, y] - prop[x, y] + dt * g1[x, y]
                fwd += a * a
                bwd += b * b
    log_acc = _hamiltonian(h, code, p) - _hamiltonian(prop, code, p) - (bwd - fwd) / (4.0 * dt)
    if math.log(u0) < log_acc:
        for x in range(nx):
            for y in range(ny):
                h[x, y] = prop[x, y]
        return 1
    return 0


@numba.njit(cache=True, nogil=True)
def _occupation_one(h, free, sx, sy, occ, c_V, value, mode, code, p, dt, horizon, rng_walk, rng_field, noise_blocks, work):
    """One coupled run, adding the time spent at every site to ``occ``.

    Returns (lifetime, censored, accepted, proposed).
    """
    lam = 4.0 * c_V
    H = np.zeros((1, 1, 1))
    x, y = sx, sy
    t = 0.0
    next_event = rng_walk.exponential(1.0 / lam)
    next_field = dt if mode == FIELD else math.inf
    accepted = 0
    proposed = 0
    while True:
        if next_event <= next_field:
            if next_event >= horizon:
                occ[x, y] += horizon - t
                return horizon, 1, accepted, proposed
            occ[x, y] += next_event - t
            t = next_event
            d = _jump(mode, x, y, t, c_V, value, H, H, 1.0, h, code, p, rng_walk.random())
            if d >= 0:
                x, y = _move(x, y, d)
                if not free[x, y]:
                    return t, 0, accepted, proposed
            next_event = t + rng_walk.exponential(1.0 / lam)
        else:
            if next_field >= horizon:
                occ[x, y] += horizon - t
                return horizon, 1, accepted, proposed
            occ[x, y] += next_field - t
            t = next_field
            accepted += _mala_step(h, free, code, p, dt, rng_field, noise_blocks, work)
            proposed += 1
            next_field = t + dt


# ---------------------------------------------------------------------------
# public API


def diffusion_step(config: FieldConfig, dt: float, family: PotentialFamily, rng: np.random.Generator, method: str = "mala", noise_blocks: int = 1) -> tuple[FieldConfig, bool]:
    """Advance the field by one step with the pinned sites held at zero.

    ``method="mala"`` is a Metropolis-adjusted Euler-Maruyama step of
    ``d phi = -grad H dt + sqrt(2) dW``.  For the gaussian family
    ``method="heatbath"`` performs one exact heat-bath sweep instead, which
    also leaves ``P_A`` invariant.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    out = config.copy()
    free_inner = ~config.pinned
    if not free_inner.any():
        return out, True
    if method == "heatbath":
        if family.kind != "gaussian":
            raise ValueError("the exact heat-bath step exists only for the gaussian family")
        from .gibbs import sweep

        return sweep(config, None, family, rng, frozen=config.dry_set()), True
    L = config.box.side
    h = np.zeros((L + 2, L + 2))
    h[1:-1, 1:-1] = config.heights
    free = np.zeros((L + 2, L + 2), dtype=np.bool_)
    free[1:-1, 1:-1] = free_inner
    work = np.zeros((4, L + 2, L + 2))
    acc = _mala_step(h, free, family.code, family.param, dt, rng, noise_blocks, work)
    out.heights[...] = h[1:-1, 1:-1]
    return out, bool(acc)


@dataclass
class OccupationEstimate:
    mean: float
    se: float
    replicas: int
    censored_fraction: float
    mean_lifetime: float
    acceptance: float | None
    dt: float | None
    prerun_sweeps: int
    flags: list[str] = field(default_factory=list)
    values: np.ndarray | None = field(default=None, repr=False)


def occupation_profile(i: Site, targets: Iterable[Site], A: Iterable[Site], N: int, family: PotentialFamily, replicas: int = 10_000, seed: int = 0, dt: float = 0.01, horizon: float = 1e4, prerun_sweeps: int = 2000, sweeps_between: int = 2, noise_blocks: int = 1, tag: str = "hswalk", n_batches: int = N_BATCHES) -> dict[Site, OccupationEstimate]:
    """Expected time spent at each target before death, for walks started at ``i``.

    All targets share the same walks.  The initial field of every replica is
    taken from a heat-bath chain of ``P_A`` (pinning disabled off ``A``)
    after ``prerun_sweeps`` sweeps, with ``sweeps_between`` extra sweeps
    between consecutive replicas.  When ``V''`` is constant the walk ignores
    the field, which is then not simulated.
    """
    require_certified(family)
    box = Box(N)
    A = frozenset(map(tuple, A))
    i = tuple(i)
    targets = [tuple(j) for j in targets]
    for s in [i] + targets:
        if s not in box or s in A:
            raise ValueError(f"site {s} is not free")
    L = box.side
    free = np.zeros((L + 2, L + 2), dtype=np.bool_)
    free[1:-1, 1:-1] = True
    for a in A:
        ax, ay = box.to_array_index(a)
        free[ax + 1, ay + 1] = False
    cells = [(j[0] + N + 1, j[1] + N + 1) for j in targets]
    live = not family.constant_curvature
    mode = FIELD if live else CONSTANT
    value = family.param if family.kind == "gaussian" else 1.0
    h = np.zeros((L + 2, L + 2))
    work = np.zeros((4, L + 2, L + 2))
    occ = np.zeros((L + 2, L + 2))
    chain = None
    if live:
        chain = Chain(box, None, family, make_rng(seed, 0, f"{tag}-gibbs"), frozen=A)
        chain.advance(prerun_sweeps)
    censored = 0
    accepted = proposed = 0
    vals = np.empty((replicas, len(targets) + 1))
    for r in range(replicas):
        if live:
            chain.advance(sweeps_between)
            h[1:-1, 1:-1] = chain._h[1:-1, 1:-1]
        occ[...] = 0.0
        # per-replica streams keep runs with different dt on common random
        # numbers replica by replica
        rng_walk = make_rng(seed, r, f"{tag}-walk")
        rng_field = make_rng(seed, r, f"{tag}-field") if live else rng_walk
        life, cens, a, pr = _occupation_one(
            h, free, i[0] + N + 1, i[1] + N + 1, occ, family.c_V, value, mode,
            family.code, family.param, dt, horizon, rng_walk, rng_field, noise_blocks, work,
        )
        for n, (cx, cy) in enumerate(cells):
            vals[r, n] = occ[cx, cy]
        vals[r, -1] = life
        censored += cens
        accepted += a
        proposed += pr
    acc = BatchAccumulator(replicas, len(targets) + 1, n_batches)
    acc.add(vals)
    est, se = acc.statistic()
    frac = censored / replicas
    flags = [f"censored fraction {frac:.3f} exceeds 10%"] if frac > 0.10 else []
    out = {}
    for n, j in enumerate(targets):
        out[j] = OccupationEstimate(
            float(est[n]), float(se[n]), replicas, frac, float(est[-1]),
            accepted / proposed if proposed else None, dt if live else None,
            prerun_sweeps if live else 0, list(flags), vals[:, n].copy(),
        )
    return out


def occupation_time(i: Site, j: Site, A: Iterable[Site], N: int, family: PotentialFamily, **kwargs) -> OccupationEstimate:
    """Expected time at ``j`` before death for the walk started at ``i``; see
    :func:`occupation_profile` for the keyword arguments."""
    return occupation_profile(i, [j], A, N, family, **kwargs)[tuple(j)]


@dataclass
class HittingEstimate:
    p: float
    se: float
    bound: float
    steps: int
    replicas: int

    @property
    def consistent(self) -> bool:
        return self.p + 3.0 * self.se >= self.bound


def hitting_probability(i: Site, k: Site, l: int, rates: RateField, replicas: int, rng: np.random.Generator, horizon: float = 1e6) -> HittingEstimate:
    """P(walk from i hits k before leaving the box [-l, l]^2), with the path bound."""
    for s in (i, k):
        if max(abs(s[0]), abs(s[1])) > l:
            raise ValueError(f"site {s} is outside the l-box")
    if rates.R < l:
        raise ValueError("rate field does not cover the box")
    rates.check_bounds()
    H, V, period = rates._tables()
    mode = CONSTANT if rates.source == "constant" else TABLE
    off = rates.R + 1
    hits = _hit_batch(i[0] + off, i[1] + off, k[0] + off, k[1] + off, off - l, off + l,
                      rates.c_V, rates.value, H, V, period, mode, rng, replicas, horizon)
    p = float(hits.mean())
    se = math.sqrt(max(p * (1 - p), 0.0) / replicas)
    steps = abs(i[0] - k[0]) + abs(i[1] - k[1])
    return HittingEstimate(p, se, hitting_bound(rates.c_V, steps), steps, replicas)


def survival_bound(c_V: float, l: int, blocks: int) -> float:
    """Upper bound on surviving ``blocks`` visits to dirty l-blocks."""
    return (1.0 - hitting_bound(c_V, 2 * l)) ** blocks
