"""Single-site heat-bath sampler for the delta-pinned gradient field.

Each interior site of the box carries a height and a pinned flag.  At a site
with neighbour heights ``phi_j`` the conditional law is the mixture

    e^J w(0) delta_0(dt) + w(t) dt,      w(t) = exp(-sum_j V(t - phi_j)),

so the site is pinned with probability ``e^J w(0) / (e^J w(0) + W)`` where
``W`` is the integral of ``w``.  Otherwise a height is drawn from ``w / W``.

Sites can be in one of three modes: ``FREE`` (continuous part only, i.e.
pinning disabled), ``PINNABLE`` (the full mixture) and ``FROZEN`` (held at
zero: a fixed dry set).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterator

import numba
import numpy as np

from .lattice import Box, Site
from .potentials import GAUSSIAN, PotentialFamily, require_certified, v_prime, v_value
from .seeding import make_rng

FREE, PINNABLE, FROZEN = 0, 1, 2
DEG = 4
# sub-Gaussian tails: integrand < exp(-TAIL_EXPONENT) outside the window
TAIL_EXPONENT = 40.0


class QuadratureError(RuntimeError):
    pass


@dataclass
class FieldConfig:
    box: Box
    heights: np.ndarray
    pinned: np.ndarray

    @classmethod
    def zeros(cls, box: Box) -> "FieldConfig":
        L = box.side
        return cls(box, np.zeros((L, L)), np.zeros((L, L), dtype=bool))

    def copy(self) -> "FieldConfig":
        return FieldConfig(self.box, self.heights.copy(), self.pinned.copy())

    def height(self, i: Site) -> float:
        return float(self.heights[self.box.to_array_index(i)])

    def is_pinned(self, i: Site) -> bool:
        return bool(self.pinned[self.box.to_array_index(i)])

    def dry_set(self) -> frozenset[Site]:
        N = self.box.N
        xs, ys = np.nonzero(self.pinned)
        return frozenset((int(x) - N, int(y) - N) for x, y in zip(xs, ys))

    def validate(self) -> None:
        L = self.box.side
        if self.heights.shape != (L, L) or self.pinned.shape != (L, L):
            raise ValueError("array shapes do not match the box")
        if np.any(self.heights[self.pinned] != 0.0):
            raise ValueError("pinned sites must carry height exactly 0")


@dataclass(frozen=True)
class SamplerParams:
    J: float | None
    sweeps: int
    burn_in: int = 0
    thin: int = 1
    seed: int = 0
    replicas: int = 1

    def __post_init__(self):
        if not self.sweeps > self.burn_in >= 0:
            raise ValueError("need sweeps > burn_in >= 0")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.replicas < 1:
            raise ValueError("replicas must be >= 1")

    @property
    def n_snapshots(self) -> int:
        return (self.sweeps - self.burn_in - 1) // self.thin + 1


# ---------------------------------------------------------------------------
# compiled single-site machinery


@numba.njit(cache=True, nogil=True)
def _energy(code, p, nb, t):
    s = 0.0
    for k in range(nb.shape[0]):
        s += v_value(code, p, t - nb[k])
    return s


@numba.njit(cache=True, nogil=True)
def _denergy(code, p, nb, t):
    s = 0.0
    for k in range(nb.shape[0]):
        s += v_prime(code, p, t - nb[k])
    return s


@numba.njit(cache=True, nogil=True)
def _minimizer(code, p, nb):
    """argmin of U(t) = sum_j V(t - phi_j); U' is strictly increasing."""
    lo = nb.min()
    hi = nb.max()
    if hi - lo < 1e-300:
        return lo
    t = 0.5 * (lo + hi)
    for _ in range(200):
        g = _denergy(code, p, nb, t)
        if g > 0.0:
            hi = t
        else:
            lo = t
        curv = 0.0
        for k in range(nb.shape[0]):
            d = t - nb[k]
            if code == GAUSSIAN:
                curv += p
            elif code == 1:
                curv += 1.0 - p * math.cos(d)
            else:
                c = math.cosh(d) if abs(d) < 350.0 else math.inf
                curv += 1.0 + p / (c * c)
        step = t - g / curv
        if step <= lo or step >= hi:
            step = 0.5 * (lo + hi)
        if abs(step - t) <= 1e-14 * (1.0 + abs(t)) or hi - lo <= 1e-14 * (1.0 + abs(t)):
            return step
        t = step
    raise ValueError("failed to locate the conditional minimizer")


@numba.njit(cache=True, nogil=True)
def _integrand(code, p, nb, ustar, t):
    return math.exp(-(_energy(code, p, nb, t) - ustar))


@numba.njit(cache=True, nogil=True)
def _adaptive_simpson(code, p, nb, ustar, a, b, tol, max_depth):
    """Integral of exp(-(U - U*)) over [a, b]; returns (value, converged)."""
    size = 16 + 2 * max_depth + 4
    sa = np.empty(size)
    sb = np.empty(size)
    sfa = np.empty(size)
    sfm = np.empty(size)
    sfb = np.empty(size)
    sdepth = np.empty(size, dtype=np.int64)
    top = 0
    panels = 16
    h = (b - a) / panels
    for k in range(panels):
        x0 = a + k * h
        x1 = x0 + h
        sa[top] = x0
        sb[top] = x1
        sfa[top] = _integrand(code, p, nb, ustar, x0)
        sfm[top] = _integrand(code, p, nb, ustar, 0.5 * (x0 + x1))
        sfb[top] = _integrand(code, p, nb, ustar, x1)
        sdepth[top] = 0
        top += 1
    total = 0.0
    ok = True
    panel_tol = tol / panels
    while top > 0:
        top -= 1
        x0 = sa[top]
        x1 = sb[top]
        fa = sfa[top]
        fm = sfm[top]
        fb = sfb[top]
        d = sdepth[top]
        xm = 0.5 * (x0 + x1)
        whole = (x1 - x0) / 6.0 * (fa + 4.0 * fm + fb)
        fl = _integrand(code, p, nb, ustar, 0.5 * (x0 + xm))
        fr = _integrand(code, p, nb, ustar, 0.5 * (xm + x1))
        left = (xm - x0) / 6.0 * (fa + 4.0 * fl + fm)
        right = (x1 - xm) / 6.0 * (fm + 4.0 * fr + fb)
        local_tol = panel_tol * 0.5 ** d
        if abs(left + right - whole) <= 15.0 * local_tol:
            total += left + right + (left + right - whole) / 15.0
        elif d >= max_depth:
            ok = False
            total += left + right
        else:
            sa[top] = xm
            sb[top] = x1
            sfa[top] = fm
            sfm[top] = fr
            sfb[top] = fb
            sdepth[top] = d + 1
            top += 1
            sa[top] = x0
            sb[top] = xm
            sfa[top] = fa
            sfm[top] = fl
            sfb[top] = fm
            sdepth[top] = d + 1
            top += 1
    return total, ok


@numba.njit(cache=True, nogil=True)
def _log_pin_odds(code, p, c_V, nb, J):
    """log of e^J w(0) / W for the site conditional."""
    if code == GAUSSIAN:
        m = 0.0
        for k in range(nb.shape[0]):
            m += nb[k]
        m /= nb.shape[0]
        n = nb.shape[0]
        # U(0) - U* = (n p / 2) m^2 ;  W / w(t*) = sqrt(2 pi / (n p))
        return J - 0.5 * n * p * m * m - 0.5 * math.log(2.0 * math.pi / (n * p))
    tstar = _minimizer(code, p, nb)
    ustar = _energy(code, p, nb, tstar)
    half = math.sqrt(2.0 * c_V * TAIL_EXPONENT / nb.shape[0])
    val = _trapezoid(code, p, nb, ustar, tstar - half, tstar + half)
    return J - (_energy(code, p, nb, 0.0) - ustar) - math.log(val)


@numba.njit(cache=True, nogil=True)
def _trapezoid(code, p, nb, ustar, a, b):
    """Trapezoid rule with interval doubling.

    The integrand is smooth and negligible at both window ends, so the error
    decays faster than any power of the spacing; this is the sweep's fast path.
    """
    n = 16
    h = (b - a) / n
    s = 0.5 * (_integrand(code, p, nb, ustar, a) + _integrand(code, p, nb, ustar, b))
    for k in range(1, n):
        s += _integrand(code, p, nb, ustar, a + k * h)
    prev = s * h
    for _ in range(12):
        for k in range(n):
            s += _integrand(code, p, nb, ustar, a + (k + 0.5) * h)
        n *= 2
        h *= 0.5
        cur = s * h
        if abs(cur - prev) <= 1e-12 * cur:
            return cur
        prev = cur
    raise ValueError("trapezoid rule did not converge for the site integral")


@numba.njit(cache=True, nogil=True)
def _sample_height(code, p, c_V, nb, rng):
    n = nb.shape[0]
    if code == GAUSSIAN:
        m = 0.0
        for k in range(n):
            m += nb[k]
        return m / n + rng.standard_normal() / math.sqrt(n * p)
    tstar = _minimizer(code, p, nb)
    ustar = _energy(code, p, nb, tstar)
    sd = math.sqrt(c_V / n)
    curv = n / (2.0 * c_V)
    while True:
        t = tstar + sd * rng.standard_normal()
        d = t - tstar
        log_acc = -(_energy(code, p, nb, t) - ustar) + curv * d * d
        if math.log(rng.random()) < log_acc:
            return t


@numba.njit(cache=True, nogil=True)
def _sweep(h, pinned, mode, J, code, p, c_V, rng):
    """One raster sweep; ``h`` is zero-padded by one layer on every side."""
    nx, ny = mode.shape
    nb = np.empty(4)
    for x in range(nx):
        for y in range(ny):
            md = mode[x, y]
            if md == FROZEN:
                h[x + 1, y + 1] = 0.0
                pinned[x, y] = True
                continue
            nb[0] = h[x + 2, y + 1]
            nb[1] = h[x, y + 1]
            nb[2] = h[x + 1, y + 2]
            nb[3] = h[x + 1, y]
            if md == PINNABLE:
                lo = _log_pin_odds(code, p, c_V, nb, J)
                if lo > 0:
                    prob = 1.0 / (1.0 + math.exp(-lo))
                else:
                    e = math.exp(lo)
                    prob = e / (1.0 + e)
                if rng.random() < prob:
                    pinned[x, y] = True
                    h[x + 1, y + 1] = 0.0
                    continue
            pinned[x, y] = False
            h[x + 1, y + 1] = _sample_height(code, p, c_V, nb, rng)


@numba.njit(cache=True, nogil=True)
def _run(h, pinned, mode, J, code, p, c_V, rng, n_sweeps, first_record, thin, out_h, out_pin):
    """Run ``n_sweeps`` sweeps; record after sweep s (1-based) when
    s >= first_record and (s - first_record) % thin == 0."""
    nx, ny = mode.shape
    k = 0
    for s in range(1, n_sweeps + 1):
        _sweep(h, pinned, mode, J, code, p, c_V, rng)
        if s >= first_record and (s - first_record) % thin == 0 and k < out_h.shape[0]:
            for x in range(nx):
                for y in range(ny):
                    out_h[k, x, y] = h[x + 1, y + 1]
                    out_pin[k, x, y] = pinned[x, y]
            k += 1
    return k


# ---------------------------------------------------------------------------
# public single-site API


def _as_neighbors(neighbor_heights) -> np.ndarray:
    nb = np.ascontiguousarray(neighbor_heights, dtype=float)
    if nb.shape != (DEG,):
        raise ValueError("expected four neighbour heights")
    return nb


def continuous_weight(neighbor_heights, family: PotentialFamily) -> dict:
    """Minimizer, energies and log of W = int w(t) dt for one site."""
    nb = _as_neighbors(neighbor_heights)
    code, p = family.code, family.param
    tstar = _minimizer(code, p, nb)
    ustar = _energy(code, p, nb, tstar)
    half = math.sqrt(2.0 * family.c_V * TAIL_EXPONENT / DEG)
    val, ok = _adaptive_simpson(code, p, nb, ustar, tstar - half, tstar + half, 1e-11, 40)
    if not ok:
        raise QuadratureError(
            f"adaptive Simpson failed on [{tstar - half:.6g}, {tstar + half:.6g}] "
            f"for neighbours {nb.tolist()} ({family.kind}, param={family.param})"
        )
    return {
        "t_star": tstar,
        "U_star": ustar,
        "U_zero": _energy(code, p, nb, 0.0),
        "log_W": math.log(val) - ustar,
        "window": (tstar - half, tstar + half),
    }


def pin_probability(neighbor_heights, J: float, family: PotentialFamily) -> float:
    """Conditional probability that a site with these neighbours is pinned.

    The continuous mass ``W`` is always obtained by adaptive quadrature here,
    for every family; the compiled sweep uses the closed form for gaussians.
    """
    if J == -math.inf:
        return 0.0
    info = continuous_weight(neighbor_heights, family)
    log_odds = J - info["U_zero"] - info["log_W"]
    if log_odds > 0:
        return 1.0 / (1.0 + math.exp(-log_odds))
    e = math.exp(log_odds)
    return e / (1.0 + e)


def sample_continuous(neighbor_heights, family: PotentialFamily, rng: np.random.Generator, size: int | None = None):
    """Draw from the density proportional to ``w``.

    Non-gaussian families use rejection sampling from a Gaussian centred at
    the minimizer with variance ``c_V / 4``.
    """
    nb = _as_neighbors(neighbor_heights)
    if size is None:
        return float(_sample_height(family.code, family.param, family.c_V, nb, rng))
    return _sample_many(family.code, family.param, family.c_V, nb, rng, size)


@numba.njit(cache=True, nogil=True)
def _sample_many(code, p, c_V, nb, rng, size):
    out = np.empty(size)
    for k in range(size):
        out[k] = _sample_height(code, p, c_V, nb, rng)
    return out


# ---------------------------------------------------------------------------
# sweeps and chains


def site_modes(box: Box, J: float | None, frozen=None) -> np.ndarray:
    """Mode array: pinning disabled when ``J`` is None, ``frozen`` sites held at 0."""
    L = box.side
    mode = np.full((L, L), FREE if J is None else PINNABLE, dtype=np.int8)
    for i in frozen or ():
        mode[box.to_array_index(i)] = FROZEN
    return mode


def _padded(config: FieldConfig) -> np.ndarray:
    L = config.box.side
    h = np.zeros((L + 2, L + 2))
    h[1:-1, 1:-1] = config.heights
    return h


def sweep(config: FieldConfig, J: float | None, family: PotentialFamily, rng: np.random.Generator, frozen=None) -> FieldConfig:
    """One systematic raster sweep; returns a new configuration."""
    require_certified(family)
    out = config.copy()
    h = _padded(out)
    mode = site_modes(config.box, J, frozen)
    _sweep(h, out.pinned, mode, 0.0 if J is None else float(J), family.code, family.param, family.c_V, rng)
    out.heights[...] = h[1:-1, 1:-1]
    return out


@dataclass
class Chunk:
    sweep_index: np.ndarray
    heights: np.ndarray
    pinned: np.ndarray

    def __len__(self) -> int:
        return self.sweep_index.shape[0]


class Chain:
    """One heat-bath chain with its own generator."""

    def __init__(self, box: Box, J: float | None, family: PotentialFamily, rng: np.random.Generator, frozen=None, init: FieldConfig | None = None):
        require_certified(family)
        self.box = box
        self.J = J
        self.family = family
        self.rng = rng
        self.mode = site_modes(box, J, frozen)
        cfg = init.copy() if init is not None else FieldConfig.zeros(box)
        self._h = _padded(cfg)
        self._pinned = cfg.pinned
        self.sweeps_done = 0

    @property
    def config(self) -> FieldConfig:
        return FieldConfig(self.box, self._h[1:-1, 1:-1].copy(), self._pinned.copy())

    def _args(self):
        f = self.family
        return (self._h, self._pinned, self.mode, 0.0 if self.J is None else float(self.J), f.code, f.param, f.c_V, self.rng)

    def advance(self, n: int) -> None:
        L = self.box.side
        empty = np.empty((0, L, L))
        _run(*self._args(), n, n + 1, 1, empty, np.empty((0, L, L), dtype=np.bool_))
        self.sweeps_done += n

    def snapshots(self, sweeps: int, burn_in: int = 0, thin: int = 1, chunk_size: int | None = None) -> Iterator[Chunk]:
        """Yield thinned snapshots taken after sweeps ``burn_in + 1``, ``burn_in + 1 + thin``, ...

        Sweep indices are counted from the chain's current state.
        """
        L = self.box.side
        if chunk_size is None:
            chunk_size = max(1, 2_000_000 // (L * L))
        start = self.sweeps_done
        if burn_in:
            self.advance(burn_in)
        remaining = (sweeps - burn_in - 1) // thin + 1 if sweeps > burn_in else 0
        first = 1
        while remaining > 0:
            n = min(chunk_size, remaining)
            out_h = np.empty((n, L, L))
            out_p = np.empty((n, L, L), dtype=np.bool_)
            span = first + (n - 1) * thin
            _run(*self._args(), span, first, thin, out_h, out_p)
            base = self.sweeps_done - start
            idx = base + first + thin * np.arange(n)
            self.sweeps_done += span
            yield Chunk(idx, out_h, out_p)
            remaining -= n
            first = thin
            # after a chunk the next record is `thin` sweeps later


def replica_chain(params: SamplerParams, N: int, family: PotentialFamily, replica: int, tag: str = "sample", frozen=None) -> Chain:
    return Chain(Box(N), params.J, family, make_rng(params.seed, replica, tag), frozen=frozen)


def run_chain(params: SamplerParams, N: int, family: PotentialFamily, replica: int = 0, tag: str = "sample", frozen=None, chunk_size: int | None = None) -> Iterator[Chunk]:
    """Snapshot stream of one replica (after burn-in, thinned)."""
    chain = replica_chain(params, N, family, replica, tag, frozen)
    yield from chain.snapshots(params.sweeps, params.burn_in, params.thin, chunk_size)


def map_replicas(params: SamplerParams, N: int, family: PotentialFamily, consume: Callable[[int, Iterator[Chunk]], object], tag: str = "sample", frozen=None, threads: int = 1) -> list:
    """Run every replica and apply ``consume(replica, stream)``; results in replica order."""

    def job(r):
        return consume(r, run_chain(params, N, family, r, tag, frozen))

    if threads <= 1 or params.replicas == 1:
        return [job(r) for r in range(params.replicas)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(job, range(params.replicas)))
