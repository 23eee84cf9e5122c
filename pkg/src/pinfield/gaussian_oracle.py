"""Exact computations for V(t) = kappa t^2 / 2 on finite regions.

With zero boundary condition outside a region and a dry set A held at zero,
the field on the free sites is a centred Gaussian with precision matrix Q
(``4 kappa`` on the diagonal, ``-kappa`` per free-free edge).  Hence

    Z(A) = (2 pi)^{n/2} det(Q)^{-1/2},     <phi_i ; phi_j>_A = (Q^{-1})_{ij},

and the dry-set weights are rho(A) proportional to e^{J|A|} Z(A).  Removing a
free site i from the free set multiplies Z by ``1 / sqrt(2 pi G_A(i, i))``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import logsumexp

from .lattice import Box, Region, Site, dist

DEFAULT_CAP = 16
HARD_CAP = 25
DENSE_LIMIT = 400
LOG_2PI = math.log(2.0 * math.pi)


class EnumerationCapError(ValueError):
    pass


def _region(region) -> Region:
    if isinstance(region, Region):
        return region
    if isinstance(region, int):
        return Box(region)
    return Region(tuple(region))


def precision_matrix(region: Region, kappa: float = 1.0) -> np.ndarray:
    """Dense precision matrix of the whole region (no dry sites)."""
    n = len(region)
    Q = np.zeros((n, n))
    np.fill_diagonal(Q, 4.0 * kappa)
    for a, b in region.edges():
        Q[a, b] = Q[b, a] = -kappa
    return Q


@dataclass
class QuadraticForm:
    region: Region
    dry: frozenset
    kappa: float
    free_sites: tuple = field(init=False)
    matrix: sp.csc_matrix = field(init=False, repr=False)

    def __post_init__(self):
        region = self.region
        bad = [a for a in self.dry if a not in region]
        if bad:
            raise ValueError(f"dry sites outside the region: {sorted(bad)[:5]}")
        self.free_sites = tuple(s for s in region.sites if s not in self.dry)
        pos = {s: n for n, s in enumerate(self.free_sites)}
        rows, cols, vals = [], [], []
        k = self.kappa
        for n, (x, y) in enumerate(self.free_sites):
            rows.append(n)
            cols.append(n)
            vals.append(4.0 * k)
            for nb in ((x + 1, y), (x, y + 1)):
                m = pos.get(nb)
                if m is not None:
                    rows += [n, m]
                    cols += [m, n]
                    vals += [-k, -k]
        size = len(self.free_sites)
        self.matrix = sp.csc_matrix((vals, (rows, cols)), shape=(size, size))
        self._pos = pos

    @property
    def n(self) -> int:
        return len(self.free_sites)

    def position(self, i: Site) -> int | None:
        return self._pos.get(tuple(i))

    def logdet(self) -> float:
        """log det Q accumulated from factor pivots."""
        if self.n == 0:
            return 0.0
        if self.n <= DENSE_LIMIT:
            c = np.linalg.cholesky(self.matrix.toarray())
            return 2.0 * float(np.log(np.diag(c)).sum())
        lu = spla.splu(self.matrix, permc_spec="MMD_AT_PLUS_A")
        return float(np.log(np.abs(lu.U.diagonal())).sum())


class GreenFunction:
    """G_A(i, j) = (Q^{-1})_{ij}; zero whenever i or j is dry or exterior."""

    def __init__(self, form: QuadraticForm):
        self.form = form
        self._cols: dict[int, np.ndarray] = {}
        self._dense = None
        self._lu = None
        if 0 < form.n <= DENSE_LIMIT:
            self._dense = scipy.linalg.cho_solve(
                scipy.linalg.cho_factor(form.matrix.toarray()), np.eye(form.n)
            )
            self._dense = 0.5 * (self._dense + self._dense.T)
        elif form.n > DENSE_LIMIT:
            self._lu = spla.splu(form.matrix)

    def _column(self, b: int) -> np.ndarray:
        if self._dense is not None:
            return self._dense[:, b]
        if b not in self._cols:
            e = np.zeros(self.form.n)
            e[b] = 1.0
            self._cols[b] = self._lu.solve(e)
        return self._cols[b]

    def __call__(self, i: Site, j: Site) -> float:
        a, b = self.form.position(i), self.form.position(j)
        if a is None or b is None:
            return 0.0
        return float(self._column(b)[a])

    __getitem__ = lambda self, ij: self(*ij)  # noqa: E731

    def matrix(self) -> np.ndarray:
        """Dense G over the region's sites (raster order), zeros on dry sites."""
        region = self.form.region
        out = np.zeros((len(region), len(region)))
        idx = [region.index[s] for s in self.form.free_sites]
        if self.form.n:
            if self._dense is None:
                raise ValueError("dense Green matrix requested for a large region")
            out[np.ix_(idx, idx)] = self._dense
        return out


def green_columns(free: np.ndarray, bases: Sequence[tuple[int, int]], kappa: float = 1.0) -> np.ndarray:
    """Columns of G_A on a square array of sites, for a dry mask given as ``~free``.

    ``free`` is a boolean ``(L, L)`` array (the box in array coordinates, zero
    outside it); ``bases`` are array indices.  Returns ``(len(bases), L, L)``
    with ``out[k, x, y] = G_A(bases[k], (x, y))``, zero on dry sites and for
    dry bases.  One sparse factorization serves all columns.
    """
    free = np.asarray(free, dtype=bool)
    L = free.shape[0]
    out = np.zeros((len(bases), L, L))
    n = int(free.sum())
    live = [k for k, b in enumerate(bases) if free[b]]
    if n == 0 or not live:
        return out
    idx = np.full(free.shape, -1, dtype=np.int64)
    idx[free] = np.arange(n)
    rows, cols, vals = [np.arange(n)], [np.arange(n)], [np.full(n, 4.0 * kappa)]
    for a, b in ((idx[:-1, :], idx[1:, :]), (idx[:, :-1], idx[:, 1:])):
        m = (a >= 0) & (b >= 0)
        rows += [a[m], b[m]]
        cols += [b[m], a[m]]
        vals += [np.full(int(m.sum()), -kappa)] * 2
    Q = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    rhs = np.zeros((n, len(live)))
    for c, k in enumerate(live):
        rhs[idx[bases[k]], c] = 1.0
    sol = spla.splu(Q).solve(rhs)
    for c, k in enumerate(live):
        out[k][free] = sol[:, c]
    return out


def green(region, A: Iterable[Site] = (), kappa: float = 1.0) -> GreenFunction:
    """Green function of the region with the dry set ``A`` killed.

    ``region`` may be a box radius, a :class:`Region` or a site list.
    """
    return GreenFunction(QuadraticForm(_region(region), frozenset(map(tuple, A)), kappa))


def log_partition(region, A: Iterable[Site] = (), kappa: float = 1.0) -> float:
    """log Z(A) = (n/2) log(2 pi) - (1/2) log det Q."""
    form = QuadraticForm(_region(region), frozenset(map(tuple, A)), kappa)
    return 0.5 * form.n * LOG_2PI - 0.5 * form.logdet()


def pin_ratio(region, A: Iterable[Site], i: Site, kappa: float = 1.0) -> dict:
    """Z(A + {i}) / Z(A) for nonempty A and free i, with ratio * sqrt(d(i, A))."""
    A = frozenset(map(tuple, A))
    i = tuple(i)
    if not A:
        raise ValueError("pin_ratio needs a nonempty dry set")
    if i in A:
        raise ValueError("site is already dry")
    region = _region(region)
    log_ratio = log_partition(region, A | {i}, kappa) - log_partition(region, A, kappa)
    ratio = math.exp(log_ratio)
    d = dist(i, A, "l2")
    return {"ratio": ratio, "log_ratio": log_ratio, "distance": d, "scaled": ratio * math.sqrt(d)}


# ---------------------------------------------------------------------------
# enumeration over dry sets


def _check_cap(n: int, cap: int) -> None:
    if cap > HARD_CAP:
        raise EnumerationCapError(f"enumeration cap {cap} exceeds the hard limit of {HARD_CAP} sites")
    if n > cap:
        raise EnumerationCapError(
            f"region has {n} sites; enumeration cap is {cap} (hard limit {HARD_CAP})"
        )


def _free_index_table(n: int, masks: np.ndarray) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Group masks by free-site count; for each group the free indices per mask."""
    bits = ((masks[:, None] >> np.arange(n)) & 1).astype(bool)
    free = ~bits
    counts = free.sum(axis=1)
    groups = {}
    for s in np.unique(counts):
        sel = np.nonzero(counts == s)[0]
        idx = np.nonzero(free[sel])[1].reshape(len(sel), s) if s else np.zeros((len(sel), 0), dtype=int)
        groups[int(s)] = (sel, idx)
    return groups


def _batched_logdet_and_inverse(Qfull: np.ndarray, idx: np.ndarray, want_inverse: bool):
    sub = Qfull[idx[:, :, None], idx[:, None, :]]
    chol = np.linalg.cholesky(sub)
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    inv = np.linalg.inv(sub) if want_inverse else None
    return logdet, inv


@dataclass
class DryWeightTable:
    region: Region
    J: float
    kappa: float
    masks: np.ndarray
    sizes: np.ndarray
    logZ: np.ndarray
    log_weights: np.ndarray
    log_Zhat: float

    @property
    def rho(self) -> np.ndarray:
        return np.exp(self.log_weights - self.log_Zhat)

    def rho_of(self, A: Iterable[Site]) -> float:
        return float(self.rho[self.region.set_to_mask(A)])

    def expected_size(self) -> float:
        return float(np.dot(self.rho, self.sizes))

    def pinned_marginals(self) -> np.ndarray:
        """P(i in A) per site in raster order."""
        n = len(self.region)
        bits = (self.masks[:, None] >> np.arange(n)) & 1
        return self.rho @ bits

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["mask", "size", "logZ", "rho"])
            for m, s, lz, r in zip(self.masks, self.sizes, self.logZ, self.rho):
                w.writerow([int(m), int(s), repr(float(lz)), repr(float(r))])


def enumerate_rho(region, J: float, kappa: float = 1.0, cap: int = DEFAULT_CAP) -> DryWeightTable:
    """rho(A) for every dry set A of the region (2^n sets), normalized in log domain."""
    region = _region(region)
    n = len(region)
    _check_cap(n, cap)
    masks = np.arange(1 << n, dtype=np.int64)
    sizes = np.array([bin(int(m)).count("1") for m in masks], dtype=np.int64)
    Qfull = precision_matrix(region, kappa)
    logZ = np.zeros(len(masks))
    for s, (sel, idx) in _free_index_table(n, masks).items():
        if s == 0:
            continue
        logdet, _ = _batched_logdet_and_inverse(Qfull, idx, False)
        logZ[sel] = 0.5 * s * LOG_2PI - 0.5 * logdet
    logw = J * sizes + logZ
    return DryWeightTable(region, J, kappa, masks, sizes, logZ, logw, float(logsumexp(logw)))


def exact_covariance_matrix(table: DryWeightTable) -> np.ndarray:
    """sum_A rho(A) G_A over the region's sites, raster order."""
    region = table.region
    n = len(region)
    Qfull = precision_matrix(region, table.kappa)
    rho = table.rho
    cov = np.zeros((n, n))
    for s, (sel, idx) in _free_index_table(n, table.masks).items():
        if s == 0:
            continue
        _, inv = _batched_logdet_and_inverse(Qfull, idx, True)
        w = rho[sel]
        for k in range(len(sel)):
            ii = idx[k]
            cov[np.ix_(ii, ii)] += w[k] * inv[k]
    return 0.5 * (cov + cov.T)


def exact_covariance(table: DryWeightTable, i: Site, j: Site) -> float:
    cache = table.__dict__.setdefault("_cov_cache", None)
    if cache is None:
        cache = exact_covariance_matrix(table)
        table.__dict__["_cov_cache"] = cache
    region = table.region
    return float(cache[region.index[tuple(i)], region.index[tuple(j)]])


def dry_neighbour_functional(region, A: Iterable[Site], B: Iterable[Site], J: float, kappa: float = 1.0, cap: int = DEFAULT_CAP) -> float:
    """sum over C subset of B of e^{J|C|} Z(A + C) / Z(A)."""
    region = _region(region)
    A = frozenset(map(tuple, A))
    B = tuple(sorted(set(map(tuple, B))))
    if A & set(B):
        raise ValueError("A and B must be disjoint")
    if len(B) > cap:
        raise EnumerationCapError(f"|B| = {len(B)} exceeds the subset cap {cap}")
    if J == -math.inf:
        return 1.0
    base = log_partition(region, A, kappa)
    terms = []
    for mask in range(1 << len(B)):
        C = {B[k] for k in range(len(B)) if (mask >> k) & 1}
        terms.append(J * len(C) + log_partition(region, A | C, kappa) - base)
    return float(math.exp(logsumexp(terms)))


def snake_order(region: Region) -> list[Site]:
    """Boustrophedon ordering; every prefix is connected."""
    xs = sorted({s[0] for s in region.sites})
    out = []
    for n, x in enumerate(xs):
        col = sorted(s for s in region.sites if s[0] == x)
        out += col if n % 2 == 0 else col[::-1]
    return out


@dataclass
class CleanScan:
    sizes: list[int]
    exponents: list[float]
    slope: float


def clean_mass_bound_scan(region, J: float, kappa: float = 1.0, family: Sequence[Iterable[Site]] | None = None, cap: int = DEFAULT_CAP, table: DryWeightTable | None = None) -> CleanScan:
    """-log of the rho-mass of dry sets avoiding B along a nested family of B.

    The default family is the prefixes of :func:`snake_order` (including the
    empty set).  The slope is the least-squares fit of exponent against |B|.
    """
    region = _region(region)
    if table is None:
        table = enumerate_rho(region, J, kappa, cap)
    if family is None:
        order = snake_order(region)
        family = [order[:k] for k in range(len(order) + 1)]
    rho = table.rho
    sizes, expo = [], []
    for B in family:
        bmask = region.set_to_mask(B)
        mass = rho[(table.masks & bmask) == 0].sum()
        sizes.append(len(set(map(tuple, B))))
        expo.append(float(-math.log(mass)))
    slope = float(np.polyfit(sizes, expo, 1)[0]) if len(sizes) >= 2 else math.nan
    return CleanScan(sizes, expo, slope)
