"""Statistics on sample streams: batch means, covariances, mass fits, variance scans."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .gaussian_oracle import green_columns
from .gibbs import Chunk, SamplerParams, map_replicas
from .lattice import Box, Site, norm
from .potentials import PotentialFamily

N_BATCHES = 30


class InsufficientSamples(ValueError):
    pass


class BatchAccumulator:
    """Streaming batch sums over a stream of known total length.

    Element ``t`` (0-based, counted over the whole stream) goes to batch
    ``t * n_batches // n_total``.  Accumulators covering disjoint slices of
    the same stream can be merged with ``+``.
    """

    def __init__(self, n_total: int, n_features: int, n_batches: int = N_BATCHES, offset: int = 0):
        if n_total < n_batches:
            raise InsufficientSamples(f"need at least {n_batches} samples, got {n_total}")
        self.n_total = n_total
        self.n_batches = n_batches
        self.sums = np.zeros((n_batches, n_features))
        self.counts = np.zeros(n_batches, dtype=np.int64)
        self.position = offset

    def add(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        m = values.shape[0]
        t = self.position + np.arange(m)
        if m and t[-1] >= self.n_total:
            raise ValueError("more samples than announced")
        batch = t * self.n_batches // self.n_total
        np.add.at(self.sums, batch, values)
        self.counts += np.bincount(batch, minlength=self.n_batches)
        self.position += m

    def __add__(self, other: "BatchAccumulator") -> "BatchAccumulator":
        out = BatchAccumulator(self.n_total, self.sums.shape[1], self.n_batches)
        out.sums = self.sums + other.sums
        out.counts = self.counts + other.counts
        out.position = max(self.position, other.position)
        return out

    @property
    def batch_means(self) -> np.ndarray:
        if np.any(self.counts == 0):
            raise InsufficientSamples("some batches are empty")
        return self.sums / self.counts[:, None]

    @property
    def means(self) -> np.ndarray:
        return self.sums.sum(axis=0) / self.counts.sum()

    def statistic(self, fn: Callable[[np.ndarray], np.ndarray] | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Estimate ``fn(E[features])`` with its batch-means standard error."""
        if fn is None:
            fn = lambda m: m  # noqa: E731
        est = np.asarray(fn(self.means), dtype=float)
        per_batch = np.array([fn(b) for b in self.batch_means], dtype=float)
        se = per_batch.std(axis=0, ddof=1) / math.sqrt(self.n_batches)
        return est, se


def batch_means(series, n_batches: int = N_BATCHES) -> tuple[float, float]:
    """Mean and batch-means SE of a 1-d series."""
    x = np.asarray(series, dtype=float)
    acc = BatchAccumulator(x.shape[0], 1, n_batches)
    acc.add(x)
    est, se = acc.statistic()
    return float(est[0]), float(se[0])


def integrated_autocorrelation(series, max_lag: int | None = None) -> float:
    """Sokal-windowed integrated autocorrelation time (diagnostic only)."""
    x = np.asarray(series, dtype=float)
    x = x - x.mean()
    n = x.shape[0]
    f = np.fft.rfft(x, 2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n]
    if acf[0] == 0:
        return 1.0
    acf /= acf[0]
    tau = 1.0
    for lag in range(1, max_lag or n):
        tau += 2 * acf[lag]
        if lag >= 5 * tau:
            break
    return float(tau)


# ---------------------------------------------------------------------------
# covariance curves


@dataclass(frozen=True)
class CovPoint:
    i: Site
    j: Site
    distance: float
    estimate: float
    se: float

    @property
    def displacement(self) -> Site:
        return (self.j[0] - self.i[0], self.j[1] - self.i[1])


@dataclass
class CovCurve:
    points: list[CovPoint]
    norm: str = "linf"

    def distances(self) -> np.ndarray:
        return np.array([p.distance for p in self.points])

    def estimates(self) -> np.ndarray:
        return np.array([p.estimate for p in self.points])

    def with_norm(self, distance_norm: str) -> "CovCurve":
        pts = [CovPoint(p.i, p.j, norm(p.displacement, distance_norm), p.estimate, p.se) for p in self.points]
        return CovCurve(pts, distance_norm)

    def ses(self) -> np.ndarray:
        return np.array([p.se for p in self.points])


def _pair_features(flat: np.ndarray, idx_i: np.ndarray, idx_j: np.ndarray) -> np.ndarray:
    # columns: x_i, x_j, x_i x_j for every pair
    xi = flat[:, idx_i]
    xj = flat[:, idx_j]
    return np.concatenate([xi, xj, xi * xj], axis=1)


def _cov_from_means(k: int):
    def fn(m):
        return m[2 * k:] - m[:k] * m[k:2 * k]

    return fn


def covariance(samples, pairs: Sequence[tuple[Site, Site]], box: Box | None = None, distance_norm: str = "linf", n_batches: int = N_BATCHES) -> CovCurve:
    """Empirical covariances with batch-means SE.

    ``samples`` is either an array ``(T, n_sites)`` whose columns are indexed
    by the pair entries directly (integers), or an array of fields
    ``(T, L, L)`` together with ``box`` to resolve sites.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 3:
        if box is None:
            raise ValueError("field samples need the box")
        x = x.reshape(x.shape[0], -1)
        side = box.side
        to_col = lambda s: (s[0] + box.N) * side + (s[1] + box.N)  # noqa: E731
    else:
        to_col = lambda s: s  # noqa: E731
    if x.shape[0] < n_batches:
        raise InsufficientSamples(f"need at least {n_batches} samples, got {x.shape[0]}")
    idx_i = np.array([to_col(a) for a, _ in pairs])
    idx_j = np.array([to_col(b) for _, b in pairs])
    acc = BatchAccumulator(x.shape[0], 3 * len(pairs), n_batches)
    acc.add(_pair_features(x, idx_i, idx_j))
    est, se = acc.statistic(_cov_from_means(len(pairs)))
    pts = []
    for (a, b), e, s in zip(pairs, est, se):
        d = norm((b[0] - a[0], b[1] - a[1]), distance_norm) if not np.isscalar(a) else abs(b - a)
        pts.append(CovPoint(a, b, d, float(e), float(s)))
    return CovCurve(pts, distance_norm)


def default_displacements(d_max: int, directions: str = "axis+diagonal") -> list[Site]:
    out = []
    for d in range(1, d_max + 1):
        if "axis" in directions:
            out.append((d, 0))
        if "diagonal" in directions:
            out.append((d, d))
    return out


class TranslationCovariance:
    """Streaming covariance averaged over translations inside a central window.

    For each displacement v the feature per snapshot is the window average of
    ``phi_x phi_{x+v}`` (both axis orientations pooled by symmetry for axis
    displacements), together with window averages of ``phi``.  Sites within
    ``margin`` of the box boundary are never used.
    """

    def __init__(self, box: Box, displacements: Sequence[Site], margin: int, n_total: int, n_batches: int = N_BATCHES, offset: int = 0):
        self.box = box
        self.displacements = list(displacements)
        self.margin = margin
        side = box.side
        reach = max(max(abs(dx), abs(dy)) for dx, dy in self.displacements)
        lo, hi = margin, side - margin - reach
        if hi <= lo:
            raise ValueError("window is empty: reduce margin or displacements")
        self.window = (lo, hi)
        self.acc = BatchAccumulator(n_total, 1 + 2 * len(self.displacements), n_batches, offset)

    def features(self, heights: np.ndarray) -> np.ndarray:
        lo, hi = self.window
        base = heights[:, lo:hi, lo:hi]
        cols = [base.mean(axis=(1, 2))]
        for dx, dy in self.displacements:
            a = heights[:, lo + dx:hi + dx, lo + dy:hi + dy]
            prod = (base * a).mean(axis=(1, 2))
            if dy == 0 and dx != 0:
                b = heights[:, lo:hi, lo + dx:hi + dx]
                prod = 0.5 * (prod + (base * b).mean(axis=(1, 2)))
            elif dx == dy and dx != 0:
                c = heights[:, lo + dx:hi + dx, lo - dy:hi - dy] if lo - dy >= 0 else None
                if c is not None:
                    prod = 0.5 * (prod + (base * c).mean(axis=(1, 2)))
            cols.append(prod)
            cols.append(a.mean(axis=(1, 2)))
        return np.stack(cols, axis=1)

    def add(self, chunk: Chunk) -> None:
        self.acc.add(self.features(chunk.heights))

    def merge(self, other: "TranslationCovariance") -> "TranslationCovariance":
        self.acc = self.acc + other.acc
        return self

    def curve(self, distance_norm: str = "linf") -> CovCurve:
        k = len(self.displacements)

        def fn(m):
            mean0 = m[0]
            prods = m[1::2]
            shifted = m[2::2]
            return prods - mean0 * shifted

        est, se = self.acc.statistic(fn)
        pts = [
            CovPoint((0, 0), v, norm(v, distance_norm), float(e), float(s))
            for v, e, s in zip(self.displacements, est, se)
        ]
        assert len(pts) == k
        return CovCurve(pts, distance_norm)


# ---------------------------------------------------------------------------
# mass fit


@dataclass
class MassFit:
    m: float
    ci: tuple[float, float]
    r2: float
    intercept: float
    n_used: int
    n_excluded: int
    flags: list[str] = field(default_factory=list)

    @property
    def decaying(self) -> bool:
        return "non-decaying" not in self.flags


def fit_mass(curve: CovCurve, d_min: float = -math.inf, d_max: float = math.inf, z: float = 1.959963984540054) -> MassFit:
    """Weighted least squares of -log(cov) against distance.

    Weights are (estimate / SE)^2, the inverse delta-method variance of the
    log.  Non-positive estimates in range are excluded and counted.  The
    slope SE is inflated by the reduced chi-square when that exceeds one.
    """
    d_all, e_all, s_all = curve.distances(), curve.estimates(), curve.ses()
    in_range = (d_all >= d_min) & (d_all <= d_max)
    usable = in_range & (e_all > 0)
    n_excluded = int(in_range.sum() - usable.sum())
    d, e, s = d_all[usable], e_all[usable], s_all[usable]
    if usable.sum() < 3 or len(np.unique(d)) < 2:
        raise ValueError(f"fewer than 3 usable points for the mass fit ({int(usable.sum())} usable)")
    y = -np.log(e)
    with np.errstate(divide="ignore"):
        w = np.where(s > 0, (e / np.where(s > 0, s, 1.0)) ** 2, np.inf)
    if np.all(np.isinf(w)):
        w = np.ones_like(d)
    elif np.any(np.isinf(w)):
        w = np.where(np.isinf(w), np.nanmax(w[np.isfinite(w)]) * 1e6, w)
    W = w.sum()
    dbar = (w * d).sum() / W
    ybar = (w * y).sum() / W
    sdd = (w * (d - dbar) ** 2).sum()
    slope = (w * (d - dbar) * (y - ybar)).sum() / sdd
    intercept = ybar - slope * dbar
    resid = y - (intercept + slope * d)
    ss_res = (w * resid ** 2).sum()
    ss_tot = (w * (y - ybar) ** 2).sum()
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    dof = len(d) - 2
    scale = max(1.0, ss_res / dof) if dof > 0 else 1.0
    se_slope = math.sqrt(scale / sdd) if np.isfinite(sdd) and sdd > 0 else 0.0
    flags = []
    if abs(slope) <= 1e-12 * max(1.0, abs(intercept)) or slope - z * se_slope <= 0:
        flags.append("non-decaying")
    if n_excluded:
        flags.append(f"excluded {n_excluded} non-positive estimate(s)")
    if abs(slope) <= 1e-12:
        slope = 0.0
    return MassFit(float(slope), (float(slope - z * se_slope), float(slope + z * se_slope)), float(r2), float(intercept), int(len(d)), n_excluded, flags)


# ---------------------------------------------------------------------------
# variance growth (delocalization vs localization)


@dataclass
class VariancePoint:
    N: int
    variance: float
    se: float
    source: str


def origin_variance_mcmc(params: SamplerParams, N: int, family: PotentialFamily, threads: int = 1, tag: str = "deloc") -> tuple[float, float]:
    box = Box(N)
    c = box.to_array_index((0, 0))
    total = params.n_snapshots * params.replicas

    def consume(r, stream):
        acc = BatchAccumulator(total, 2, offset=r * params.n_snapshots)
        for chunk in stream:
            x = chunk.heights[:, c[0], c[1]]
            acc.add(np.stack([x, x * x], axis=1))
        return acc

    accs = map_replicas(params, N, family, consume, tag=f"{tag}-N{N}", threads=threads)
    acc = accs[0]
    for a in accs[1:]:
        acc = acc + a
    est, se = acc.statistic(lambda m: np.array([m[1] - m[0] ** 2]))
    return float(est[0]), float(se[0])


def variance_growth(N_list: Iterable[int], family: PotentialFamily, pinning: bool, params: SamplerParams, threads: int = 1, exact_limit: int = 200) -> list[VariancePoint]:
    """Var(phi_0) per box size.

    With pinning off and a gaussian family the exact Green value is used
    (SE reported as 0) whenever the box has at most ``exact_limit`` radius.
    """
    from .gaussian_oracle import green

    out = []
    for N in N_list:
        if not pinning and family.kind == "gaussian" and N <= exact_limit:
            g = green(N, (), family.param)((0, 0), (0, 0))
            out.append(VariancePoint(N, g, 0.0, "exact"))
            continue
        p = SamplerParams(params.J if pinning else None, params.sweeps, params.burn_in, params.thin, params.seed, params.replicas)
        v, se = origin_variance_mcmc(p, N, family, threads)
        out.append(VariancePoint(N, v, se, "mcmc"))
    return out


def translation_covariance_mcmc(params: SamplerParams, N: int, family: PotentialFamily, d_max: int, margin: int | None = None, threads: int = 1, tag: str = "covariance", directions: str = "axis+diagonal") -> CovCurve:
    """Translation-averaged covariance curve from ``params.replicas`` gibbs chains.

    ``margin`` defaults to ``N // 2`` lattice sites from the box boundary.
    """
    box = Box(N)
    disp = default_displacements(d_max, directions)
    margin = N // 2 if margin is None else margin
    per = params.n_snapshots
    total = per * params.replicas

    def consume(r, stream):
        acc = TranslationCovariance(box, disp, margin, total, offset=r * per)
        for chunk in stream:
            acc.add(chunk)
        return acc

    accs = map_replicas(params, N, family, consume, tag=tag, threads=threads)
    acc = accs[0]
    for a in accs[1:]:
        acc = acc.merge(a)
    return acc.curve()


class GreenCovariance:
    """Streaming covariance for the gaussian family through the dry set alone.

    Given the dry set A the field is centred Gaussian with covariance G_A, so
    Cov(phi_x, phi_y) = E[G_A(x, y)].  Each snapshot contributes the exact
    G_A(x, x+v) averaged over a grid of base points x in the central window
    (orientations pooled as in :class:`TranslationCovariance`).  The estimate
    is never negative and its noise does not have a floor set by the field
    fluctuations.
    """

    def __init__(self, box: Box, displacements: Sequence[Site], margin: int, n_total: int, kappa: float = 1.0, stride: int = 3, n_batches: int = N_BATCHES, offset: int = 0):
        self.box = box
        self.kappa = kappa
        self.displacements = list(displacements)
        reach = max(max(abs(dx), abs(dy)) for dx, dy in self.displacements)
        # diagonal displacements are pooled with their mirror image (dx, -dy)
        back = max([dy for dx, dy in self.displacements if dx == dy and dx != 0], default=0)
        lo, hi = max(margin, back), box.side - margin - reach
        if hi <= lo:
            raise ValueError("window is empty: reduce margin or displacements")
        self.bases = [(x, y) for x in range(lo, hi, stride) for y in range(lo, hi, stride)]
        self.acc = BatchAccumulator(n_total, len(self.displacements), n_batches, offset)

    def features(self, pinned: np.ndarray) -> np.ndarray:
        bx = np.array([b[0] for b in self.bases])
        by = np.array([b[1] for b in self.bases])
        k = np.arange(len(self.bases))
        rows = []
        for mask in pinned:
            G = green_columns(~mask, self.bases, self.kappa)
            row = []
            for dx, dy in self.displacements:
                if dy == 0 or dx == 0:
                    v = 0.5 * (G[k, bx + dx, by + dy] + G[k, bx + dy, by + dx])
                elif dx == dy:
                    v = 0.5 * (G[k, bx + dx, by + dy] + G[k, bx + dx, by - dy])
                else:
                    v = G[k, bx + dx, by + dy]
                row.append(v.mean())
            rows.append(row)
        return np.array(rows)

    def add(self, chunk: Chunk) -> None:
        self.acc.add(self.features(chunk.pinned))

    def merge(self, other: "GreenCovariance") -> "GreenCovariance":
        self.acc = self.acc + other.acc
        return self

    def curve(self, distance_norm: str = "linf") -> CovCurve:
        est, se = self.acc.statistic()
        pts = [CovPoint((0, 0), v, norm(v, distance_norm), float(e), float(s))
               for v, e, s in zip(self.displacements, est, se)]
        return CovCurve(pts, distance_norm)


def green_covariance_mcmc(params: SamplerParams, N: int, family: PotentialFamily, d_max: int, margin: int | None = None, threads: int = 1, tag: str = "covariance", directions: str = "axis+diagonal", stride: int = 3) -> CovCurve:
    """Covariance curve from gibbs dry sets via E[G_A(x, x+v)]; gaussian family only."""
    if family.kind != "gaussian":
        raise ValueError("the dry-set Green estimator needs the gaussian family")
    box = Box(N)
    disp = default_displacements(d_max, directions)
    margin = N // 2 if margin is None else margin
    per = params.n_snapshots
    total = per * params.replicas

    def consume(r, stream):
        acc = GreenCovariance(box, disp, margin, total, family.param, stride, offset=r * per)
        for chunk in stream:
            acc.add(chunk)
        return acc

    accs = map_replicas(params, N, family, consume, tag=tag, threads=threads)
    acc = accs[0]
    for a in accs[1:]:
        acc = acc.merge(a)
    return acc.curve()


def pair_covariance_mcmc(params: SamplerParams, N: int, family: PotentialFamily, pairs: Sequence[tuple[Site, Site]], frozen=None, threads: int = 1, tag: str = "pairs", distance_norm: str = "linf") -> CovCurve:
    """Streaming version of :func:`covariance` over gibbs replicas."""
    box = Box(N)
    idx = [(box.to_array_index(i), box.to_array_index(j)) for i, j in pairs]
    k = len(pairs)
    per = params.n_snapshots
    total = per * params.replicas

    def consume(r, stream):
        acc = BatchAccumulator(total, 3 * k, offset=r * per)
        for chunk in stream:
            h = chunk.heights
            cols = []
            for (a, b) in idx:
                x = h[:, a[0], a[1]]
                y = h[:, b[0], b[1]]
                cols += [x, y, x * y]
            acc.add(np.stack(cols, axis=1))
        return acc

    accs = map_replicas(params, N, family, consume, tag=tag, frozen=frozen, threads=threads)
    acc = accs[0]
    for a in accs[1:]:
        acc = acc + a
    est, se = acc.statistic(lambda m: m[2::3] - m[0::3] * m[1::3])
    pts = []
    for (i, j), e, s in zip(pairs, est, se):
        d = norm((j[0] - i[0], j[1] - i[1]), distance_norm)
        pts.append(CovPoint(tuple(i), tuple(j), d, float(e), float(s)))
    return CovCurve(pts, distance_norm)
