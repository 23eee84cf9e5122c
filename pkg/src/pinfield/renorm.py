"""Dry sets seen on the renormalized lattice (2l+1)Z^2.

A block ``B(x, l)`` is dirty when it meets the dry set.  Renormalized paths
start at the origin block and end on the ring ``||k||_inf = r``; a path of
``r`` steps therefore visits ``r + 1`` blocks.  A dry set is (r, eps)-clean
when some such path visits fewer than ``eps * r`` dirty blocks.

Also here: the admissible enlargement tuples used to split the event
``{A avoids B}`` according to how far each component of ``B`` can grow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numba
import numpy as np

from .estimators import BatchAccumulator, N_BATCHES
from .lattice import Box, Site, block_index, connected_components, enlargement, outer_boundary, set_distance


@dataclass(frozen=True)
class RenormScene:
    """Dirty blocks, by renormalized index, within the closed radius-r block box."""

    l: int
    r: int
    dirty: frozenset

    def grid(self) -> np.ndarray:
        r = self.r
        g = np.zeros((2 * r + 1, 2 * r + 1), dtype=np.bool_)
        for kx, ky in self.dirty:
            if max(abs(kx), abs(ky)) <= r:
                g[kx + r, ky + r] = True
        return g

    def to_csv_rows(self) -> list[tuple[int, int, int]]:
        s = 2 * self.l + 1
        r = self.r
        return [
            (kx * s, ky * s, int((kx, ky) in self.dirty))
            for kx in range(-r, r + 1)
            for ky in range(-r, r + 1)
        ]


def block_fits(box: Box, l: int, r: int) -> bool:
    """Whether every block up to the ring r lies inside the box."""
    return (2 * l + 1) * r + l <= box.N


def classify_blocks(A: Iterable[Site], l: int, r: int, region: Box | None = None) -> RenormScene:
    """Label blocks with ``||k||_inf <= r`` as dirty when they meet ``A``.

    When ``region`` is given, sites outside it count as dry (the field is
    pinned to zero there), so blocks not contained in the region are dirty.
    """
    if r < 0:
        raise ValueError("radius must be nonnegative")
    dirty = set()
    for a in A:
        k = block_index(a, l)
        if max(abs(k[0]), abs(k[1])) <= r:
            dirty.add(k)
    if region is not None:
        s = 2 * l + 1
        N = region.N
        for kx in range(-r, r + 1):
            for ky in range(-r, r + 1):
                if max(abs(kx), abs(ky)) * s + l > N:
                    dirty.add((kx, ky))
    return RenormScene(l, r, frozenset(dirty))


def dirty_grid_from_pinned(pinned: np.ndarray, box: Box, l: int, r: int) -> np.ndarray:
    """Vectorized dirty labels for a stack of pinned arrays ``(T, L, L)``.

    Returns a boolean array ``(T, 2r+1, 2r+1)``; exterior sites count as dry.
    """
    pinned = np.asarray(pinned, dtype=bool)
    if pinned.ndim == 2:
        pinned = pinned[None]
    s = 2 * l + 1
    half = s * r + l
    size = 2 * half + 1
    T = pinned.shape[0]
    N = box.N
    ext = np.ones((T, size, size), dtype=bool)
    lo = max(0, half - N)
    src_lo = max(0, N - half)
    n = min(2 * N + 1 - src_lo, size - lo)
    ext[:, lo:lo + n, lo:lo + n] = pinned[:, src_lo:src_lo + n, src_lo:src_lo + n]
    blocks = ext.reshape(T, 2 * r + 1, s, 2 * r + 1, s)
    return blocks.any(axis=(2, 4))


@numba.njit(cache=True, nogil=True)
def _zero_one_bfs(dirty):
    """Minimum number of dirty blocks on a path from the centre to the outer ring."""
    n = dirty.shape[0]
    r = n // 2
    inf = n * n + 10
    dist = np.full((n, n), inf, dtype=np.int64)
    # deque as a ring buffer sized for every node being pushed up to 4 times
    cap = 4 * n * n + 8
    qx = np.empty(cap, dtype=np.int64)
    qy = np.empty(cap, dtype=np.int64)
    head = cap // 2
    tail = head
    dist[r, r] = 1 if dirty[r, r] else 0
    qx[tail] = r
    qy[tail] = r
    tail += 1
    best = inf
    while head != tail:
        x = qx[head]
        y = qy[head]
        head = (head + 1) % cap
        d = dist[x, y]
        if x == 0 or y == 0 or x == n - 1 or y == n - 1:
            if d < best:
                best = d
            continue
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            u = x + dx
            v = y + dy
            w = 1 if dirty[u, v] else 0
            if d + w < dist[u, v]:
                dist[u, v] = d + w
                if w == 0:
                    head = (head - 1) % cap
                    qx[head] = u
                    qy[head] = v
                else:
                    qx[tail] = u
                    qy[tail] = v
                    tail = (tail + 1) % cap
    return best


def min_dirty_path(scene: RenormScene) -> int:
    """0/1-BFS minimum of the dirty-block count over paths origin -> ring r."""
    if scene.r < 1:
        raise ValueError("radius must be at least 1")
    return int(_zero_one_bfs(scene.grid()))


def min_dirty_path_grid(dirty: np.ndarray) -> int:
    return int(_zero_one_bfs(np.ascontiguousarray(dirty, dtype=np.bool_)))


def is_clean(scene: RenormScene, eps: float) -> bool:
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    return min_dirty_path(scene) < eps * scene.r


# ---------------------------------------------------------------------------
# clean-probability curves


@dataclass
class CleanCurve:
    l: int
    eps: float
    radii: list[int]
    p_clean: list[float]
    se: list[float]
    n_samples: int
    slope: float
    flags: list[str] = field(default_factory=list)

    def rows(self) -> list[tuple[int, float, float, int]]:
        return [(r, p, s, self.n_samples) for r, p, s in zip(self.radii, self.p_clean, self.se)]


class CleanCurveAccumulator:
    """Streams pinned snapshots into per-radius clean indicators."""

    def __init__(self, box: Box, l: int, eps: float, radii: Sequence[int], n_total: int, n_batches: int = N_BATCHES, offset: int = 0):
        if l < 1:
            raise ValueError("block radius must be at least 1")
        if not 0 < eps < 1:
            raise ValueError("eps must lie in (0, 1)")
        self.box, self.l, self.eps = box, l, eps
        self.radii = list(radii)
        self.acc = BatchAccumulator(n_total, len(self.radii), n_batches, offset)

    def add_pinned(self, pinned: np.ndarray) -> None:
        pinned = np.asarray(pinned, dtype=bool)
        if pinned.ndim == 2:
            pinned = pinned[None]
        out = np.zeros((pinned.shape[0], len(self.radii)))
        for c, r in enumerate(self.radii):
            grids = dirty_grid_from_pinned(pinned, self.box, self.l, r)
            for t in range(grids.shape[0]):
                g = grids[t]
                if g.all():
                    m = r + 1
                else:
                    m = _zero_one_bfs(g)
                out[t, c] = 1.0 if m < self.eps * r else 0.0
        self.acc.add(out)

    def merge(self, other: "CleanCurveAccumulator") -> "CleanCurveAccumulator":
        self.acc = self.acc + other.acc
        return self

    def curve(self) -> CleanCurve:
        est, se = self.acc.statistic()
        flags = []
        if np.all(est == 0):
            flags.append("degenerate: every sample is (r,eps)-dirty")
        elif np.all(est == 1):
            flags.append("degenerate: every sample is (r,eps)-clean")
        for r in self.radii:
            if not block_fits(self.box, self.l, r):
                flags.append(f"ring r={r} extends beyond the box; exterior counted dry")
        pos = est > 0
        if pos.sum() >= 2:
            slope = float(np.polyfit(np.array(self.radii)[pos], np.log(est[pos]), 1)[0])
        else:
            slope = math.nan
            flags.append("slope undefined: fewer than two radii with positive clean probability")
        n = int(self.acc.counts.sum())
        return CleanCurve(self.l, self.eps, self.radii, [float(x) for x in est], [float(x) for x in se], n, slope, flags)


def clean_probability_curve(samples, box: Box, l: int, eps: float, radii: Sequence[int], n_batches: int = N_BATCHES) -> CleanCurve:
    """P(dry set is (r, eps)-clean) per radius from pinned snapshots ``(T, L, L)``."""
    pinned = np.asarray(samples, dtype=bool)
    acc = CleanCurveAccumulator(box, l, eps, radii, pinned.shape[0], n_batches)
    acc.add_pinned(pinned)
    return acc.curve()


# ---------------------------------------------------------------------------
# admissible tuples


@dataclass(frozen=True)
class AdmissibleTuple:
    components: tuple
    k: tuple
    kind: str = "linf"

    def pieces(self) -> list[frozenset]:
        return [enlargement(B, k, self.kind) for B, k in zip(self.components, self.k)]

    def enlarged(self) -> frozenset:
        out = set()
        for p in self.pieces():
            out |= p
        return frozenset(out)


def is_admissible(components: Sequence[Iterable[Site]], k: Sequence[int], kind: str = "linf") -> bool:
    """k_1 free; for m >= 2 either k_m = 0 or B_m^(k_m) misses all earlier pieces."""
    if len(components) != len(k) or any(x < 0 for x in k):
        return False
    union: set = set()
    for m, (B, km) in enumerate(zip(components, k)):
        piece = enlargement(B, km, kind)
        if m > 0 and km > 0 and union & piece:
            return False
        union |= piece
    return True


def is_dry_neighbour(A: Iterable[Site], D: Iterable[Site], kind: str = "linf") -> bool:
    """A avoids D and meets the outer boundary of every connected piece of D.

    Pieces and boundaries use the same norm as the enlargements (for l-inf:
    eight-neighbour connectivity), so pieces of an enlarged set that touch
    diagonally count as one.
    """
    A = frozenset(A)
    D = frozenset(D)
    if A & D:
        return False
    adjacency = "linf" if kind == "linf" else "l1"
    return all(A & outer_boundary(C, kind) for C in connected_components(D, adjacency))


def admissible_tuple(A: Iterable[Site], B: Iterable[Site], kind: str = "linf", components: Sequence[frozenset] | None = None) -> AdmissibleTuple:
    """Greedy enlargement radii: each component grows until the next step would hit
    the dry set or an earlier enlarged component.

    k_1 = max{k : B_1^(k) misses A};  k_m = max{k > 0 : B_m^(k) misses A and the
    earlier pieces}, with max of the empty set = 0.
    """
    A = frozenset(map(tuple, A))
    B = frozenset(map(tuple, B))
    if A & B:
        raise ValueError("A must avoid B")
    if not B:
        raise ValueError("B must be nonempty")
    if not A:
        raise ValueError("unbounded enlargement: the dry set is empty")
    comps = list(components) if components is not None else connected_components(B, "l1")
    ks = []
    union: set = set()
    for m, Bm in enumerate(comps):
        obstacles = A if m == 0 else A | union
        d = set_distance(Bm, obstacles, kind)
        km = max(int(math.ceil(d)) - 1, 0)
        ks.append(km)
        union |= enlargement(Bm, km, kind)
    return AdmissibleTuple(tuple(comps), tuple(ks), kind)


@dataclass(frozen=True)
class TupleReport:
    k: tuple
    dry_neighbour: bool
    size_bound: bool
    maximal: bool

    @property
    def ok(self) -> bool:
        return self.dry_neighbour and self.size_bound and self.maximal


def _largest_free_radius(piece: Iterable[Site], obstacles: frozenset, kind: str, positive: bool, cap: int) -> int:
    # direct scan: grow one step at a time until the enlargement meets an obstacle
    best = 0
    k = 1 if positive else 0
    while k <= cap:
        if enlargement(piece, k, kind) & obstacles:
            return best if positive else k - 1
        best = k
        k += 1
    raise RuntimeError(f"enlargement radius exceeds the cap {cap}")


def check_admissible(A: Iterable[Site], tup: AdmissibleTuple, B: Iterable[Site] | None = None) -> TupleReport:
    """Integer checks of an admissible tuple: A is a dry neighbour of the enlarged
    set, the size bound |B^(k)| >= |B| + sum k, and every k_m is the largest
    allowed radius (found by growing one step at a time)."""
    A = frozenset(map(tuple, A))
    comps = tup.components
    B = frozenset().union(*comps) if B is None else frozenset(B)
    E = tup.enlarged()
    prop1 = is_dry_neighbour(A, E, tup.kind)
    prop2 = len(E) >= len(B) + sum(tup.k)
    cap = 4 * (max(max(abs(x), abs(y)) for x, y in A | B) + 1)
    maximal = is_admissible(comps, tup.k, tup.kind)
    union: set = set()
    for m, (Bm, km) in enumerate(zip(comps, tup.k)):
        obstacles = A if m == 0 else A | frozenset(union)
        if _largest_free_radius(Bm, obstacles, tup.kind, m > 0, cap) != km:
            maximal = False
        union |= enlargement(Bm, km, tup.kind)
    return TupleReport(tup.k, prop1, prop2, maximal)


def random_instance(rng: np.random.Generator, radius: int = 6, max_components: int = 3, max_steps: int = 4) -> tuple[frozenset, frozenset]:
    """Random (A, B) in the box of the given radius: B is a union of short random
    walks, A an independent site percolation of random density outside B (nonempty)."""
    inside = lambda s: max(abs(s[0]), abs(s[1])) <= radius  # noqa: E731
    B: set = set()
    for _ in range(int(rng.integers(1, max_components + 1))):
        x, y = (int(v) for v in rng.integers(-radius, radius + 1, 2))
        B.add((x, y))
        for _ in range(int(rng.integers(0, max_steps + 1))):
            nbs = [s for s in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)) if inside(s)]
            x, y = nbs[int(rng.integers(len(nbs)))]
            B.add((x, y))
    free = [(x, y) for x in range(-radius, radius + 1) for y in range(-radius, radius + 1) if (x, y) not in B]
    p = rng.uniform(0.02, 0.2)
    A = {s for s in free if rng.random() < p}
    if not A:
        A = {free[int(rng.integers(len(free)))]}
    return frozenset(A), frozenset(B)
