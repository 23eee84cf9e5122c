"""Geometry of Z^2: boxes, finite regions, renormalized blocks, enlargements.

Conventions used throughout the package:

* sites are ``(x, y)`` integer tuples;
* boxes, blocks and enlargements are measured in the l-infinity norm;
* raster order is lexicographic in ``(x, y)``, which is also the C order of
  arrays indexed as ``arr[x + N, y + N]``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

Site = tuple[int, int]

# E, W, N, S
OFFSETS: tuple[Site, ...] = ((1, 0), (-1, 0), (0, 1), (0, -1))
DIAGONAL_OFFSETS: tuple[Site, ...] = ((1, 1), (1, -1), (-1, 1), (-1, -1))

NORMS = ("l1", "l2", "linf")


def neighbors(i: Site) -> list[Site]:
    x, y = i
    return [(x + dx, y + dy) for dx, dy in OFFSETS]


def norm(v: Site, kind: str = "linf") -> float:
    dx, dy = abs(v[0]), abs(v[1])
    if kind == "linf":
        return max(dx, dy)
    if kind == "l1":
        return dx + dy
    if kind == "l2":
        return float(np.hypot(dx, dy))
    raise ValueError(f"unknown norm {kind!r}; expected one of {NORMS}")


def dist(i: Site, S: Iterable[Site], kind: str = "linf") -> float:
    """Distance from ``i`` to the nearest point of ``S``."""
    pts = np.asarray(list(S), dtype=np.int64).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise ValueError("distance to an empty set is undefined")
    d = np.abs(pts - np.asarray(i, dtype=np.int64))
    if kind == "linf":
        return int(d.max(axis=1).min())
    if kind == "l1":
        return int(d.sum(axis=1).min())
    if kind == "l2":
        return float(np.sqrt((d.astype(float) ** 2).sum(axis=1)).min())
    raise ValueError(f"unknown norm {kind!r}; expected one of {NORMS}")


def set_distance(S: Iterable[Site], T: Iterable[Site], kind: str = "linf") -> float:
    """min over s in S, t in T of ||s - t||."""
    a = np.asarray(list(S), dtype=np.int64).reshape(-1, 2)
    b = np.asarray(list(T), dtype=np.int64).reshape(-1, 2)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("distance to an empty set is undefined")
    d = np.abs(a[:, None, :] - b[None, :, :])
    if kind == "linf":
        return int(d.max(axis=2).min())
    if kind == "l1":
        return int(d.sum(axis=2).min())
    if kind == "l2":
        return float(np.sqrt((d.astype(float) ** 2).sum(axis=2)).min())
    raise ValueError(f"unknown norm {kind!r}; expected one of {NORMS}")


def _ball_offsets(k: int, kind: str) -> list[Site]:
    out = []
    for dx in range(-k, k + 1):
        for dy in range(-k, k + 1):
            if norm((dx, dy), kind) <= k:
                out.append((dx, dy))
    return out


def enlargement(D: Iterable[Site], k: int, kind: str = "linf") -> frozenset[Site]:
    """The k-enlargement ``{i : d(i, D) <= k}``."""
    D = frozenset(D)
    if not D:
        raise ValueError("empty set has no enlargement")
    if k < 0:
        raise ValueError("enlargement radius must be nonnegative")
    if k == 0:
        return D
    ball = _ball_offsets(k, kind)
    return frozenset((x + dx, y + dy) for x, y in D for dx, dy in ball)


def outer_boundary(D: Iterable[Site], kind: str = "linf") -> frozenset[Site]:
    """Sites at distance exactly one from ``D``."""
    D = frozenset(D)
    return enlargement(D, 1, kind) - D


def connected_components(B: Iterable[Site], adjacency: str = "l1") -> list[frozenset[Site]]:
    """Maximal connected pieces of ``B``, ordered by their lexicographic minimum.

    ``adjacency="l1"`` uses the four nearest neighbours, ``"linf"`` adds the
    diagonals.
    """
    offsets = OFFSETS if adjacency == "l1" else OFFSETS + DIAGONAL_OFFSETS
    remaining = set(B)
    comps = []
    for start in sorted(remaining):
        if start not in remaining:
            continue
        remaining.discard(start)
        comp = {start}
        queue = deque([start])
        while queue:
            x, y = queue.popleft()
            for dx, dy in offsets:
                nb = (x + dx, y + dy)
                if nb in remaining:
                    remaining.discard(nb)
                    comp.add(nb)
                    queue.append(nb)
        comps.append(frozenset(comp))
    return comps


def is_connected(B: Iterable[Site], adjacency: str = "l1") -> bool:
    return len(connected_components(B, adjacency)) <= 1


@dataclass(frozen=True)
class Region:
    """A finite set of free sites with zero boundary condition outside it."""

    sites: tuple[Site, ...]
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        s = tuple(sorted(set(self.sites)))
        if not s:
            raise ValueError("a region needs at least one site")
        object.__setattr__(self, "sites", s)
        object.__setattr__(self, "index", {site: n for n, site in enumerate(s)})

    @classmethod
    def rect(cls, width: int, height: int, origin: Site = (0, 0)) -> "Region":
        x0, y0 = origin
        return cls(tuple((x0 + a, y0 + b) for a in range(width) for b in range(height)))

    def __len__(self) -> int:
        return len(self.sites)

    def __contains__(self, i) -> bool:
        return tuple(i) in self.index

    @property
    def boundary(self) -> frozenset[Site]:
        """Exterior sites adjacent to the region."""
        return frozenset(nb for s in self.sites for nb in neighbors(s) if nb not in self.index)

    def mask_to_set(self, mask: int) -> frozenset[Site]:
        """Decode a bitmask (bit n <-> n-th site in raster order)."""
        return frozenset(s for n, s in enumerate(self.sites) if (mask >> n) & 1)

    def set_to_mask(self, A: Iterable[Site]) -> int:
        mask = 0
        for s in A:
            mask |= 1 << self.index[tuple(s)]
        return mask

    def edges(self) -> list[tuple[int, int]]:
        """Free-free nearest-neighbour edges as index pairs (each once)."""
        out = []
        for n, (x, y) in enumerate(self.sites):
            for nb in ((x + 1, y), (x, y + 1)):
                m = self.index.get(nb)
                if m is not None:
                    out.append((n, m))
        return out


@dataclass(frozen=True)
class Box(Region):
    """The box [-N, N]^2."""

    N: int = 0

    def __init__(self, N: int):
        if N < 0:
            raise ValueError("box radius must be nonnegative")
        object.__setattr__(self, "N", int(N))
        Region.__init__(
            self, tuple((x, y) for x in range(-N, N + 1) for y in range(-N, N + 1))
        )

    @property
    def side(self) -> int:
        return 2 * self.N + 1

    def to_array_index(self, i: Site) -> tuple[int, int]:
        return i[0] + self.N, i[1] + self.N


@dataclass(frozen=True)
class RenormBlock:
    """B(x, l): the l-infinity ball of radius l around a center in (2l+1)Z^2."""

    center: Site
    l: int

    @property
    def index(self) -> Site:
        s = 2 * self.l + 1
        return self.center[0] // s, self.center[1] // s

    def sites(self) -> frozenset[Site]:
        cx, cy = self.center
        l = self.l
        return frozenset(
            (cx + dx, cy + dy) for dx in range(-l, l + 1) for dy in range(-l, l + 1)
        )

    def __contains__(self, i) -> bool:
        return max(abs(i[0] - self.center[0]), abs(i[1] - self.center[1])) <= self.l


def block_index(i: Site, l: int) -> Site:
    """Renormalized coordinates k with i in B((2l+1)k, l)."""
    if l < 1:
        raise ValueError("block radius must be at least 1")
    s = 2 * l + 1
    return (i[0] + l) // s, (i[1] + l) // s


def block_of(i: Site, l: int) -> RenormBlock:
    kx, ky = block_index(i, l)
    s = 2 * l + 1
    return RenormBlock((kx * s, ky * s), l)
