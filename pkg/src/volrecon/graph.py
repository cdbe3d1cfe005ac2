"""Volume graph construction and maximal-clique enumeration.

Nodes are distinct observed volumes.  Two nodes are joined when their
difference falls inside the acceptance window of some observed volume; with
a zero budget this is the exact rule ``v_i = v_j + v_k``.  All window tests
run in exact rational arithmetic so boundary cases never depend on float
rounding.
"""
from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations
from typing import Iterable, Iterator, NamedTuple, Sequence


def as_fraction(x: float | int | Fraction) -> Fraction:
    """Exact value of a decimal-looking number (0.002 becomes 1/500, not the nearest double)."""
    if isinstance(x, (int, Fraction)):
        return Fraction(x)
    return Fraction(str(x))


class Window(NamedTuple):
    lo: Fraction
    hi: Fraction

    def __contains__(self, d: object) -> bool:
        return self.lo <= d <= self.hi  # type: ignore[operator]


@dataclass(frozen=True)
class RelativeWindow:
    """Asymmetric window [v(1 - 0.1b), v(1 + 0.9b)].

    Most of the width sits above ``v`` because measured volumes undercount.
    """

    budget: Fraction

    def __post_init__(self) -> None:
        b = as_fraction(self.budget)
        if b < 0:
            raise ValueError("noise budget must be >= 0")
        object.__setattr__(self, "budget", b)

    def __call__(self, v: int) -> Window:
        b = self.budget
        return Window(v * (1 - b / 10), v * (1 + 9 * b / 10))

    def contains(self, v: int, d: int) -> bool:
        p, q = self.budget.numerator, self.budget.denominator
        return v * (10 * q - p) <= 10 * q * d <= v * (10 * q + 9 * p)

    @property
    def scale(self) -> int:
        return 10 * self.budget.denominator

    def scaled(self, v: int) -> tuple[int, int]:
        """Window of v multiplied by ``scale`` (exact integers)."""
        p, q = self.budget.numerator, self.budget.denominator
        return v * (10 * q - p), v * (10 * q + 9 * p)

    def to_dict(self) -> dict:
        return {"kind": "relative", "budget": str(self.budget)}


@dataclass(frozen=True)
class AbsoluteWindow:
    """Fixed-width window [v - below, v + above]."""

    below: int
    above: int

    def __post_init__(self) -> None:
        if self.below < 0 or self.above < 0:
            raise ValueError("window offsets must be >= 0")

    def __call__(self, v: int) -> Window:
        return Window(Fraction(v - self.below), Fraction(v + self.above))

    def contains(self, v: int, d: int) -> bool:
        return v - self.below <= d <= v + self.above

    scale = 1

    def scaled(self, v: int) -> tuple[int, int]:
        return v - self.below, v + self.above

    def to_dict(self) -> dict:
        return {"kind": "absolute", "below": self.below, "above": self.above}


WindowPolicy = RelativeWindow | AbsoluteWindow


def window_from_dict(d: dict) -> WindowPolicy:
    kind = d.get("kind")
    if kind == "relative":
        return RelativeWindow(Fraction(d["budget"]))
    if kind == "absolute":
        return AbsoluteWindow(int(d["below"]), int(d["above"]))
    raise ValueError(f"unknown window kind {kind!r}")


def approx_equal(u: int | Fraction, v: int | Fraction, noise_budget: float | Fraction, multiplier: float | Fraction = 1) -> bool:
    """|u - v| / min(u, v) <= multiplier * noise_budget, evaluated exactly."""
    if u <= 0 or v <= 0:
        raise ValueError(f"volumes must be positive, got {u}, {v}")
    return abs(u - v) <= min(u, v) * as_fraction(noise_budget) * as_fraction(multiplier)


@dataclass(frozen=True)
class ObservedVolumes:
    """Sorted distinct volumes with a window policy, answering "is d backed by some observation?"."""

    volumes: tuple[int, ...]
    window: WindowPolicy

    def __post_init__(self) -> None:
        vols = tuple(sorted({int(v) for v in self.volumes}))
        if vols and vols[0] <= 0:
            raise ValueError("observed volumes must be positive")
        object.__setattr__(self, "volumes", vols)
        bounds = [self.window.scaled(v) for v in vols]
        object.__setattr__(self, "_los", [b[0] for b in bounds])
        object.__setattr__(self, "_his", [b[1] for b in bounds])
        object.__setattr__(self, "_memo", {})

    def witness_index(self, d: int) -> int | None:
        """Index of the smallest observed v_k whose window contains d, or None.

        Both window ends grow with v_k, so the first v_k whose upper end
        reaches d is the only one that can also have its lower end below d.
        """
        memo = self._memo
        if d in memo:
            return memo[d]
        x = d * self.window.scale
        i = bisect.bisect_left(self._his, x)
        out = i if i < len(self._los) and self._los[i] <= x else None
        memo[d] = out
        return out

    def witness(self, d: int) -> int | None:
        i = self.witness_index(d)
        return None if i is None else self.volumes[i]

    def witnesses(self, d: int) -> list[int]:
        """Every observed volume whose window contains d."""
        i = self.witness_index(d)
        if i is None:
            return []
        x = d * self.window.scale
        out = []
        while i < len(self._los) and self._los[i] <= x:
            out.append(self.volumes[i])
            i += 1
        return out

    def supports(self, d: int) -> bool:
        return self.witness_index(d) is not None

    def nearest(self, x: int) -> int:
        """Closest observed volume, the smaller one on ties."""
        vols = self.volumes
        if not vols:
            raise ValueError("no observed volumes")
        i = bisect.bisect_left(vols, x)
        if i == 0:
            return vols[0]
        if i == len(vols):
            return vols[-1]
        below, above = vols[i - 1], vols[i]
        return below if x - below <= above - x else above


@dataclass(frozen=True)
class VolumeGraph:
    nodes: tuple[int, ...]
    neighbors: tuple[int, ...] = field(repr=False)  # bitmask per node index
    window: WindowPolicy

    @property
    def noise_budget(self) -> Fraction | None:
        return self.window.budget if isinstance(self.window, RelativeWindow) else None

    def __len__(self) -> int:
        return len(self.nodes)

    def has_edge(self, i: int, j: int) -> bool:
        return bool(self.neighbors[i] >> j & 1)

    def edges(self) -> Iterator[tuple[int, int]]:
        """Index pairs (i, j) with i < j."""
        for i, mask in enumerate(self.neighbors):
            m = mask >> (i + 1)
            j = i + 1
            while m:
                if m & 1:
                    yield i, j
                m >>= 1
                j += 1

    def volume_edges(self) -> list[tuple[int, int]]:
        return [(self.nodes[i], self.nodes[j]) for i, j in self.edges()]

    def observed(self) -> ObservedVolumes:
        return ObservedVolumes(self.nodes, self.window)

    def to_adjacency_text(self) -> str:
        lines = []
        for i, v in enumerate(self.nodes):
            nbrs = [str(self.nodes[j]) for j in range(len(self.nodes)) if self.has_edge(i, j)]
            lines.append(f"{v}: {','.join(nbrs)}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(
            {
                "nodes": list(self.nodes),
                "edges": [list(e) for e in self.volume_edges()],
                "window": self.window.to_dict(),
            },
            indent=1,
        )


def build_graph(
    V: Iterable[int],
    noise_budget: float | Fraction = 0,
    window: WindowPolicy | None = None,
) -> VolumeGraph:
    """Graph on the distinct volumes of V.

    Edge (v_i, v_j) exists iff some v_k in V has |v_i - v_j| inside its
    window.  ``window`` overrides the relative window built from
    ``noise_budget``.
    """
    vols = sorted({int(v) for v in V})
    if not vols:
        raise ValueError("cannot build a graph from an empty volume list")
    if vols[0] <= 0:
        raise ValueError("volumes must be positive")
    policy = window if window is not None else RelativeWindow(noise_budget)
    obs = ObservedVolumes(tuple(vols), policy)
    n = len(vols)
    nbrs = [0] * n
    for i in range(n):
        for j in range(i + 1, n):
            if obs.supports(vols[j] - vols[i]):
                nbrs[i] |= 1 << j
                nbrs[j] |= 1 << i
    return VolumeGraph(tuple(vols), tuple(nbrs), policy)


# -- cliques --------------------------------------------------------------


@dataclass(frozen=True)
class CliqueListing:
    cliques: list[tuple[int, ...]]  # volume lists, each sorted ascending
    truncated: bool

    def __iter__(self):
        return iter(self.cliques)

    def __len__(self) -> int:
        return len(self.cliques)


def _bits(mask: int) -> Iterator[int]:
    while mask:
        low = mask & -mask
        yield low.bit_length() - 1
        mask ^= low


def _maximal_cliques(nbrs: Sequence[int], min_size: int, max_count: int) -> tuple[list[int], bool]:
    """Bron-Kerbosch with Tomita pivoting over bitmask adjacency.

    Branches that cannot reach ``min_size`` are cut.  Returns clique masks in
    discovery order and whether the listing stopped at ``max_count``.
    """
    out: list[int] = []
    n = len(nbrs)
    if n == 0:
        return out, False

    def expand(R: int, size: int, P: int, X: int) -> bool:
        if not P:
            if not X and size >= min_size:
                out.append(R)
                return len(out) >= max_count
            return False
        if size + P.bit_count() < min_size:
            return False
        PX = P | X
        pivot = max(_bits(PX), key=lambda u: (P & nbrs[u]).bit_count())
        for v in _bits(P & ~nbrs[pivot]):
            if expand(R | 1 << v, size + 1, P & nbrs[v], X & nbrs[v]):
                return True
            P &= ~(1 << v)
            X |= 1 << v
        return False

    stopped = expand(0, 0, (1 << n) - 1, 0)
    return out, stopped


def find_maximal_cliques(g: VolumeGraph, min_size: int = 2, max_count: int = 50_000) -> CliqueListing:
    """Maximal cliques with at least ``min_size`` nodes.

    Sorted by size (largest first), then lexicographically by volume list.
    """
    if min_size < 2:
        raise ValueError("min_size must be >= 2")
    if max_count < 1:
        raise ValueError("max_count must be >= 1")
    masks, truncated = _maximal_cliques(g.neighbors, min_size, max_count)
    cliques = [tuple(g.nodes[i] for i in _bits(m)) for m in masks]
    cliques.sort(key=lambda c: (-len(c), c))
    return CliqueListing(cliques, truncated)


def max_clique_size(g: VolumeGraph) -> int:
    """Size of the largest clique (1 for a graph without edges)."""
    nbrs = g.neighbors
    best = 1 if nbrs else 0

    def expand(size: int, P: int) -> None:
        nonlocal best
        if not P:
            best = max(best, size)
            return
        while P:
            if size + P.bit_count() <= best:
                return
            low = P & -P
            v = low.bit_length() - 1
            expand(size + 1, P & nbrs[v])
            P ^= low

    expand(0, (1 << len(nbrs)) - 1)
    return best


def largest_cliques(g: VolumeGraph, max_count: int = 50_000) -> CliqueListing:
    """All maximum cliques, lexicographically ordered."""
    k = max_clique_size(g)
    if k < 2:
        return CliqueListing([(v,) for v in g.nodes], False)
    listing = find_maximal_cliques(g, min_size=k, max_count=max_count)
    return CliqueListing([c for c in listing.cliques if len(c) == k], listing.truncated)


def clique_to_candidate(c: Sequence[int]) -> list[int]:
    """Consecutive differences of a sorted clique: [c1, c2 - c1, ..., ck - c(k-1)]."""
    if not c:
        raise ValueError("clique must be non-empty")
    c = list(c)
    if any(b <= a for a, b in zip(c, c[1:])):
        raise ValueError("clique volumes must be strictly increasing")
    return [c[0]] + [b - a for a, b in zip(c, c[1:])]


def cliques_of_sizes(g: VolumeGraph, lo: int, hi: int, max_count: int = 50_000) -> CliqueListing:
    """Every clique (maximal or not) with between ``lo`` and ``hi`` nodes.

    Built from the maximal cliques of size >= lo; sorted by size (largest
    first), then lexicographically.
    """
    if lo < 1 or hi < lo:
        raise ValueError("need 1 <= lo <= hi")
    if lo == 1:
        singles = {(v,) for v in g.nodes}
        rest = cliques_of_sizes(g, 2, hi, max_count) if hi >= 2 else CliqueListing([], False)
        out = sorted(set(rest.cliques) | singles, key=lambda c: (-len(c), c))
        return CliqueListing(out[:max_count], rest.truncated or len(out) > max_count)
    maximal = find_maximal_cliques(g, min_size=max(2, lo), max_count=max_count)
    found: set[tuple[int, ...]] = set()
    truncated = maximal.truncated
    for c in maximal.cliques:
        for size in range(lo, min(hi, len(c)) + 1):
            for sub in combinations(c, size):
                found.add(sub)
        if len(found) > max_count:
            truncated = True
            break
    out = sorted(found, key=lambda c: (-len(c), c))
    return CliqueListing(out[:max_count], truncated)
