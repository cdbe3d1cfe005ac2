"""Domain types for dense single-column databases and their range-query volumes.

A database over the value range ``1..N`` is stored as its histogram ``counts``
(``counts[i-1]`` records take value ``i``).  Every range ``[lo, hi]`` has a
volume, the number of records it returns.
"""
from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np


class InfeasibleDensityError(ValueError):
    """Raised when a dense database cannot be built (fewer records than values)."""


class NonDenseDatabaseError(ValueError):
    """Raised when ingested data leaves some value in 1..N without records."""


class RangeId(NamedTuple):
    lo: int
    hi: int

    def __str__(self) -> str:
        return f"[{self.lo},{self.hi}]"

    @property
    def span(self) -> int:
        return self.hi - self.lo + 1


def all_ranges(N: int) -> list[RangeId]:
    """All N(N+1)/2 ranges in canonical row order: by span, then by start.

    For N=3 this is [1,1] [2,2] [3,3] [1,2] [2,3] [1,3].
    """
    return [RangeId(lo, lo + span - 1) for span in range(1, N + 1) for lo in range(1, N - span + 2)]


@dataclass(frozen=True)
class Database:
    counts: tuple[int, ...]

    def __post_init__(self) -> None:
        counts = tuple(int(c) for c in self.counts)
        if not counts:
            raise ValueError("a database needs at least one value")
        if any(c < 1 for c in counts):
            raise NonDenseDatabaseError(f"every count must be >= 1, got {list(counts)}")
        object.__setattr__(self, "counts", counts)

    @property
    def N(self) -> int:
        return len(self.counts)

    @property
    def n(self) -> int:
        return sum(self.counts)

    def prefix_volumes(self) -> list[int]:
        """Elementary volumes vol(1,1), vol(1,2), ..., vol(1,N)."""
        return list(np.cumsum(self.counts, dtype=np.int64).tolist())

    def volume(self, r: RangeId) -> int:
        _check_range(r, self.N)
        return sum(self.counts[r.lo - 1 : r.hi])

    def __iter__(self) -> Iterator[int]:
        return iter(self.counts)

    def __len__(self) -> int:
        return len(self.counts)


def _check_range(r: RangeId, N: int) -> None:
    if not (1 <= r.lo <= r.hi <= N):
        raise ValueError(f"range {r} is not inside [1,{N}]")


@dataclass(frozen=True)
class ExactVolumeTable:
    N: int
    volumes: Mapping[RangeId, int]

    def __post_init__(self) -> None:
        expected = self.N * (self.N + 1) // 2
        if len(self.volumes) != expected:
            raise ValueError(f"expected {expected} ranges for N={self.N}, got {len(self.volumes)}")

    def __getitem__(self, r: RangeId | tuple[int, int]) -> int:
        return self.volumes[RangeId(*r)]

    def values(self) -> list[int]:
        return [self.volumes[r] for r in all_ranges(self.N)]

    def multiset(self) -> Counter:
        return Counter(self.volumes.values())

    def distinct(self) -> list[int]:
        return sorted(set(self.volumes.values()))


def exact_volumes(db: Database) -> ExactVolumeTable:
    prefix = [0, *db.prefix_volumes()]
    vols = {r: prefix[r.hi] - prefix[r.lo - 1] for r in all_ranges(db.N)}
    return ExactVolumeTable(db.N, vols)


def reverse(db: Database) -> Database:
    return Database(tuple(reversed(db.counts)))


def generate_database(
    kind: str,
    n: int,
    N: int,
    seed: int,
    mean: float | None = None,
    stddev: float | None = None,
) -> Database:
    """Sample a dense synthetic database of ``n`` records over values ``1..N``.

    ``kind="uniform"`` draws each record's value uniformly from 1..N.
    ``kind="gaussian"`` rounds a Normal(mean, stddev) draw and clamps it to
    [1, N]; ``mean`` defaults to (1+N)/2.  Values left empty are filled by
    moving single records out of the fullest bucket (lowest value on ties),
    which keeps ``n`` fixed and is deterministic.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if n < N:
        raise InfeasibleDensityError(f"cannot make a dense database of {n} records over {N} values")
    rng = np.random.default_rng(seed)
    if kind == "uniform":
        values = rng.integers(1, N + 1, size=n)
    elif kind == "gaussian":
        if stddev is None or stddev <= 0:
            raise ValueError("gaussian generation needs stddev > 0")
        mu = (1 + N) / 2 if mean is None else float(mean)
        values = np.clip(np.rint(rng.normal(mu, stddev, size=n)), 1, N).astype(np.int64)
    else:
        raise ValueError(f"unknown database kind {kind!r}")
    counts = np.bincount(values, minlength=N + 1)[1:].astype(np.int64)
    return Database(tuple(densify(counts.tolist())))


def densify(counts: Sequence[int]) -> list[int]:
    counts = list(counts)
    if sum(counts) < len(counts):
        raise InfeasibleDensityError("not enough records to fill every value")
    for i, c in enumerate(counts):
        while counts[i] == 0:
            donor = max(range(len(counts)), key=lambda j: (counts[j], -j))
            counts[donor] -= 1
            counts[i] += 1
    return counts


@dataclass(frozen=True)
class QueryDistribution:
    N: int
    weights: Mapping[RangeId, float] = field(repr=False)

    def __post_init__(self) -> None:
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("query weights must be non-negative")
        total = math.fsum(self.weights.values())
        if total <= 0:
            raise ValueError("query weights sum to zero")
        if abs(total - 1.0) > 1e-9:
            object.__setattr__(self, "weights", {r: w / total for r, w in self.weights.items()})

    def ranges(self) -> list[RangeId]:
        return [r for r in all_ranges(self.N) if r in self.weights]

    def probabilities(self) -> np.ndarray:
        return np.array([self.weights[r] for r in self.ranges()], dtype=float)

    def without(self, dropped: Iterable[RangeId]) -> "QueryDistribution":
        """Same distribution with some ranges never issued."""
        dropped = set(dropped)
        return QueryDistribution(self.N, {r: w for r, w in self.weights.items() if r not in dropped})


QUERY_PATTERNS = ("uniform", "adjacent-2x", "adjacent-and-skip-2x", "close-volume-2x")


def make_query_distribution(
    pattern: str,
    N: int,
    db: Database | None = None,
    noise_budget: float = 0.002,
) -> QueryDistribution:
    """Build one of the supported query distributions over all ranges of 1..N.

    ``close-volume-2x`` sorts ranges by true volume, pairs consecutive ranges
    whose relative gap is at most ``2 * noise_budget`` and doubles the weight
    of the lexicographically smaller range of each pair.
    """
    ranges = all_ranges(N)
    weights = {r: 1.0 for r in ranges}
    if pattern == "uniform":
        pass
    elif pattern == "adjacent-2x":
        for r in ranges:
            if r.span == 2:
                weights[r] = 2.0
    elif pattern == "adjacent-and-skip-2x":
        for r in ranges:
            if r.span in (2, 3):
                weights[r] = 2.0
    elif pattern == "close-volume-2x":
        if db is None:
            raise ValueError("close-volume-2x needs the database")
        table = exact_volumes(db)
        order = sorted(ranges, key=lambda r: (table[r], r))
        i = 0
        while i + 1 < len(order):
            a, b = order[i], order[i + 1]
            va, vb = table[a], table[b]
            if (vb - va) / va <= 2 * noise_budget:
                weights[min(a, b)] = 2.0
                i += 2
            else:
                i += 1
    else:
        raise ValueError(f"unknown query pattern {pattern!r}")
    total = sum(weights.values())
    return QueryDistribution(N, {r: w / total for r, w in weights.items()})


# -- CSV ------------------------------------------------------------------


def database_to_csv(db: Database) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["value", "count"])
    for value, count in enumerate(db.counts, start=1):
        writer.writerow([value, count])
    return buf.getvalue()


def database_from_csv(text: str) -> Database:
    """Parse the ``value,count`` format written by :func:`database_to_csv`."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["value", "count"]:
        raise ValueError(f"expected header 'value,count', got {header!r}")
    rows: dict[int, int] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or not "".join(row).strip():
            continue
        if len(row) != 2:
            raise ValueError(f"line {lineno}: expected 2 fields, got {len(row)}")
        try:
            value, count = int(row[0]), int(row[1])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        if value in rows:
            raise ValueError(f"line {lineno}: duplicate value {value}")
        rows[value] = count
    N = len(rows)
    if sorted(rows) != list(range(1, N + 1)):
        raise ValueError(f"values must be exactly 1..{N}, got {sorted(rows)}")
    return Database(tuple(rows[v] for v in range(1, N + 1)))


def database_from_records_csv(text: str, N: int | None = None) -> Database:
    """Build a database from a raw single-column CSV of record values.

    A non-numeric first line is treated as a header.  ``N`` defaults to the
    largest value seen; any value in 1..N without records is rejected.
    """
    values: list[int] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        cell = line.split(",")[0].strip()
        if not cell:
            continue
        try:
            values.append(int(cell))
        except ValueError:
            if lineno == 1:
                continue
            raise ValueError(f"line {lineno}: {cell!r} is not an integer value") from None
    if not values:
        raise ValueError("no record values found")
    N = max(values) if N is None else N
    if min(values) < 1 or max(values) > N:
        raise ValueError(f"record values must lie in 1..{N}")
    counts = Counter(values)
    empty = [v for v in range(1, N + 1) if counts[v] == 0]
    if empty:
        raise NonDenseDatabaseError(f"values without any record: {empty}")
    return Database(tuple(counts[v] for v in range(1, N + 1)))
