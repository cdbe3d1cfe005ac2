"""Match & Extend: grow a partial database by merging solutions from several cliques.

A clique of observed volumes decodes to a *candidate solution*: an ordered
list of volumes of neighbouring ranges.  When noise or unobserved ranges
keep the full-size clique from forming, partial candidates are aligned on an
approximately-equal common block, extended across places where one side
holds a finer subdivision of the other, and finally joined at the ends.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .graph import (
    ObservedVolumes,
    WindowPolicy,
    as_fraction,
    build_graph,
    clique_to_candidate,
    cliques_of_sizes,
    max_clique_size,
)
from .model import Database


@dataclass(frozen=True)
class CandidateSolution:
    segments: tuple[int, ...]

    def __post_init__(self) -> None:
        segs = tuple(int(s) for s in self.segments)
        if any(s <= 0 for s in segs):
            raise ValueError(f"segment volumes must be positive, got {list(segs)}")
        object.__setattr__(self, "segments", segs)

    def __len__(self) -> int:
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)

    def __getitem__(self, i):
        return self.segments[i]

    def reversed(self) -> "CandidateSolution":
        return CandidateSolution(self.segments[::-1])


def _segments(x: CandidateSolution | Sequence[int]) -> tuple[int, ...]:
    return x.segments if isinstance(x, CandidateSolution) else tuple(int(v) for v in x)


class _Eq:
    """Integer form of approximate equality: |u - v| * q <= min(u, v) * p."""

    def __init__(self, noise_budget, multiplier=1) -> None:
        t = as_fraction(noise_budget) * as_fraction(multiplier)
        if t < 0:
            raise ValueError("noise budget must be >= 0")
        self.p, self.q = t.numerator, t.denominator

    def __call__(self, u: int, v: int) -> bool:
        return abs(u - v) * self.q <= min(u, v) * self.p

    def matrix(self, a: Sequence[int], b: Sequence[int]) -> np.ndarray:
        """Boolean table eq(a[i], b[j])."""
        if max(max(a), max(b)) * max(self.p, self.q) < 2**62:
            A = np.asarray(a, dtype=np.int64)[:, None]
            B = np.asarray(b, dtype=np.int64)[None, :]
            return np.abs(A - B) * self.q <= np.minimum(A, B) * self.p
        return np.array([[self(x, y) for y in b] for x in a], dtype=bool)


@lru_cache(maxsize=64)
def _eq_for(noise_budget, multiplier) -> _Eq:
    return _Eq(noise_budget, multiplier)


class MatchResult(NamedTuple):
    """Common block (base values) and its half-open index spans in both inputs."""

    common: tuple[int, ...]
    base_span: tuple[int, int]
    cand_span: tuple[int, int]


def approx_lc_substring(base, cand, noise_budget, multiplier=1) -> MatchResult:
    """Longest run of positions where the two lists agree element-wise up to the budget.

    Ties go to the earliest start in ``base``, then the earliest start in ``cand``.
    """
    a, b = _segments(base), _segments(cand)
    if not a or not b:
        raise ValueError("both solutions must be non-empty")
    M = _eq_for(noise_budget, multiplier).matrix(a, b)
    # run[i, j] = length of the agreeing run ending at (i, j)
    run = np.zeros((len(a) + 1, len(b) + 1), dtype=np.int64)
    for i in range(len(a)):
        run[i + 1, 1:] = np.where(M[i], run[i, :-1] + 1, 0)
    best = int(run.max())
    if best == 0:
        return MatchResult((), (0, 0), (0, 0))
    # row-major argmax = earliest end in base, then in cand; equal length means earliest start
    i, j = np.unravel_index(int(np.argmax(run)), run.shape)
    return MatchResult(a[i - best : i], (int(i) - best, int(i)), (int(j) - best, int(j)))


def solution_sums(segments: Sequence[int]) -> list[int]:
    """Volumes of every contiguous run of segments."""
    out = []
    for i in range(len(segments)):
        s = 0
        for j in range(i, len(segments)):
            s += segments[j]
            out.append(s)
    return out


class Support(NamedTuple):
    """How well a solution accounts for the observations (smaller is better, compared in order).

    ``unexplained``: observed volumes that no contiguous run accounts for.
    ``missing``: contiguous runs whose volume no observation backs.
    ``residual``: sum of squared distances from each run's volume to the
    nearest observed volume (the least-squares fit used by refinement).
    """

    unexplained: int
    missing: int
    residual: int


def count_missing(segments: Sequence[int], observed: ObservedVolumes) -> int:
    return sum(1 for s in solution_sums(segments) if not observed.supports(s))


def backed_fraction(segments: Sequence[int], k: int, observed: ObservedVolumes) -> float:
    """Share of the contiguous runs containing segment ``k`` that some observation backs."""
    prefix = np.cumsum([0, *segments]).tolist()
    runs = [prefix[j] - prefix[i] for i in range(k + 1) for j in range(k + 1, len(segments) + 1)]
    return sum(observed.supports(int(r)) for r in runs) / len(runs)


def trim_unbacked_ends(segments: Sequence[int], observed: ObservedVolumes, min_backed: float = 0.5) -> tuple[int, ...]:
    """Drop end values that most runs through them leave unexplained.

    A true value sits inside many observed ranges, so nearly every run
    through it is backed even with some ranges never queried.  A value that
    an end join attached without real support (typically a multi-value run
    taken for a single value) is backed by few.  Ends are re-examined after
    each removal.
    """
    segs = tuple(int(v) for v in segments)
    while len(segs) > 1:
        first = backed_fraction(segs, 0, observed)
        last = backed_fraction(segs, len(segs) - 1, observed)
        if min(first, last) >= min_backed:
            break
        segs = segs[1:] if first <= last else segs[:-1]
    return segs


def _boundary_runs_backed(segs: Sequence[int], b: int, observed: ObservedVolumes) -> tuple[int, int]:
    """Backed count and total of the runs with an end on prefix boundary ``b``."""
    prefix = np.cumsum([0, *segs]).tolist()
    runs = [prefix[b] - prefix[i] for i in range(b)] + [prefix[j] - prefix[b] for j in range(b + 1, len(segs) + 1)]
    return sum(observed.supports(int(r)) for r in runs), len(runs)


def complete_from_observations(
    segments: Sequence[int], N: int, observed: ObservedVolumes, min_backed: float = 0.5
) -> tuple[int, ...]:
    """Lengthen a partial solution one value at a time using the observations directly.

    Two moves are tried: splitting a value into (x, value - x) and adding a
    new value y at either end, with x and y drawn from differences between
    observed volumes and runs of the solution.  A move creates one new
    boundary, and every run with an end on it is a range volume the move
    predicts.  The move with the largest backed share is taken when that
    share reaches ``min_backed``.  New values below the smallest observed
    volume are not proposed.  Stops at N values or when no move qualifies.
    """
    segs = tuple(int(v) for v in segments)
    vols = observed.volumes
    # a new value below every observation would put its boundary so close to a
    # neighbour that the new runs copy old ones and look backed for free
    floor = min(vols)
    while 0 < len(segs) < N:
        prefix = np.cumsum([0, *segs]).tolist()
        total, L = prefix[-1], len(segs)
        moves: list[tuple[tuple[int, ...], int]] = []
        for k, m in enumerate(segs):
            # x closes a run ending inside value k; m - x opens one starting there
            xs = {v - (prefix[k] - prefix[i]) for i in range(k + 1) for v in vols}
            xs |= {m - (v - (prefix[j] - prefix[k + 1])) for j in range(k + 1, L + 1) for v in vols}
            moves.extend((segs[:k] + (x, m - x) + segs[k + 1 :], k + 1) for x in sorted(xs) if floor <= x <= m - floor)
        heads = {v - prefix[j] for j in range(L + 1) for v in vols}
        tails = {v - (total - prefix[i]) for i in range(L + 1) for v in vols}
        moves.extend(((y, *segs), 0) for y in sorted(heads) if y >= floor)
        moves.extend(((*segs, y), L + 1) for y in sorted(tails) if y >= floor)
        best: tuple | None = None
        for cand, b in moves:
            backed, n_runs = _boundary_runs_backed(cand, b, observed)
            if backed < min_backed * n_runs:
                continue
            key = (-backed / n_runs, solution_support(cand, observed), cand)
            if best is None or key < best:
                best = key
        if best is None:
            break
        segs = best[2]
    return segs


def is_backed(segments: Sequence[int], observed: ObservedVolumes, min_backed: float = 0.5) -> bool:
    """Every value has at least ``min_backed`` of its runs backed by observations."""
    return all(backed_fraction(segments, k, observed) >= min_backed for k in range(len(segments)))


def solution_support(segments: Sequence[int], observed: ObservedVolumes) -> Support:
    sums = solution_sums(segments)
    missing = residual = 0
    explained: set[int] = set()
    for s in sums:
        w = observed.witnesses(s)
        if not w:
            missing += 1
        explained.update(w)
        residual += (s - observed.nearest(s)) ** 2
    return Support(len(observed.volumes) - len(explained), missing, residual)


@dataclass(frozen=True)
class MergeOutcome:
    merged: CandidateSolution | None
    missing_volumes: int
    reason: str = ""

    @property
    def aborted(self) -> bool:
        return self.merged is None


def _split_forward(x: int, other: Sequence[int], start: int, eq: _Eq) -> int | None:
    """End index e >= start+2 with sum(other[start:e]) approximately x."""
    s = other[start]
    for e in range(start + 1, len(other)):
        s += other[e]
        if eq(x, s):
            return e + 1
        if s > x and not eq(x, s):
            return None
    return None


def _split_backward(x: int, other: Sequence[int], end: int, eq: _Eq) -> int | None:
    """Start index s <= end-2 with sum(other[s:end]) approximately x."""
    total = other[end - 1]
    for s in range(end - 2, -1, -1):
        total += other[s]
        if eq(x, total):
            return s
        if total > x and not eq(x, total):
            return None
    return None


def merge(
    base,
    cand,
    noise_budget,
    observed: ObservedVolumes,
    multiplier=1,
) -> MergeOutcome:
    """Combine two candidate solutions that overlap on an approximately common block.

    The common block grows across approximately equal elements and across
    places where one side's element matches the sum of several consecutive
    elements of the other side (the finer subdivision is kept).  Leftover
    ends are then joined: an empty end on one side takes the other side's
    remainder; single leftover volumes a < b become (b - a, a) before the
    block or (a, b - a) after it when b - a is backed by an observation;
    anything else aborts.

    ``missing_volumes`` counts the boundaries created by subdivisions for
    which neither the run before nor the run after the boundary is backed by
    an observation.
    """
    A, B = _segments(base), _segments(cand)
    eq = _eq_for(noise_budget, multiplier)
    m = approx_lc_substring(A, B, noise_budget, multiplier)
    if not m.common:
        return MergeOutcome(None, 0, "no common block")
    comm = list(m.common)
    (bs, be), (cs, ce) = m.base_span, m.cand_span
    # subdivisions as (start index, parts): in comm for the tail, counted from
    # the right end of the finished head for the head
    tail_splits: list[tuple[int, int]] = []
    head_splits: list[tuple[int, int]] = []

    while be < len(A) and ce < len(B):
        x, y = A[be], B[ce]
        if eq(x, y):
            comm.append(x)
            be, ce = be + 1, ce + 1
        elif x > y and (e := _split_forward(x, B, ce, eq)) is not None:
            tail_splits.append((len(comm), e - ce))
            comm.extend(B[ce:e])
            be, ce = be + 1, e
        elif y > x and (e := _split_forward(y, A, be, eq)) is not None:
            tail_splits.append((len(comm), e - be))
            comm.extend(A[be:e])
            be, ce = e, ce + 1
        else:
            break

    head: list[int] = []  # built right to left
    while bs > 0 and cs > 0:
        x, y = A[bs - 1], B[cs - 1]
        if eq(x, y):
            head.append(x)
            bs, cs = bs - 1, cs - 1
        elif x > y and (s := _split_backward(x, B, cs, eq)) is not None:
            head_splits.append((len(head), cs - s))
            head.extend(reversed(B[s:cs]))
            bs, cs = bs - 1, s
        elif y > x and (s := _split_backward(y, A, bs, eq)) is not None:
            head_splits.append((len(head), bs - s))
            head.extend(reversed(A[s:bs]))
            bs, cs = s, cs - 1
        else:
            break

    pre = _join_end(A[:bs], B[:cs], observed, before=True)
    if pre is None:
        return MergeOutcome(None, 0, "prefixes cannot be joined")
    post = _join_end(A[be:], B[ce:], observed, before=False)
    if post is None:
        return MergeOutcome(None, 0, "suffixes cannot be joined")
    merged = pre + head[::-1] + comm + post

    # Each subdivision puts new boundaries inside one old element.  The runs
    # on either side of such a boundary are range volumes; the boundary is
    # backed when the observations contain at least one of them.
    h, p = len(head), len(pre)
    starts = [(p + h - k - n, n) for k, n in head_splits] + [(p + h + k, n) for k, n in tail_splits]
    prefix = np.cumsum([0, *merged]).tolist()
    total = prefix[-1]
    missing = sum(
        1
        for st, n in starts
        for b in range(st + 1, st + n)
        if not (observed.supports(int(prefix[b])) or observed.supports(int(total - prefix[b])))
    )
    return MergeOutcome(CandidateSolution(tuple(merged)), missing)


def _join_end(x: Sequence[int], y: Sequence[int], observed: ObservedVolumes, before: bool) -> list[int] | None:
    if not x:
        return list(y)
    if not y:
        return list(x)
    if len(x) == 1 and len(y) == 1:
        a, b = sorted((x[0], y[0]))
        if a < b and observed.supports(b - a):
            return [b - a, a] if before else [a, b - a]
    return None


class BestCandidate(NamedTuple):
    candidate: CandidateSolution
    outcome: MergeOutcome
    index: int


def find_best_candidate(
    base,
    candidates: Sequence,
    noise_budget,
    observed: ObservedVolumes,
    multiplier=1,
    min_length: int = 0,
    max_length: int | None = None,
    rank: str = "missing",
    log: list | None = None,
) -> BestCandidate | None:
    """Trial-merge ``base`` with each candidate and keep the most compatible one.

    With ``rank="missing"`` the fewest missing volumes wins, then the longer
    merged solution, then the merged solution leaving fewer observations
    unexplained, then the earlier candidate.  ``rank="support"`` compares
    unexplained observations first, then missing volumes, then length.
    Merges shorter than ``min_length`` or longer than ``max_length`` count
    as aborted.  Returns None when every merge aborts.
    """
    if rank not in ("missing", "support"):
        raise ValueError(f"unknown rank {rank!r}")
    best: BestCandidate | None = None
    best_key: tuple = ()
    for idx, c in enumerate(candidates):
        out = merge(base, c, noise_budget, observed, multiplier)
        if not out.aborted:
            L = len(out.merged)
            if L < min_length or (max_length is not None and L > max_length):
                out = MergeOutcome(None, out.missing_volumes, "merged length out of bounds")
        if log is not None:
            log.append(
                {
                    "candidate": list(_segments(c)),
                    "outcome": "aborted" if out.aborted else "merged",
                    "missing_volumes": out.missing_volumes,
                    "merged_length": 0 if out.aborted else len(out.merged),
                }
            )
        if out.aborted:
            continue
        if rank == "missing":
            key = (out.missing_volumes, -len(out.merged))
            if best is not None and key > best_key[:2]:
                continue
            key = key + (solution_support(out.merged.segments, observed).unexplained,)
        else:
            sup = solution_support(out.merged.segments, observed)
            key = (sup.unexplained, sup.missing, -len(out.merged), sup.residual)
        if best is None or key < best_key:
            cs = c if isinstance(c, CandidateSolution) else CandidateSolution(tuple(c))
            best, best_key = BestCandidate(cs, out, idx), key
    return best


# -- full reconstruction ------------------------------------------------------


@dataclass
class ReconstructionResult:
    """Outcome of a reconstruction run.

    ``segments`` is the recovered database when ``success``; otherwise the
    longest partial solution found.
    """

    N: int
    segments: tuple[int, ...]
    success: bool
    support: Support | None = None
    base_clique: tuple[int, ...] = ()
    merges: int = 0
    cliques_truncated: bool = False
    trimmed: int = 0
    completed: int = 0
    log: list[dict] = field(default_factory=list, repr=False)

    @property
    def recovered_length(self) -> int:
        return len(self.segments)

    def database(self) -> Database:
        if not self.success:
            raise ValueError(f"reconstruction incomplete: {self.recovered_length} of {self.N} values")
        return Database(self.segments)

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "success": self.success,
            "recovered_length": self.recovered_length,
            "counts": list(self.segments),
            "unexplained_volumes": None if self.support is None else self.support.unexplained,
            "missing_volumes": None if self.support is None else self.support.missing,
            "residual": None if self.support is None else self.support.residual,
            "base_clique": list(self.base_clique),
            "merges": self.merges,
            "cliques_truncated": self.cliques_truncated,
            "trimmed": self.trimmed,
            "completed": self.completed,
        }


def _rank_cliques(cliques: Iterable[tuple[int, ...]], observed: ObservedVolumes) -> list[tuple[tuple[int, ...], Support]]:
    """Order cliques by size (desc), then how well they explain the observations, then lexicographically."""
    scored = [(c, solution_support(clique_to_candidate(c), observed)) for c in cliques]
    scored.sort(key=lambda cs: (-len(cs[0]), cs[1], cs[0]))
    return scored


def _clique_pool(g, N: int, slack: int, max_count: int) -> tuple[list[tuple[tuple[int, ...], Support]], bool]:
    """Ranked cliques with sizes in [k - slack, k], k = min(max clique size, N)."""
    k = min(max_clique_size(g), N)
    listing = cliques_of_sizes(g, max(1, k - slack), max(1, k), max_count)
    return _rank_cliques(listing.cliques, g.observed()), listing.truncated


def noisy_clique(
    V: Iterable[int],
    N: int,
    noise_budget,
    window: WindowPolicy | None = None,
    max_count: int = 50_000,
) -> ReconstructionResult:
    """Single-clique reconstruction: decode the best largest clique of the noisy graph.

    Cliques larger than N cannot be a database of N values, so the clique
    size is capped at N.  Among the largest cliques the one that leaves the
    fewest observations unexplained (then fewest unbacked runs, then
    lexicographically smallest) is used.  Succeeds only if it has N nodes.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    g = build_graph(V, noise_budget, window)
    ranked, truncated = _clique_pool(g, N, 0, max_count)
    clique, support = ranked[0]
    segs = tuple(clique_to_candidate(clique))
    return ReconstructionResult(N, segs, len(segs) == N, support, clique, 0, truncated)


def match_and_extend(
    V: Iterable[int],
    N: int,
    noise_budget,
    ell: int = 3,
    window: WindowPolicy | None = None,
    multiplier=1,
    max_cliques: int = 50_000,
    max_starts: int = 16,
    keep_log: bool = False,
    complete: bool = True,
) -> ReconstructionResult:
    """Reconstruct a length-N database from noisy observed volumes.

    All cliques of sizes K..K-ell (K the largest clique size, capped at N)
    are decoded into candidate solutions.  Starting from a base candidate,
    the best merge partner (either orientation) is merged in repeatedly
    until the solution has N values or no merge lengthens it.  Several
    bases are tried, best-supported first.  Each outcome loses end values that
    most runs through them leave unexplained (see ``trim_unbacked_ends``); if
    an inner value is still poorly backed the merges are discarded and the
    base clique alone stands.  The full-length result that leaves the fewest
    observations unexplained (then fewest unbacked runs) is returned, ties
    going to the smaller least-squares residual; failing that, the longest
    partial result, lengthened by ``complete_from_observations`` when
    ``complete`` is set.  A completion reaching N values with every value
    backed counts as a success.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if ell < 0:
        raise ValueError("ell must be >= 0")
    g = build_graph(V, noise_budget, window)
    observed = g.observed()
    ranked, truncated = _clique_pool(g, N, ell, max_cliques)

    pool: list[CandidateSolution] = []
    seen: set[tuple[int, ...]] = set()
    for c, _ in ranked:
        seg = tuple(clique_to_candidate(c))
        for s in (seg, seg[::-1]):
            if s not in seen:
                seen.add(s)
                pool.append(CandidateSolution(s))

    log: list[dict] = []
    best: ReconstructionResult | None = None
    partial: ReconstructionResult | None = None
    tried: set[tuple[int, ...]] = set()
    for start, (clique, _) in enumerate(ranked[:max_starts]):
        base = CandidateSolution(tuple(clique_to_candidate(clique)))
        merges = 0
        while len(base) < N:
            step_log: list | None = [] if keep_log else None
            pick = find_best_candidate(
                base, pool, noise_budget, observed, multiplier,
                min_length=len(base) + 1, max_length=N, rank="support", log=step_log,
            )
            if step_log:
                for rec in step_log:
                    rec["start"] = start
                    rec["base"] = list(base.segments)
                log.extend(step_log)
            if pick is None:
                break
            base = pick.outcome.merged
            merges += 1
        if base.segments in tried:
            continue
        tried.add(base.segments)
        segs = trim_unbacked_ends(base.segments, observed)
        if not is_backed(segs, observed):
            # the merges went astray inside the solution; keep what the clique itself says
            segs = trim_unbacked_ends(clique_to_candidate(clique), observed)
        res = ReconstructionResult(
            N, segs, len(segs) == N, solution_support(segs, observed),
            clique, merges, truncated, len(base) - len(segs),
        )
        if res.success:
            if best is None or res.support < best.support:
                best = res
            if res.support.unexplained == 0 and res.support.missing == 0:
                break
        elif partial is None or (-res.recovered_length, res.support) < (-partial.recovered_length, partial.support):
            partial = res
    out = best if best is not None else partial
    assert out is not None
    if not out.success and complete:
        segs = complete_from_observations(out.segments, N, observed)
        if len(segs) > len(out.segments) and is_backed(segs, observed):
            out = replace(
                out, segments=segs, success=len(segs) == N, support=solution_support(segs, observed),
                completed=len(segs) - len(out.segments),
            )
    out.log = log
    return out
