"""Seeded evaluation runs: simulate, reconstruct, optionally refine, and score.

Every repetition draws its own seed from the scenario seed and its index, so
a report is a pure function of (scenario, seed).  Scores follow the usual
conventions for this attack: a database and its reversal are equivalent, a
coordinate counts as recovered when the reconstruction places a value on it
alone (not merged with a neighbour), and its error is ``100 * |recovered - truth| / truth``.
"""
from __future__ import annotations

import csv
import io
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from ._util import derive_seed, make_rng
from .cvp import CvpInfeasibleError, computed_range_volumes, refine, snap_candidate_volumes
from .graph import ObservedVolumes, RelativeWindow
from .match_extend import ReconstructionResult, match_and_extend, noisy_clique
from .model import (
    Database,
    QueryDistribution,
    RangeId,
    all_ranges,
    exact_volumes,
    generate_database,
    make_query_distribution,
)
from .traces import PeakParams, TraceNoiseModel, VolumeObservations, collect_observations

DROP_KINDS = ("none", "random", "random_peaks", "block_above_fraction", "block_full_range")
ALGORITHMS = ("noisy-clique", "match-extend")


# -- scoring -------------------------------------------------------------------


def error_percentage(recovered: float, truth: float) -> float:
    if truth == 0:
        raise ValueError("error percentage is undefined for a zero true volume")
    return 100.0 * abs(recovered - truth) / truth


@dataclass(frozen=True)
class Alignment:
    """Pairing of recovered values with true coordinates.

    ``positions[i]`` is the 0-based truth coordinate that ``recovered[i]`` is
    scored against.  Values that cover several true coordinates at once (a
    partial result that skipped a boundary) are not recovered values and are
    listed in ``merged`` instead.
    """

    recovered: tuple[int, ...]
    positions: tuple[int, ...]
    reflected: bool
    errors: tuple[float, ...]
    merged: tuple[int, ...] = ()

    @property
    def avg_error(self) -> float | None:
        return math.fsum(self.errors) / len(self.errors) if self.errors else None

    @property
    def max_error(self) -> float | None:
        return max(self.errors) if self.errors else None


def _segment(rec: tuple[int, ...], tru: tuple[int, ...]) -> tuple[tuple, list[tuple[int, int]]]:
    """Split a window of ``tru`` into ``len(rec)`` consecutive runs matching ``rec``.

    Minimises the summed relative error of each value against its run total,
    then prefers more single-coordinate runs, then an earlier start.  Returns
    the key and the runs as (first, end) index pairs.
    """
    N, L = len(tru), len(rec)
    S = [0, *np.cumsum(tru).tolist()]
    # best[k][j]: (cost, -singles, start) for the first k values ending at truth index j
    best: list[dict[int, tuple]] = [{a: (0.0, 0, a) for a in range(N - L + 1)}]
    back: list[dict[int, int]] = [{}]
    for k in range(L):
        cur: dict[int, tuple] = {}
        prev: dict[int, int] = {}
        for j, (cost, singles, a) in best[k].items():
            for e in range(j + 1, N - (L - k - 1) + 1):
                run = S[e] - S[j]
                key = (cost + abs(rec[k] - run) / run, singles - (e - j == 1), a)
                if e not in cur or key < cur[e]:
                    cur[e], prev[e] = key, j
        best.append(cur)
        back.append(prev)
    end = min(best[L], key=lambda e: (best[L][e], e))
    key = best[L][end]
    runs = []
    for k in range(L, 0, -1):
        j = back[k][end]
        runs.append((j, end))
        end = j
    return key, runs[::-1]


def align_for_scoring(recovered: Sequence[int] | Database, truth: Sequence[int] | Database) -> Alignment:
    """Place ``recovered`` against ``truth`` or its reversal, whichever scores better.

    Full-length results pair coordinate by coordinate.  Shorter results are
    laid over consecutive runs of true coordinates: a value covering a single
    coordinate is a recovered value, one covering several is a merge of
    neighbours and is not scored.  Ties go to the unreflected orientation,
    then to the earlier placement.
    """
    rec = tuple(int(v) for v in recovered)
    tru = tuple(int(v) for v in truth)
    N, L = len(tru), len(rec)
    if L == 0:
        return Alignment((), (), False, ())
    if L > N:
        raise ValueError(f"recovered has {L} values but the truth only {N}")
    if any(v <= 0 for v in rec):
        raise ValueError("recovered values must be positive")
    options = []
    for reflected in (False, True):
        oriented = tru[::-1] if reflected else tru
        key, runs = _segment(rec, oriented)
        options.append(((key[0], key[1], reflected, key[2]), reflected, runs))
    _, reflected, runs = min(options, key=lambda o: o[0])
    vals, pos, errs, merged = [], [], [], []
    for r, (a, b) in zip(rec, runs):
        if b - a == 1:
            p = N - 1 - a if reflected else a
            vals.append(r)
            pos.append(p)
            errs.append(error_percentage(r, tru[p]))
        else:
            merged.append(r)
    return Alignment(tuple(vals), tuple(pos), reflected, tuple(errs), tuple(merged))


def confidence_interval(samples: Sequence[float], level: float = 0.90) -> tuple[float, float]:
    """Student-t interval for the mean."""
    xs = [float(x) for x in samples]
    if len(xs) < 2:
        raise ValueError("a confidence interval needs at least 2 samples")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    mean = math.fsum(xs) / len(xs)
    sd = statistics.stdev(xs)
    if sd == 0:
        return mean, mean
    half = stats.t.ppf(0.5 + level / 2, len(xs) - 1) * sd / math.sqrt(len(xs))
    return mean - half, mean + half


# -- scenarios -----------------------------------------------------------------


@dataclass(frozen=True)
class DbSpec:
    kind: str = "gaussian"
    n: int = 100_000
    N: int = 12
    mean: float | None = None
    stddev: float | None = 3.0

    def generate(self, seed: int) -> Database:
        return generate_database(self.kind, self.n, self.N, seed, mean=self.mean, stddev=self.stddev)


@dataclass(frozen=True)
class DroppedRanges:
    """Which measurements never make it into the observations.

    ``random`` never issues ``k`` distinct ranges, ``random_peaks`` removes
    ``k`` observed peaks after aggregation, ``block_above_fraction`` never
    issues ranges whose volume exceeds ``fraction * n`` and
    ``block_full_range`` never issues [1, N].
    """

    kind: str = "none"
    k: int = 0
    fraction: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in DROP_KINDS:
            raise ValueError(f"unknown dropped_ranges kind {self.kind!r}")
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if not 0 < self.fraction <= 1:
            raise ValueError("fraction must be in (0, 1]")

    def never_issued(self, db: Database, seed: int) -> list[RangeId]:
        ranges = all_ranges(db.N)
        if self.kind == "random":
            k = min(self.k, len(ranges) - 1)
            idx = make_rng(seed, 0).choice(len(ranges), size=k, replace=False)
            return sorted(ranges[i] for i in idx)
        if self.kind == "block_above_fraction":
            table = exact_volumes(db)
            return [r for r in ranges if table[r] > self.fraction * db.n]
        if self.kind == "block_full_range":
            return [RangeId(1, db.N)]
        return []

    def drop_peaks(self, obs: VolumeObservations, seed: int) -> VolumeObservations:
        if self.kind != "random_peaks" or not obs.peaks:
            return obs
        k = min(self.k, len(obs.peaks) - 1)
        idx = make_rng(seed, 1).choice(len(obs.peaks), size=k, replace=False)
        return obs.without_peaks(obs.peaks[i] for i in idx)


@dataclass(frozen=True)
class Algorithm:
    name: str = "match-extend"
    budget: float = 0.002
    ell: int = 3

    def __post_init__(self) -> None:
        if self.name not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.name!r}")
        if self.budget < 0:
            raise ValueError("budget must be >= 0")

    def run(self, peaks: Sequence[int], N: int) -> ReconstructionResult:
        if self.name == "noisy-clique":
            return noisy_clique(peaks, N, self.budget)
        return match_and_extend(peaks, N, self.budget, ell=self.ell)


@dataclass(frozen=True)
class Scenario:
    id: str
    db: DbSpec = field(default_factory=DbSpec)
    query_dist: str = "uniform"
    noise: TraceNoiseModel = field(default_factory=TraceNoiseModel)
    traces: int = 10_000
    dropped_ranges: DroppedRanges = field(default_factory=DroppedRanges)
    algorithm: Algorithm = field(default_factory=Algorithm)
    use_cvp: bool = True
    repetitions: int = 10
    peak_params: PeakParams = field(default_factory=PeakParams)

    def __post_init__(self) -> None:
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.traces < 1:
            raise ValueError("traces must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise"] = self.noise.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        try:
            known = {"id", "db", "query_dist", "noise", "traces", "dropped_ranges", "algorithm",
                     "use_cvp", "repetitions", "peak_params"}
            extra = set(d) - known
            if extra:
                raise ValueError(f"unknown scenario fields {sorted(extra)}")
            return cls(
                id=str(d["id"]),
                db=DbSpec(**d.get("db", {})),
                query_dist=str(d.get("query_dist", "uniform")),
                noise=TraceNoiseModel(**d.get("noise", {})),
                traces=int(d.get("traces", 10_000)),
                dropped_ranges=DroppedRanges(**d.get("dropped_ranges", {})),
                algorithm=Algorithm(**d.get("algorithm", {})),
                use_cvp=bool(d.get("use_cvp", True)),
                repetitions=int(d.get("repetitions", 10)),
                peak_params=PeakParams(**d.get("peak_params", {})),
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed scenario: {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"scenario is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ValueError("scenario must be a JSON object")
        return cls.from_dict(d)


# -- running -------------------------------------------------------------------


@dataclass
class RepetitionResult:
    index: int
    seed: int
    truth: tuple[int, ...]
    reconstructed: tuple[int, ...]
    full_length: bool
    peaks: int
    never_issued: int
    alignment: Alignment
    # without CVP; equal to the scored numbers when CVP is off or not applicable
    raw_alignment: Alignment
    refined: tuple[int, ...] | None = None
    residual_before: float | None = None
    residual_after: float | None = None
    runtime: dict = field(default_factory=dict)

    @property
    def recovered(self) -> int:
        return len(self.alignment.errors)

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "seed": self.seed,
            "truth": list(self.truth),
            "reconstructed": list(self.reconstructed),
            "refined": None if self.refined is None else list(self.refined),
            "full_length": self.full_length,
            "recovered": self.recovered,
            "peaks": self.peaks,
            "never_issued": self.never_issued,
            "reflected": self.alignment.reflected,
            "errors_pct": list(self.alignment.errors),
            "merged": list(self.alignment.merged),
            "avg_error_pct": self.alignment.avg_error,
            "max_error_pct": self.alignment.max_error,
            "avg_error_pct_without_cvp": self.raw_alignment.avg_error,
            "residual_before": self.residual_before,
            "residual_after": self.residual_after,
            "runtime_seconds": dict(self.runtime),
        }


@dataclass
class EvaluationReport:
    scenario: Scenario
    seed: int
    repetitions: list[RepetitionResult]

    @property
    def N(self) -> int:
        return self.scenario.db.N

    @property
    def success_rate(self) -> float:
        return sum(r.recovered for r in self.repetitions) / (self.N * len(self.repetitions))

    @property
    def errors_pct(self) -> list[float]:
        return [e for r in self.repetitions for e in r.alignment.errors]

    @property
    def avg_error_pct(self) -> float | None:
        errs = self.errors_pct
        return math.fsum(errs) / len(errs) if errs else None

    @property
    def max_error_pct(self) -> float | None:
        errs = self.errors_pct
        return max(errs) if errs else None

    @property
    def avg_error_pct_without_cvp(self) -> float | None:
        errs = [e for r in self.repetitions for e in r.raw_alignment.errors]
        return math.fsum(errs) / len(errs) if errs else None

    def ci(self, level: float = 0.90) -> tuple[float, float] | None:
        per_rep = [r.alignment.avg_error for r in self.repetitions if r.alignment.errors]
        return confidence_interval(per_rep, level) if len(per_rep) >= 2 else None

    @property
    def runtime_seconds(self) -> dict:
        out: dict[str, float] = {}
        for r in self.repetitions:
            for stage, sec in r.runtime.items():
                out[stage] = out.get(stage, 0.0) + sec
        return out

    def summary(self) -> dict:
        return {
            "scenario": self.scenario.id,
            "seed": self.seed,
            "repetitions": len(self.repetitions),
            "success_rate": self.success_rate,
            "full_length_runs": sum(r.full_length for r in self.repetitions),
            "avg_error_pct": self.avg_error_pct,
            "max_error_pct": self.max_error_pct,
            "avg_error_pct_without_cvp": self.avg_error_pct_without_cvp,
            "ci90": self.ci(0.90),
            "runtime_seconds": self.runtime_seconds,
        }

    def to_dict(self, timings: bool = True) -> dict:
        summary = self.summary()
        reps = [r.to_dict() for r in self.repetitions]
        if not timings:
            summary.pop("runtime_seconds")
            for r in reps:
                r.pop("runtime_seconds")
        return {**summary, "scenario": self.scenario.to_dict(), "runs": reps}

    def to_json(self, timings: bool = True) -> str:
        return json.dumps(self.to_dict(timings), indent=2)

    def to_csv(self) -> str:
        """One row per repetition plus a summary row (index ``all``)."""
        cols = ["index", "seed", "full_length", "recovered", "peaks", "avg_error_pct", "max_error_pct",
                "avg_error_pct_without_cvp", "residual_before", "residual_after", "reconstructed", "truth"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.repetitions:
            d = r.to_dict()
            w.writerow([_cell(d[c]) for c in cols])
        w.writerow([
            "all", self.seed, sum(r.full_length for r in self.repetitions),
            sum(r.recovered for r in self.repetitions), "", _cell(self.avg_error_pct),
            _cell(self.max_error_pct), _cell(self.avg_error_pct_without_cvp), "", "", "", "",
        ])
        return buf.getvalue()


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (list, tuple)):
        return " ".join(str(x) for x in v)
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def repetition_seed(seed: int, index: int) -> int:
    return derive_seed(seed, index)


def simulate_repetition(s: Scenario, seed: int, index: int) -> tuple[Database, VolumeObservations, int]:
    """Database and (filtered) observations for one repetition, plus the count of never-issued ranges."""
    rs = repetition_seed(seed, index)
    db = s.db.generate(derive_seed(rs, 0))
    qdist: QueryDistribution = make_query_distribution(s.query_dist, db.N, db, s.algorithm.budget or 0.002)
    dropped = s.dropped_ranges.never_issued(db, derive_seed(rs, 1))
    if dropped:
        qdist = qdist.without(dropped)
    obs = collect_observations(db, qdist, s.traces, s.noise, s.peak_params, derive_seed(rs, 2))
    obs = s.dropped_ranges.drop_peaks(obs, derive_seed(rs, 3))
    return db, obs, len(dropped)


def score_repetition(
    s: Scenario,
    index: int,
    seed: int,
    db: Database,
    obs: VolumeObservations,
    never_issued: int = 0,
    algorithm: Algorithm | None = None,
) -> RepetitionResult:
    algorithm = algorithm or s.algorithm
    t0 = time.perf_counter()
    res = algorithm.run(obs.peaks, db.N)
    t1 = time.perf_counter()
    raw = align_for_scoring(res.segments, db.counts)
    scored, refined, before, after = raw, None, None, None
    if s.use_cvp and res.success and obs.peaks:
        observed = ObservedVolumes(obs.peaks, RelativeWindow(algorithm.budget))
        try:
            sol = refine(res.segments, observed)
        except CvpInfeasibleError:
            sol = None
        if sol is not None:
            target = np.array(snap_candidate_volumes(np.cumsum(res.segments).tolist(), observed))
            guess = np.array(computed_range_volumes(np.cumsum(res.segments).tolist()))
            before = float(np.linalg.norm(guess - target))
            after = sol.residual_l2
            refined = sol.x
            scored = align_for_scoring(refined, db.counts)
    t2 = time.perf_counter()
    return RepetitionResult(
        index=index,
        seed=repetition_seed(seed, index),
        truth=db.counts,
        reconstructed=tuple(res.segments),
        full_length=res.success,
        peaks=len(obs.peaks),
        never_issued=never_issued,
        alignment=scored,
        raw_alignment=raw,
        refined=refined,
        residual_before=before,
        residual_after=after,
        runtime={"reconstruct": t1 - t0, "refine": t2 - t1},
    )


def run_repetition(s: Scenario, seed: int, index: int) -> RepetitionResult:
    t0 = time.perf_counter()
    db, obs, dropped = simulate_repetition(s, seed, index)
    sim = time.perf_counter() - t0
    rep = score_repetition(s, index, seed, db, obs, dropped)
    rep.runtime = {"simulate": sim, **rep.runtime}
    return rep


def run_scenario(s: Scenario, seed: int) -> EvaluationReport:
    reps = [run_repetition(s, seed, i) for i in range(s.repetitions)]
    return EvaluationReport(s, seed, sorted(reps, key=lambda r: r.index))
