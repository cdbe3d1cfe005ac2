"""Simulated Flush+Reload traces of range queries and their aggregation into volumes.

A trace is two timelines of slot indices at which a fast reload was seen, one
per monitored code line.  The victim touches both lines once per returned
row, every ``hit_period_slots`` slots.  Noise comes from three places:

* false negatives: the victim's access lands inside the attacker's reload
  window.  The victim loop and the probe loop run at incommensurate rates, so
  the access phase drifts steadily through the slot; a hit is lost whenever
  the phase sits inside the window.  Each line misses a fraction
  ``fn_prob * load_factor`` of its hits.  The second line is touched a little
  later in the same iteration, so its loss window is shifted by half a window
  and about half of the first line's losses are still seen on it.
* false positives: speculative execution pulls a line in a few slots ahead of
  its real use, which shows up as an extra hit right next to a true one.
* interrupts: the victim is descheduled and the timeline shows a long gap.
* late synchronisation: the spy locks onto the query only after the victim's
  first ``sync_loss_hits`` iterations, so those rows are never seen.  This
  fixed loss makes every estimate a few rows short whatever its size, so the
  difference of two observations tends to exceed the observation of the
  difference.

Processing merges the two lines, keeps one hit per burst of activity and
discards traces containing an interrupt-sized gap.
"""
from __future__ import annotations

import json
import math
from bisect import bisect_left, bisect_right
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple

import numba
import numpy as np

from ._util import derive_seed, make_rng
from .model import Database, QueryDistribution, RangeId

# Phase advance per victim iteration, as a fraction of a probe slot.  The
# golden-ratio conjugate keeps the drift equidistributed for any trace length.
_PHASE_STEP = (math.sqrt(5.0) - 1.0) / 2.0
_PHASE_STEP_FIXED = int(_PHASE_STEP * 2**32)

INTERRUPT_GAP_PERIODS = 10


@dataclass(frozen=True)
class TraceNoiseModel:
    fn_prob: float = 0.004
    fp_rate: float = 0.5
    hit_period_slots: int = 10
    fp_proximity_slots: int | None = None
    interrupt_prob: float = 0.01
    load_factor: float = 1.0
    sync_loss_hits: int = 3

    def __post_init__(self) -> None:
        if not 0.0 <= self.fn_prob <= 1.0:
            raise ValueError("fn_prob must be in [0, 1]")
        if not 0.0 <= self.interrupt_prob <= 1.0:
            raise ValueError("interrupt_prob must be in [0, 1]")
        if self.fp_rate < 0:
            raise ValueError("fp_rate must be >= 0")
        if self.hit_period_slots < 2:
            raise ValueError("hit_period_slots must be >= 2")
        if self.load_factor < 1:
            raise ValueError("load_factor must be >= 1")
        if self.sync_loss_hits < 0:
            raise ValueError("sync_loss_hits must be >= 0")
        if self.fp_proximity_slots is None:
            object.__setattr__(self, "fp_proximity_slots", self.hit_period_slots // 2)
        if not 1 <= self.fp_proximity_slots < self.hit_period_slots:
            raise ValueError("fp_proximity_slots must be in [1, hit_period_slots)")

    @classmethod
    def noiseless(cls, hit_period_slots: int = 10) -> "TraceNoiseModel":
        return cls(fn_prob=0.0, fp_rate=0.0, interrupt_prob=0.0, hit_period_slots=hit_period_slots, sync_loss_hits=0)

    @property
    def effective_fn(self) -> float:
        return min(1.0, self.fn_prob * self.load_factor)

    @property
    def effective_fp_rate(self) -> float:
        return self.fp_rate * self.load_factor

    def to_dict(self) -> dict:
        return {
            "fn_prob": self.fn_prob,
            "fp_rate": self.fp_rate,
            "hit_period_slots": self.hit_period_slots,
            "fp_proximity_slots": self.fp_proximity_slots,
            "interrupt_prob": self.interrupt_prob,
            "load_factor": self.load_factor,
            "sync_loss_hits": self.sync_loss_hits,
        }


@dataclass(frozen=True)
class Trace:
    line_a: np.ndarray
    line_b: np.ndarray
    query: RangeId
    # ground truth, kept only so tests can check the simulator
    true_volume: int = field(compare=False)
    true_slots: np.ndarray = field(compare=False, repr=False)
    spurious: np.ndarray = field(compare=False, repr=False)


class _Draw(NamedTuple):
    """Every random choice behind one trace; the rest is deterministic."""

    v: int
    P: int
    start: int
    sync: int  # leading rows the spy never sees
    interrupt_at: int  # -1 when the trace has no interrupt
    gap: int
    miss_window: int  # reload-window width in 2**-32 slot units, 2**32 = always missed
    line_shift: int
    phase0: int
    spurious_a: np.ndarray
    spurious_b: np.ndarray


def _draw(db: Database, q: RangeId, model: TraceNoiseModel, seed: int) -> _Draw:
    rng = np.random.default_rng(seed)
    v = db.volume(q)
    P = model.hit_period_slots
    start = int(rng.integers(0, P))
    sync = min(model.sync_loss_hits, v)
    at, gap = -1, 0
    if v >= 2 and rng.random() < model.interrupt_prob:
        at = int(rng.integers(1, v))
        gap = int(rng.integers(2 * P, 4 * INTERRUPT_GAP_PERIODS * P + 1))
    fn = model.effective_fn
    window = min(int(fn * 2**32), 2**32)
    shift = int(fn * 2**31)
    phase0 = int(rng.integers(0, 2**32)) if 0 < window < 2**32 else 0

    empty = np.empty(0, dtype=np.int64)
    spur_a = spur_b = empty
    prox = model.fp_proximity_slots
    expected_fp = model.effective_fp_rate * v * P / 1000.0
    if expected_fp > 0 and v > 0 and prox >= 2:
        m = int(rng.poisson(expected_fp))
        k = rng.integers(0, v, size=m)
        spur = start + k * P + rng.integers(1, prox, size=m)
        if at >= 0:
            spur[k >= at] += gap
        on_a = rng.random(m) < 0.5
        seen = k >= sync
        spur_a, spur_b = np.unique(spur[on_a & seen]), np.unique(spur[~on_a & seen])
    return _Draw(v, P, start, sync, at, gap, window, shift, phase0, spur_a, spur_b)


def _build(d: _Draw, q: RangeId) -> Trace:
    slots = np.arange(d.v, dtype=np.int64)
    slots *= d.P
    slots += d.start
    if d.interrupt_at >= 0:
        slots[d.interrupt_at :] += d.gap
    if d.miss_window >= 2**32:
        hits_a = hits_b = slots[:0]
    elif d.miss_window > 0:
        # uint32 arithmetic wraps modulo one slot
        phase = np.arange(d.v, dtype=np.uint32)
        phase *= np.uint32(_PHASE_STEP_FIXED)
        phase += np.uint32(d.phase0)
        hits_a = slots[phase >= d.miss_window]
        phase += np.uint32(d.line_shift)
        hits_b = slots[phase >= d.miss_window]
    else:
        hits_a = hits_b = slots
    if d.sync:
        first_seen = slots[d.sync] if d.sync < d.v else slots[-1] + 1
        hits_a, hits_b = hits_a[hits_a >= first_seen], hits_b[hits_b >= first_seen]
    return Trace(
        line_a=_merge_sorted(hits_a, d.spurious_a),
        line_b=_merge_sorted(hits_b, d.spurious_b),
        query=q,
        true_volume=d.v,
        true_slots=slots,
        spurious=np.union1d(d.spurious_a, d.spurious_b),
    )


def simulate_trace(db: Database, q: RangeId, model: TraceNoiseModel, seed: int) -> Trace:
    return _build(_draw(db, q, model, seed), q)


@numba.njit(cache=True)
def _scan(v, P, start, sync, at, gap, window, shift, phase0, step, spur_a, spur_b, prox):  # pragma: no cover - jitted
    """Fused simulate + merge + count over a drawn trace without building arrays.

    Three sorted streams (present grid slots, spurious hits on each line) are
    merged on the fly.  Returns (accepted hit count, largest gap between hits).
    """
    mask = np.int64(4294967295)
    inf = np.iinfo(np.int64).max
    na = spur_a.shape[0]
    nb = spur_b.shape[0]
    ia = 0
    ib = 0
    k = v if window > mask else sync
    count = 0
    last = 0
    prev = 0
    seen = False
    max_gap = 0
    g = inf
    while k < v:
        p = (phase0 + k * step) & mask
        k += 1
        if window > 0 and p < window and ((p + shift) & mask) < window:
            continue
        g = start + (k - 1) * P + (gap if 0 <= at < k else 0)
        break
    while True:
        x = g
        if ia < na and spur_a[ia] < x:
            x = spur_a[ia]
        if ib < nb and spur_b[ib] < x:
            x = spur_b[ib]
        if x == inf:
            break
        if ia < na and spur_a[ia] == x:
            ia += 1
        if ib < nb and spur_b[ib] == x:
            ib += 1
        if g == x:
            g = inf
            while k < v:
                p = (phase0 + k * step) & mask
                k += 1
                if window > 0 and p < window and ((p + shift) & mask) < window:
                    continue
                g = start + (k - 1) * P + (gap if 0 <= at < k else 0)
                break
        if seen:
            if x - prev > max_gap:
                max_gap = x - prev
            if x - last >= prox:
                count += 1
                last = x
        else:
            count = 1
            last = x
            seen = True
        prev = x
    return count, max_gap


def _fast_estimate(db: Database, q: RangeId, model: TraceNoiseModel, seed: int) -> int | None:
    """Same result as simulating, filtering and processing the trace, in one pass."""
    d = _draw(db, q, model, seed)
    count, max_gap = _scan(
        d.v, d.P, d.start, d.sync, d.interrupt_at, d.gap, d.miss_window, d.line_shift, d.phase0,
        _PHASE_STEP_FIXED, d.spurious_a, d.spurious_b, model.fp_proximity_slots,
    )
    if max_gap > INTERRUPT_GAP_PERIODS * model.hit_period_slots:
        return None
    return int(count)


def _merge_sorted(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Union of two sorted integer arrays."""
    if b.size == 0:
        return a
    if a.size == 0:
        return b
    if b.size * 32 < a.size:
        pos = np.searchsorted(a, b)
        fresh = (pos == a.size) | (a[np.minimum(pos, a.size - 1)] != b)
        return np.insert(a, pos[fresh], b[fresh])
    lo, hi = min(a[0], b[0]), max(a[-1], b[-1])
    if hi - lo <= 16 * (a.size + b.size):
        # dense timelines: a presence mask beats sorting
        mask = np.zeros(hi - lo + 1, dtype=bool)
        mask[a - lo] = True
        mask[b - lo] = True
        return np.flatnonzero(mask) + lo
    merged = np.concatenate([a, b])
    merged.sort(kind="stable")
    keep = np.empty(merged.size, dtype=bool)
    keep[0] = True
    np.not_equal(merged[1:], merged[:-1], out=keep[1:])
    return merged[keep]


def _merged_hits(t: Trace) -> np.ndarray:
    return _merge_sorted(t.line_a, t.line_b)


def _count_accepted(hits: np.ndarray, prox: int) -> int:
    if hits.size == 0:
        return 0
    starts = np.flatnonzero(np.diff(hits) >= prox) + 1
    first = np.concatenate(([0], starts))
    last = np.concatenate((starts - 1, [hits.size - 1]))
    if np.all(hits[last] - hits[first] < prox):
        # every burst is shorter than the proximity window: one hit per burst
        return int(first.size)
    count, prev = 0, None
    for h in hits.tolist():
        if prev is None or h - prev >= prox:
            count += 1
            prev = h
    return count


def process_trace(t: Trace, model: TraceNoiseModel) -> int:
    """Count hits on either line, ignoring any hit that arrives sooner than
    ``fp_proximity_slots`` after the previously accepted one."""
    return _count_accepted(_merged_hits(t), model.fp_proximity_slots)


def has_interrupt(t: Trace, model: TraceNoiseModel) -> bool:
    hits = _merged_hits(t)
    if hits.size < 2:
        return False
    return bool(np.max(np.diff(hits)) > INTERRUPT_GAP_PERIODS * model.hit_period_slots)


@dataclass(frozen=True)
class PeakParams:
    min_count: int = 30
    neighborhood_width_ratio: float = 0.001


@dataclass(frozen=True)
class VolumeObservations:
    histogram: Mapping[int, int]
    peaks: tuple[int, ...]
    traces_used: int

    def __post_init__(self) -> None:
        peaks = tuple(sorted(set(int(p) for p in self.peaks)))
        missing = [p for p in peaks if p not in self.histogram]
        if missing:
            raise ValueError(f"peaks {missing} are not histogram volumes")
        object.__setattr__(self, "peaks", peaks)

    def to_json(self) -> str:
        return json.dumps(
            {
                "histogram": {str(v): int(c) for v, c in sorted(self.histogram.items())},
                "peaks": list(self.peaks),
                "traces_used": int(self.traces_used),
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "VolumeObservations":
        data = json.loads(text)
        try:
            hist = {int(k): int(c) for k, c in data["histogram"].items()}
            return cls(hist, tuple(int(p) for p in data["peaks"]), int(data["traces_used"]))
        except (KeyError, TypeError, AttributeError, ValueError) as exc:
            raise ValueError(f"malformed observations: {exc}") from None

    def without_peaks(self, dropped: Iterable[int]) -> "VolumeObservations":
        dropped = set(dropped)
        return VolumeObservations(self.histogram, tuple(p for p in self.peaks if p not in dropped), self.traces_used)


def find_peaks(histogram: Mapping[int, int], min_count: int, ratio: float) -> list[int]:
    """Volumes whose count reaches ``min_count`` and is the largest within
    ``[v(1-ratio), v(1+ratio)]``.  Equal counts go to the larger volume, since
    measurement loss only ever pushes estimates down."""
    vols = sorted(histogram)
    peaks = []
    for v in vols:
        c = histogram[v]
        if c < min_count:
            continue
        lo = bisect_left(vols, v * (1 - ratio))
        hi = bisect_right(vols, v * (1 + ratio))
        if all(histogram[u] < c or (histogram[u] == c and u <= v) for u in vols[lo:hi]):
            peaks.append(v)
    return peaks


def sample_queries(qdist: QueryDistribution, num_traces: int, seed: int) -> list[RangeId]:
    ranges = qdist.ranges()
    idx = make_rng(seed, 0).choice(len(ranges), size=num_traces, p=qdist.probabilities())
    return [ranges[i] for i in idx]


def collect_observations(
    db: Database,
    qdist: QueryDistribution,
    num_traces: int,
    model: TraceNoiseModel,
    peak_params: PeakParams = PeakParams(),
    seed: int = 0,
) -> VolumeObservations:
    if num_traces < 1:
        raise ValueError("num_traces must be >= 1")
    queries = sample_queries(qdist, num_traces, seed)
    estimates = [_fast_estimate(db, q, model, derive_seed(seed, 1, i)) for i, q in enumerate(queries)]
    return aggregate(estimates, peak_params)


def _estimate(db: Database, q: RangeId, model: TraceNoiseModel, seed: int) -> int | None:
    t = simulate_trace(db, q, model, seed)
    if has_interrupt(t, model):
        return None
    return process_trace(t, model)


def aggregate(estimates: Iterable[int | None], peak_params: PeakParams = PeakParams()) -> VolumeObservations:
    """Fold per-trace estimates (``None`` for dropped traces) into a histogram and peaks."""
    hist = Counter(e for e in estimates if e is not None)
    hist.pop(0, None)
    peaks = find_peaks(hist, peak_params.min_count, peak_params.neighborhood_width_ratio)
    return VolumeObservations(dict(hist), tuple(peaks), sum(hist.values()))
