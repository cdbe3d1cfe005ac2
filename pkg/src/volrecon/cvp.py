"""Noise reduction by projecting range volumes onto the lattice of consistent databases.

Every range volume is a sum of consecutive counts, so a list of (noisy)
range volumes ``t`` should be close to ``A x`` for the 0/1 matrix ``A`` whose
row for range [i, j] has ones in columns i..j.  The refined database is the
integer ``x >= 1`` minimising ``||A x - t||_2``, found by sphere decoding
(Schnorr-Euchner enumeration over the Cholesky factor of ``A^T A``).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .graph import ObservedVolumes
from .model import Database, RangeId, all_ranges


class CvpInfeasibleError(RuntimeError):
    """No dense integer point found within the (enlarged) search radius."""


def range_matrix(N: int) -> np.ndarray:
    """0/1 matrix with one row per range in canonical order, ones over the covered values."""
    rows = all_ranges(N)
    A = np.zeros((len(rows), N), dtype=np.int64)
    for k, r in enumerate(rows):
        A[k, r.lo - 1 : r.hi] = 1
    return A


@dataclass(frozen=True)
class CvpInstance:
    N: int
    target: tuple[int, ...]
    T: int

    def __post_init__(self) -> None:
        if self.N < 1:
            raise ValueError("N must be >= 1")
        target = tuple(int(v) for v in self.target)
        if len(target) != self.N * (self.N + 1) // 2:
            raise ValueError(f"target needs {self.N * (self.N + 1) // 2} entries, got {len(target)}")
        object.__setattr__(self, "target", target)

    @property
    def A(self) -> np.ndarray:
        return range_matrix(self.N)

    @property
    def row_order(self) -> list[RangeId]:
        return all_ranges(self.N)

    def augmented_basis(self) -> np.ndarray:
        """Square basis A' = [A | T on the composite rows]: full rank, same first N columns."""
        n_rows = len(self.target)
        Ap = np.zeros((n_rows, n_rows), dtype=np.int64)
        Ap[:, : self.N] = self.A
        for k in range(self.N, n_rows):
            Ap[k, k] = self.T
        return Ap

    def to_json(self) -> str:
        return json.dumps({"N": self.N, "target": list(self.target), "T": self.T})

    @classmethod
    def from_json(cls, text: str) -> "CvpInstance":
        try:
            d = json.loads(text)
            return cls(int(d["N"]), tuple(int(v) for v in d["target"]), int(d["T"]))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ValueError(f"malformed CVP instance: {exc}") from None


@dataclass(frozen=True)
class RefinedSolution:
    x: tuple[int, ...]
    cost: int  # squared L2 residual, exact
    residual_l2: float
    residual_linf: int

    def database(self) -> Database:
        return Database(self.x)


def residual(inst: CvpInstance, x: Sequence[int]) -> np.ndarray:
    return inst.A @ np.asarray(x, dtype=np.int64) - np.asarray(inst.target, dtype=np.int64)


def _solution(inst: CvpInstance, x: Sequence[int]) -> RefinedSolution:
    r = residual(inst, x)
    cost = int(r @ r)
    return RefinedSolution(tuple(int(v) for v in x), cost, math.sqrt(cost), int(np.abs(r).max()))


def snap_candidate_volumes(elementary: Sequence[int], observed: Iterable[int] | ObservedVolumes) -> list[int]:
    """Range volumes implied by prefix volumes, each replaced by the nearest observed volume.

    Ties go to the smaller observed volume.  Output follows canonical row order.
    When ``observed`` carries a window, a computed volume that no observation
    backs is kept as is: the range was never seen, so nothing should pull it.
    """
    elementary = [int(v) for v in elementary]
    if any(b <= a for a, b in zip([0, *elementary], elementary)):
        raise ValueError("prefix volumes must be positive and strictly increasing")
    obs = observed if isinstance(observed, ObservedVolumes) else ObservedVolumes(tuple(observed), _NO_WINDOW)
    if not obs.volumes:
        raise ValueError("observed volume set is empty")
    keep_unbacked = obs.window is not _NO_WINDOW
    prefix = [0, *elementary]
    out = []
    for r in all_ranges(len(elementary)):
        d = prefix[r.hi] - prefix[r.lo - 1]
        out.append(d if keep_unbacked and not obs.supports(d) else obs.nearest(d))
    return out


def computed_range_volumes(elementary: Sequence[int]) -> list[int]:
    prefix = [0, *[int(v) for v in elementary]]
    return [prefix[r.hi] - prefix[r.lo - 1] for r in all_ranges(len(elementary))]


def build_cvp_instance(N: int, candidates: Sequence[int], T: int | None = None) -> CvpInstance:
    """Instance for the given candidate volumes; T defaults to 100 * max(candidates)."""
    if T is None:
        T = 100 * max(int(v) for v in candidates)
    return CvpInstance(N, tuple(candidates), int(T))


def solve_cvp(inst: CvpInstance, radius: float | None = None, max_doublings: int = 4) -> RefinedSolution:
    """Integer x >= 1 minimising ||A x - target||_2; ties go to the lexicographically smallest x.

    The default search radius is the residual of the rounded real
    least-squares point (clamped to >= 1), so a solution always exists in
    exact arithmetic.  A radius that turns out too small, explicit or
    default, is doubled up to ``max_doublings`` times before giving up.
    """
    A = inst.A.astype(float)
    t = np.asarray(inst.target, dtype=float)
    G = A.T @ A
    x_hat = np.linalg.solve(G, A.T @ t)
    R = np.linalg.cholesky(G).T  # upper triangular, G = R^T R
    r_hat = A @ x_hat - t
    base = float(r_hat @ r_hat)  # ||A x_hat - t||^2, computed directly to avoid cancellation

    start = np.maximum(np.rint(x_hat), 1).astype(np.int64)
    start_sol = _solution(inst, start)
    bound = float(start_sol.cost) if radius is None else float(radius) ** 2
    for attempt in range(max_doublings + 1):
        best = _enumerate(inst, R, x_hat, base, bound)
        if best is not None:
            return best
        bound *= 4.0  # radius doubles
    raise CvpInfeasibleError(f"no dense solution within radius {math.sqrt(bound / 4.0):.3g}")


def _enumerate(inst: CvpInstance, R: np.ndarray, x_hat: np.ndarray, base: float, bound: float) -> RefinedSolution | None:
    """Depth-first Schnorr-Euchner search over x >= 1 with ||A x - t||^2 <= bound."""
    N = inst.N
    A = inst.A
    tgt = np.asarray(inst.target, dtype=np.int64)
    diag = np.diag(R)
    x = np.zeros(N, dtype=np.int64)
    best: list = [None, None]  # (cost, x tuple)
    limit = [bound - base]
    scale = float(np.abs(tgt).max()) ** 2  # rounding in the centre updates grows with the target size

    def slack() -> float:
        return 1e-9 * (1.0 + abs(limit[0]) + abs(base)) + 1e-12 * scale

    def visit(i: int, partial: float) -> None:
        # centre of coordinate i given the already-fixed x[i+1:]
        c = x_hat[i] - float(R[i, i + 1 :] @ (x[i + 1 :] - x_hat[i + 1 :])) / diag[i]
        for v in _zigzag(c):
            step = (diag[i] * (v - c)) ** 2
            p = partial + step
            if p > limit[0] + slack():
                return
            x[i] = v
            if i == 0:
                r = A @ x - tgt
                cost = int(r @ r)
                key = (cost, tuple(int(u) for u in x))
                if best[0] is None or key < best[0]:
                    best[0] = key
                    limit[0] = min(limit[0], cost - base)
            else:
                visit(i - 1, p)

    visit(N - 1, 0.0)
    if best[0] is None:
        return None
    return _solution(inst, best[0][1])


def _zigzag(c: float):
    """Integers >= 1 in order of increasing distance from c (smaller first on ties)."""
    down = math.floor(c)
    up = down + 1
    if down < 1:
        down, up = 0, max(up, 1)
    while True:
        use_down = down >= 1 and (c - down <= up - c)
        if use_down:
            yield down
            down -= 1
        else:
            yield up
            up += 1


def refine(db_guess: Database | Sequence[int], observed: Iterable[int] | ObservedVolumes, T: int | None = None) -> RefinedSolution:
    """Snap the guess's range volumes to observations and solve the lattice problem."""
    counts = list(db_guess.counts if isinstance(db_guess, Database) else db_guess)
    elementary = np.cumsum(counts).tolist()
    cands = snap_candidate_volumes(elementary, observed)
    return solve_cvp(build_cvp_instance(len(counts), cands, T))


class _NoWindow:
    """Window placeholder for nearest-volume lookups that never test membership."""

    scale = 1

    def scaled(self, v: int) -> tuple[int, int]:
        return v, v

    def contains(self, v: int, d: int) -> bool:
        return v == d


_NO_WINDOW = _NoWindow()
