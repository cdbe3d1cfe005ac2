"""Reconstruct a database column from noisy range-query volumes.

The pipeline: simulated cache side-channel traces give noisy volume
estimates (:mod:`volrecon.traces`), those become a graph whose cliques are
candidate solutions (:mod:`volrecon.graph`), candidates are merged into a
full database (:mod:`volrecon.match_extend`) and finally projected onto the
lattice of consistent databases (:mod:`volrecon.cvp`).
"""
from .cvp import CvpInfeasibleError, CvpInstance, RefinedSolution, build_cvp_instance, refine, solve_cvp
from .graph import AbsoluteWindow, RelativeWindow, VolumeGraph, approx_equal, build_graph, find_maximal_cliques
from .match_extend import ReconstructionResult, match_and_extend, merge, noisy_clique
from .model import Database, RangeId, all_ranges, exact_volumes, generate_database, make_query_distribution
from .traces import TraceNoiseModel, VolumeObservations, collect_observations, simulate_trace, process_trace

__all__ = [
    "AbsoluteWindow",
    "CvpInfeasibleError",
    "CvpInstance",
    "Database",
    "RangeId",
    "ReconstructionResult",
    "RefinedSolution",
    "RelativeWindow",
    "TraceNoiseModel",
    "VolumeGraph",
    "VolumeObservations",
    "all_ranges",
    "approx_equal",
    "build_cvp_instance",
    "build_graph",
    "collect_observations",
    "exact_volumes",
    "find_maximal_cliques",
    "generate_database",
    "make_query_distribution",
    "match_and_extend",
    "merge",
    "noisy_clique",
    "process_trace",
    "refine",
    "simulate_trace",
    "solve_cvp",
]
