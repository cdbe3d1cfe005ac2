"""Command-line entry point: ``volrecon {simulate,reconstruct,evaluate,experiment}``.

Exit codes: 0 success, 1 usage or input error, 2 partial reconstruction.
"""
from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path
from typing import Sequence

from ._util import atomic_write_text
from .experiments import Scenario, align_for_scoring, run_scenario
from .graph import AbsoluteWindow, ObservedVolumes, RelativeWindow
from .match_extend import match_and_extend, noisy_clique
from .cvp import CvpInfeasibleError, refine
from .model import (
    QUERY_PATTERNS,
    Database,
    database_from_csv,
    database_from_records_csv,
    database_to_csv,
    generate_database,
    make_query_distribution,
)
from .traces import PeakParams, TraceNoiseModel, VolumeObservations, collect_observations

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL = 0, 1, 2
BUNDLED_PREFIX = "bundled:"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with 2, which means "partial" here
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


def _write(path: str, text: str) -> None:
    try:
        atomic_write_text(path, text)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc.strerror}") from None


def load_database(path: str) -> Database:
    """``value,count`` histogram CSV, or a raw single-column CSV of record values."""
    text = _read(path)
    first = text.lstrip().splitlines()[0].replace(" ", "").lower() if text.strip() else ""
    try:
        if first == "value,count":
            return database_from_csv(text)
        return database_from_records_csv(text)
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None


def load_volumes(path: str) -> list[int]:
    """Observed volumes from an observations JSON, a JSON list, or whitespace/comma separated integers."""
    text = _read(path)
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        data = None
    try:
        if isinstance(data, dict):
            vols = list(VolumeObservations.from_json(text).peaks)
        elif isinstance(data, list):
            vols = [int(v) for v in data]
        else:
            vols = [int(tok) for tok in text.replace(",", " ").split()]
    except (ValueError, TypeError) as exc:
        raise UsageError(f"{path}: cannot parse volumes: {exc}") from None
    if not vols:
        raise UsageError(f"{path}: no volumes found")
    if any(v <= 0 for v in vols):
        raise UsageError(f"{path}: volumes must be positive")
    return vols


def load_scenario(ref: str) -> Scenario:
    if ref.startswith(BUNDLED_PREFIX):
        name = ref[len(BUNDLED_PREFIX):]
        try:
            text = resources.files("volrecon.scenarios").joinpath(f"{name}.json").read_text()
        except (FileNotFoundError, OSError):
            raise UsageError(f"no bundled scenario {name!r}; available: {', '.join(bundled_scenarios())}") from None
    else:
        text = _read(ref)
    try:
        return Scenario.from_json(text)
    except ValueError as exc:
        raise UsageError(f"{ref}: {exc}") from None


def bundled_scenarios() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("volrecon.scenarios").iterdir() if p.name.endswith(".json"))


def _db_text(segments: Sequence[int], fmt: str) -> str:
    if fmt == "json":
        return json.dumps({"counts": list(segments)}) + "\n"
    if not segments:
        return "value,count\n"
    return database_to_csv(Database(tuple(segments)))


# -- subcommands ------------------------------------------------------------


def cmd_simulate(args) -> int:
    if args.db:
        db = load_database(args.db)
    else:
        if args.n is None or args.N is None:
            raise UsageError("simulate needs --db or both --n and --N")
        try:
            db = generate_database(args.kind, args.n, args.N, args.seed, mean=args.mean, stddev=args.stddev)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    if args.zero_noise:
        model = TraceNoiseModel.noiseless()
    else:
        try:
            model = TraceNoiseModel(
                fn_prob=args.fn_prob, fp_rate=args.fp_rate, interrupt_prob=args.interrupt_prob,
                load_factor=args.load_factor, sync_loss_hits=args.sync_loss,
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    qdist = make_query_distribution(args.query_dist, db.N, db, args.noise_budget)
    obs = collect_observations(db, qdist, args.traces, model, PeakParams(args.min_count, args.peak_ratio), args.seed)
    _write(args.out, obs.to_json() + "\n")
    print(f"peaks: {len(obs.peaks)}  traces used: {obs.traces_used}/{args.traces}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    vols = load_volumes(args.observations)
    window = None
    if args.window_abs:
        below, above = args.window_abs
        window = AbsoluteWindow(below, above)
    if args.algorithm == "noisy-clique":
        res = noisy_clique(vols, args.N, args.noise_budget, window=window)
    else:
        res = match_and_extend(vols, args.N, args.noise_budget, ell=args.ell, window=window, keep_log=True)
    segments = list(res.segments)
    summary = {"success": res.success, "recovered_length": res.recovered_length, "N": args.N,
               "reconstructed": segments}
    if args.cvp:
        if not res.success:
            print("skipping refinement: reconstruction is partial", file=sys.stderr)
        else:
            try:
                sol = refine(segments, ObservedVolumes(tuple(vols), window or RelativeWindow(args.noise_budget)))
            except CvpInfeasibleError as exc:
                print(f"refinement failed: {exc}", file=sys.stderr)
            else:
                segments = list(sol.x)
                summary.update(refined=segments, residual_l2=sol.residual_l2, residual_linf=sol.residual_linf)
    _write(args.out, _db_text(segments, args.format))
    log_path = args.log or f"{args.out}.log.jsonl"
    lines = [json.dumps({"event": "summary", **summary})]
    lines += [json.dumps({"event": "merge", **rec}) for rec in res.log]
    _write(log_path, "\n".join(lines) + "\n")
    status = "full" if res.success else "partial"
    print(f"{status} reconstruction: {len(res.segments)}/{args.N} values -> {args.out}")
    return EXIT_OK if res.success else EXIT_PARTIAL


def cmd_evaluate(args) -> int:
    truth = load_database(args.db)
    text = _read(args.recovered)
    try:
        if text.lstrip().startswith("{"):
            rec = [int(v) for v in json.loads(text)["counts"]]
        else:
            rec = list(database_from_csv(text).counts) if text.strip() != "value,count" else []
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"{args.recovered}: {exc}") from None
    try:
        a = align_for_scoring(rec, truth.counts)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report = {
        "N": truth.N,
        "recovered": len(a.errors),
        "success_rate": len(a.errors) / truth.N,
        "reflected": a.reflected,
        "positions": [p + 1 for p in a.positions],
        "errors_pct": list(a.errors),
        "merged": list(a.merged),
        "avg_error_pct": a.avg_error,
        "max_error_pct": a.max_error,
    }
    if args.format == "csv":
        out = "value,recovered,truth,error_pct\n" + "".join(
            f"{p + 1},{r},{truth.counts[p]},{e:.6g}\n" for r, p, e in zip(a.recovered, a.positions, a.errors)
        )
    else:
        out = json.dumps(report, indent=2) + "\n"
    if args.out:
        _write(args.out, out)
    sys.stdout.write(out)
    return EXIT_OK if len(a.errors) == truth.N else EXIT_PARTIAL


def cmd_experiment(args) -> int:
    s = load_scenario(args.scenario)
    if args.repetitions is not None:
        if args.repetitions < 1:
            raise UsageError("--repetitions must be >= 1")
        s = Scenario.from_dict({**s.to_dict(), "repetitions": args.repetitions})
    report = run_scenario(s, args.seed)
    out = Path(args.out)
    _write(str(out / "report.json"), report.to_json(timings=False) + "\n")
    _write(str(out / "report.csv"), report.to_csv())
    _write(str(out / "runtime.json"), json.dumps(report.runtime_seconds, indent=2) + "\n")
    if args.format == "csv":
        sys.stdout.write(report.to_csv())
    else:
        summary = report.summary()
        summary.pop("runtime_seconds")
        print(json.dumps(summary, indent=2))
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="volrecon", description="Reconstruct a database column from noisy range-query volumes.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate side-channel traces and write observed volumes")
    s.add_argument("--db", help="database CSV (value,count) or raw column of record values")
    s.add_argument("--kind", default="gaussian", choices=["uniform", "gaussian"])
    s.add_argument("--n", type=int, help="record count when generating a database")
    s.add_argument("--N", type=int, help="range size when generating a database")
    s.add_argument("--mean", type=float)
    s.add_argument("--stddev", type=float, default=3.0)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--traces", type=int, default=10_000)
    s.add_argument("--query-dist", default="uniform", choices=QUERY_PATTERNS)
    s.add_argument("--noise-budget", type=float, default=0.002, help="closeness used by close-volume-2x")
    s.add_argument("--zero-noise", action="store_true")
    defaults = TraceNoiseModel()
    s.add_argument("--fn-prob", type=float, default=defaults.fn_prob)
    s.add_argument("--fp-rate", type=float, default=defaults.fp_rate)
    s.add_argument("--interrupt-prob", type=float, default=defaults.interrupt_prob)
    s.add_argument("--load-factor", type=float, default=defaults.load_factor)
    s.add_argument("--sync-loss", type=int, default=defaults.sync_loss_hits)
    s.add_argument("--min-count", type=int, default=PeakParams().min_count)
    s.add_argument("--peak-ratio", type=float, default=PeakParams().neighborhood_width_ratio)
    s.add_argument("--out", required=True, help="observations JSON path")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("reconstruct", help="rebuild the database from observed volumes")
    r.add_argument("observations", help="observations JSON, JSON list, or plain list of volumes")
    r.add_argument("--N", type=int, required=True)
    r.add_argument("--noise-budget", type=float, default=0.002)
    r.add_argument("--window-abs", type=int, nargs=2, metavar=("BELOW", "ABOVE"),
                   help="fixed edge window [v-BELOW, v+ABOVE] instead of the relative one")
    r.add_argument("--ell", type=int, default=3)
    r.add_argument("--algorithm", default="match-extend", choices=["match-extend", "noisy-clique"])
    r.add_argument("--cvp", action="store_true", help="refine a full reconstruction by lattice projection")
    r.add_argument("--format", default="csv", choices=["csv", "json"])
    r.add_argument("--out", required=True, help="recovered database path")
    r.add_argument("--log", help="JSON-lines run log (default: OUT.log.jsonl)")
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("evaluate", help="score a recovered database against the truth")
    e.add_argument("recovered", help="recovered database (CSV or JSON from reconstruct)")
    e.add_argument("--db", required=True, help="true database CSV")
    e.add_argument("--format", default="json", choices=["json", "csv"])
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("experiment", help="run a seeded evaluation scenario")
    x.add_argument("scenario", help=f"scenario JSON path or {BUNDLED_PREFIX}NAME")
    x.add_argument("--seed", type=int, required=True)
    x.add_argument("--repetitions", type=int)
    x.add_argument("--format", default="json", choices=["json", "csv"])
    x.add_argument("--out", required=True, help="output directory")
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    for name in ("N", "n", "traces"):
        if getattr(args, name, None) is not None and getattr(args, name) < 1:
            print(f"volrecon: error: --{name} must be >= 1", file=sys.stderr)
            return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"volrecon: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
