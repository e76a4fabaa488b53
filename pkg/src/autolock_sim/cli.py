"""Command-line driver: profiles, detection, eviction tuning, attack campaigns.

Every subcommand writes UTF-8 CSV with a header row, to ``--out DIR`` when
given and to stdout otherwise. Exit status: 0 success, 1 a verdict or
search result that contradicts expectations, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import __version__
from .aes_target import table_dump
from .attack import DEFAULT_SELF_EVICT_PROB, Variant, parse_variant, run_campaign
from .detection import (DEFAULT_TRIALS, CalibrationError, InconclusiveError, Method,
                        SimulatorPlatform, emit_histogram, histogram_csv, run_test)
from .eviction import NoReliableStrategy, parse_triple, search_parameters
from .profiles import PROFILE_NAMES, SoCProfile, UnknownProfile, load_profile

DEFAULT_TARGET = 0x40000
DEFAULT_HISTOGRAM_SAMPLES = 50_000
DEFAULT_CHECKPOINTS = "0,10000,25000,50000,100000,200000,400000"

EXIT_OK, EXIT_MISMATCH, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _int(text: str) -> int:
    return int(text, 0)


def _range(text: str) -> range:
    """'a:b' (inclusive) or a single integer."""
    lo, sep, hi = text.partition(":")
    try:
        a = int(lo)
        b = int(hi) if sep else a
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad range {text!r}, expected LO:HI") from None
    if b < a:
        raise argparse.ArgumentTypeError(f"empty range {text!r}")
    return range(a, b + 1)


def seeded_profile(profile: SoCProfile, seed: int, jitter: float | None = None) -> SoCProfile:
    """Profile whose replacement and jitter generators derive from ``seed``."""
    lat = replace(profile.config.latency, rng_seed=seed)
    if jitter is not None:
        lat = replace(lat, jitter_stddev=jitter)
    return profile.with_config(replacement_seed=seed, latency=lat)


class _Output:
    """Collects named CSV documents and writes them in one place."""

    def __init__(self, out_dir: str | None):
        self.dir = Path(out_dir) if out_dir else None

    def emit(self, name: str, text: str) -> None:
        if self.dir is None:
            sys.stdout.write(text)
            return
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / name).write_text(text, encoding="utf-8")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _profile(args) -> SoCProfile:
    try:
        return load_profile(args.profile)
    except UnknownProfile as e:
        raise UsageError(e.args[0]) from None


# --- subcommands ---------------------------------------------------------------

def cmd_detect(args) -> int:
    base = _profile(args)
    prof = seeded_profile(base, args.seed, args.jitter)
    methods = [Method(m) for m in args.method] if args.method else list(Method)
    strategy = prof.eviction_strategy(args.target)
    rows, status = [], EXIT_OK
    for method in methods:
        p = SimulatorPlatform(prof.config, seed=args.seed)
        try:
            v = run_test(method, p, args.target, strategy, args.trials)
            present, conf = str(v.present).lower(), f"{v.confidence:.4f}"
            agrees = v.present == base.ground_truth_autolock
            print(v.report(base.name), file=sys.stderr)
        except (InconclusiveError, CalibrationError) as e:
            present, conf, agrees = "inconclusive", "", False
            print(f"method={method.value} profile={base.name} {e}", file=sys.stderr)
        if not agrees:
            status = EXIT_MISMATCH
        rows.append((base.name, method.value, present, conf,
                     str(base.ground_truth_autolock).lower(), str(agrees).lower()))
    _Output(args.out).emit("detect.csv", _csv(
        ["profile", "method", "present", "confidence", "ground_truth", "agrees"], rows))
    return status


def cmd_tune(args) -> int:
    prof = seeded_profile(_profile(args), args.seed)
    if args.triple:
        grid = [parse_triple(t) for t in args.triple]
    else:
        grid = [(n, a, d) for n in args.n for a in args.a for d in args.d]
    if not grid:
        raise UsageError("empty parameter grid")
    target = args.target
    try:
        report = search_parameters(prof.config, target, grid, args.trials, args.threshold,
                                   prof.strategy_side, seed=args.seed)
        status = EXIT_OK
        print(f"chosen {report.chosen.n}-{report.chosen.a}-{report.chosen.d}", file=sys.stderr)
    except NoReliableStrategy as e:
        report, status = e.report, EXIT_MISMATCH
        print("no reliable strategy", file=sys.stderr)
    _Output(args.out).emit("tune.csv", report.to_csv())
    return status


def cmd_attack(args) -> int:
    prof = seeded_profile(_profile(args), args.seed)
    try:
        variants = [parse_variant(v) for v in args.variant] or list(Variant)
        checkpoints = [int(x) for x in args.checkpoints.split(",") if x.strip()]
    except ValueError as e:
        raise UsageError(str(e)) from None
    result = run_campaign(prof, variants, args.keys, checkpoints, seed=args.seed,
                          same_core=args.same_core, self_evict_prob=args.noise,
                          workers=args.workers, victim_core=args.victim_core,
                          attacker_core=args.attacker_core)
    out = _Output(args.out)
    out.emit("attack_campaign.csv", result.campaign_csv())
    out.emit("attack_summary.csv", result.summary_csv())
    out.emit("attack_ranks.csv", result.ranks_csv())
    return EXIT_OK


def cmd_histogram(args) -> int:
    prof = seeded_profile(_profile(args), args.seed, args.jitter)
    strategy = prof.eviction_strategy(args.target)
    rows = []
    for with_eviction in (False, True):
        p = SimulatorPlatform(prof.config, seed=args.seed)
        rows += emit_histogram(p, args.target, strategy, args.samples, with_eviction)
    _Output(args.out).emit("histogram.csv", histogram_csv(rows))
    return EXIT_OK


def cmd_dump_profile(args) -> int:
    prof = _profile(args)
    _Output(args.out).emit(f"{prof.name}.json", prof.to_json())
    return EXIT_OK


def cmd_dump_tables(args) -> int:
    _Output(args.out).emit("ttables.txt", table_dump())
    return EXIT_OK


# --- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--profile", default="A15",
                        help=f"shipped profile ({', '.join(PROFILE_NAMES)}) or a JSON path")
    common.add_argument("--seed", type=int, default=0, help="seed for every generator")
    common.add_argument("--out", metavar="DIR", help="write CSVs here instead of stdout")

    parser = argparse.ArgumentParser(prog="autolock-sim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", parents=[common], help="run AutoLock detection tests")
    p.add_argument("--method", action="append", choices=[m.value for m in Method])
    p.add_argument("--trials", type=int, default=DEFAULT_TRIALS)
    p.add_argument("--target", type=_int, default=DEFAULT_TARGET)
    p.add_argument("--jitter", type=float, help="override the timing jitter stddev")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("tune", parents=[common], help="search eviction parameters")
    p.add_argument("--n", type=_range, default=range(1, 61), help="N range LO:HI")
    p.add_argument("--a", type=_range, default=range(1, 7), help="A range LO:HI")
    p.add_argument("--d", type=_range, default=range(1, 7), help="D range LO:HI")
    p.add_argument("--triple", action="append", help="explicit N-A-D (repeatable)")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--threshold", type=float, default=1.0)
    p.add_argument("--target", type=_int, default=DEFAULT_TARGET)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("attack", parents=[common], help="run an Evict+Reload campaign")
    p.add_argument("--variant", action="append", default=[],
                   help="original, majority, prob_filter or weighted (repeatable)")
    p.add_argument("--keys", type=int, default=20)
    p.add_argument("--checkpoints", default=DEFAULT_CHECKPOINTS)
    p.add_argument("--same-core", action="store_true")
    p.add_argument("--victim-core", type=int, default=0)
    p.add_argument("--attacker-core", type=int)
    p.add_argument("--noise", type=float, default=DEFAULT_SELF_EVICT_PROB,
                   help="per-slot self-eviction probability of victim lines")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("histogram", parents=[common], help="reload latency histograms")
    p.add_argument("--samples", type=int, default=DEFAULT_HISTOGRAM_SAMPLES)
    p.add_argument("--target", type=_int, default=DEFAULT_TARGET)
    p.add_argument("--jitter", type=float, help="override the timing jitter stddev")
    p.set_defaults(func=cmd_histogram)

    p = sub.add_parser("dump-profile", parents=[common], help="print a profile as JSON")
    p.set_defaults(func=cmd_dump_profile)

    p = sub.add_parser("dump-tables", parents=[common], help="print the AES T-tables")
    p.set_defaults(func=cmd_dump_tables)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, ValueError) as e:
        print(f"{parser.prog} {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
