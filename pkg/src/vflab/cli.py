"""
Command-line frontend.

Every option can also come from a JSON config file (``--config``): a flat
object whose keys are the long option names with dashes turned into
underscores, e.g. ``{"policy": "sync", "vfs": 64, "iters": 100}``.  Values
given on the command line win over the file, and the file wins over the
built-in defaults.  Unknown keys are a usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .allocmodel import AllocProfile, BuddyAllocator
from .analyze import (
    ClassifierConfig,
    GlobalMinimumQuantile,
    classify,
    collision_profile,
    regress_compare,
    report_json,
    stale_window,
)
from .errors import VfLabError
from .grace import GraceClock, ReclaimQueue, ReclamationPolicy
from .harness import ChurnConfig, Mode, run_churn, run_creation_spam
from .probe import (
    ProbeConfig,
    emit_timing_log,
    parse_id_ranges,
    probe_range,
    samples_from_csv,
    samples_to_csv,
    samples_to_dicts,
    scan_timing_log,
)
from .registry import VfTable, insert
from .timing import CostModel, DeterministicClock, WallClock

log = logging.getLogger("vflab")

COMMON_DEFAULTS = {
    "seed": 0,
    "mode": "deterministic",
    "buckets": 6,
    "capacity": 64,
    "policy": None,
    "out": None,
    "format": None,
    "config": None,
}

FORMATS = {
    "probe": ("csv", "json", "log"),
    "classify": ("table", "csv", "json"),
    "regress": ("json", "table"),
    "collide": ("csv", "json", "table"),
    "stale-window": ("json", "table"),
    "churn": ("json", "csv"),
    "spam": ("json", "csv"),
    "parse-log": ("csv", "json"),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Keeps a per-command table of defaults so flags can stay SUPPRESSed."""

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.vf_defaults: dict = {}

    def opt(self, *flags, default=None, help="", **kw):
        action = super().add_argument(*flags, default=argparse.SUPPRESS, help=help, **kw)
        self.vf_defaults[action.dest] = default
        if default is not None and kw.get("action") not in ("store_true", "store_false"):
            action.help = f"{help} (default: {default})"
        return action


def _common(p: _Parser, cmd: str) -> None:
    p.opt("--seed", type=int, default=0, help="RNG seed for every random choice")
    p.opt("--mode", choices=[m.value for m in Mode], default="deterministic",
          help="deterministic scheduler/cost model, or real threads and wall-clock timing")
    p.opt("--buckets", type=int, default=6, help="hash bucket order b (2**b buckets)")
    p.opt("--capacity", type=int, default=64, help="maximum number of live VFs")
    p.opt("--policy", choices=[pol.value for pol in ReclamationPolicy],
          help="reclamation policy: unsafe, deferred or sync")
    p.opt("--out", help="write the report here instead of stdout")
    p.opt("--format", choices=FORMATS[cmd], default=FORMATS[cmd][0], help="output format")
    p.opt("--config", help="JSON file with option values")


def _cost_flags(p: _Parser) -> None:
    p.opt("--noise", type=float, default=0.0, help="Gaussian jitter sigma added to each lookup")
    p.opt("--c-enter", type=int, default=CostModel.c_enter, help="cost of entering a read session")
    p.opt("--c-node", type=int, default=CostModel.c_node, help="cost per chain node touched")
    p.opt("--c-kref", type=int, default=CostModel.c_kref, help="cost of the refcount get")
    p.opt("--c-exit", type=int, default=CostModel.c_exit, help="cost of leaving a read session")


def _probe_flags(p: _Parser, ids: str = "1-16") -> None:
    p.opt("--ids", default=ids, help="ids to probe, e.g. 1-16 or 1,9,17")
    p.opt("--occupied", default="1-4", help="ids inserted before probing ('' for none)")
    p.opt("--cycles", type=int, default=2, help="outer probe cycles")
    p.opt("--reps", type=int, default=5, help="lookups per id per cycle")


def _classifier_flags(p: _Parser) -> None:
    p.opt("--calib", help="known-unoccupied ids used as the baseline, e.g. 6-10")
    p.opt("--quantile", type=float, default=0.05,
          help="baseline quantile of all samples when --calib is not given")
    p.opt("--occupied-ratio", type=float, default=20.0, help="avg/baseline ratio for occupied")
    p.opt("--uncertain-ratio", type=float, default=1.5, help="avg/baseline ratio for uncertain")


def _churn_flags(p: _Parser, iters: int) -> None:
    p.opt("--vfs", type=int, default=64, help="VFs requested per iteration")
    p.opt("--iters", type=int, default=iters, help="iterations")
    p.opt("--pages", type=int, default=4096, help="arena size in pages")
    p.opt("--page-size", type=int, default=4096, help="page size in bytes")
    p.opt("--max-order", type=int, default=10, help="largest buddy order")
    p.opt("--big-order", type=int, default=3, help="order of the large block per VF")
    p.opt("--small-blocks", type=int, default=4, help="order-0 blocks per VF")
    p.opt("--max-steps", type=int, help="stop after this many scheduler steps")
    p.opt("--stride", type=int, default=1, help="record a timeline row every N steps")


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(
        prog="vflab", description="VF registry timing, reclamation and fragmentation experiments"
    )
    top.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    top.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = top.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("probe", help="time lookups over a range of ids")
    _common(p, "probe")
    _probe_flags(p)
    _cost_flags(p)

    p = sub.add_parser("classify", help="label ids occupied/uncertain/unoccupied from samples")
    _common(p, "classify")
    p.opt("--in", dest="input", default="-", help="samples CSV or timing log ('-' for stdin)")
    _classifier_flags(p)

    p = sub.add_parser("regress", help="win rate of the occupied group against random groups")
    _common(p, "regress")
    p.opt("--in", dest="input", help="samples CSV or timing log; probes afresh when omitted")
    _probe_flags(p, ids="1-10")
    _cost_flags(p)
    p.opt("--group-a", help="ids of group A (default: --occupied)")
    p.opt("--pool", help="ids random groups are drawn from (default: probed ids outside A)")
    p.opt("--group-size", type=int, help="size of each random group (default: size of A)")
    p.opt("--trials", type=int, default=1000, help="number of trials")

    p = sub.add_parser("collide", help="lookup cost against chain depth for colliding ids")
    _common(p, "collide")
    p.opt("--ids", default="1,9,17", help="ids sharing one bucket")
    p.opt("--reps", type=int, default=5, help="lookups per id")
    _cost_flags(p)

    p = sub.add_parser("stale-window", help="steps a deleted VF still looks occupied")
    _common(p, "stale-window")
    _probe_flags(p, ids="1-10")
    _classifier_flags(p)
    _cost_flags(p)
    p.opt("--cadence", type=int, default=8, help="steps between reclaim passes")
    p.opt("--dwell", help="pre-deletion reader dwell in steps, or 'pinned' "
          "(default: leave at the first reclaim pass)")
    p.opt("--max-steps", type=int, default=10000, help="step limit")

    p = sub.add_parser("churn", help="parallel create/delete flood against the allocator")
    _common(p, "churn")
    _churn_flags(p, iters=16)
    p.opt("--readers", type=int, default=1, help="concurrent readers")
    p.opt("--dwell", default="4", help="reader steps per session, or 'pinned'")
    p.opt("--cadence", type=int, default=8, help="steps between reclaim passes")
    p.opt("--no-interleave", action="store_true", default=False,
          help="always create before deleting instead of a seeded order")

    p = sub.add_parser("spam", help="keep requesting more VFs than the table allows")
    _common(p, "spam")
    _churn_flags(p, iters=10)

    p = sub.add_parser("parse-log", help="turn timing log lines into samples")
    _common(p, "parse-log")
    p.opt("--in", dest="input", default="-", help="log file ('-' for stdin)")
    p.opt("--strict", action="store_true", default=False, help="fail on any non-timing line")
    p.opt("--reps", type=int, help="lookups per id per cycle, to split repeated runs")
    return top


def _resolve(parser: argparse.ArgumentParser, ns: argparse.Namespace) -> dict:
    sub = parser._subparsers._group_actions[0].choices[ns.command]
    defaults = {**COMMON_DEFAULTS, **sub.vf_defaults}
    given = {k: v for k, v in vars(ns).items() if k not in ("command", "verbose")}
    from_file = {}
    path = given.get("config")
    if path:
        try:
            from_file = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(from_file, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(from_file) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    opts = {**defaults, **from_file, **given}
    opts["command"] = ns.command
    if opts["format"] is None:
        opts["format"] = FORMATS[ns.command][0]
    if opts["format"] not in FORMATS[ns.command]:
        raise UsageError(f"--format must be one of {', '.join(FORMATS[ns.command])}")
    if opts["mode"] not in [m.value for m in Mode]:
        raise UsageError(f"unknown mode {opts['mode']!r}")
    if ns.command in ("stale-window", "churn") and opts["policy"] is None:
        raise UsageError(f"{ns.command} requires --policy")
    return opts


def _ids(value) -> tuple[int, ...]:
    if value is None:
        return ()
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    return parse_id_ranges(str(value))


def _dwell(value):
    if value is None or value == -1:
        return -1
    if str(value).lower() in ("pinned", "inf", "none"):
        return None
    return int(value)


def _clock(o: dict):
    if o["mode"] == "realtime":
        return WallClock()
    return DeterministicClock(
        CostModel(o["c_enter"], o["c_node"], o["c_kref"], o["c_exit"], o["noise"], o["seed"])
    )


def _seeded_table(o: dict) -> tuple[VfTable, BuddyAllocator]:
    table = VfTable(o["buckets"], o["capacity"])
    alloc = BuddyAllocator()
    for vf_id in _ids(o["occupied"]):
        insert(table, vf_id, alloc)
    return table, alloc


def _read_input(path: str) -> str:
    if path in (None, "-"):
        return sys.stdin.read()
    return Path(path).read_text()


def _load_samples(path: str, reps: int | None = None):
    text = _read_input(path)
    if text.lstrip().startswith("id,"):
        return samples_from_csv(text)
    return scan_timing_log(text, reps=reps)[0]


def _classifier(o: dict) -> ClassifierConfig:
    kw = {"occupied_ratio": o["occupied_ratio"], "uncertain_ratio": o["uncertain_ratio"]}
    if o["calib"]:
        return ClassifierConfig.with_calibration(_ids(o["calib"]), **kw)
    return ClassifierConfig(GlobalMinimumQuantile(o["quantile"]), **kw)


def _probe_samples(o: dict):
    table, _ = _seeded_table(o)
    cfg = ProbeConfig(_ids(o["ids"]), o["cycles"], o["reps"])
    return probe_range(table, cfg, _clock(o), GraceClock())


def cmd_probe(o: dict) -> str:
    samples = _probe_samples(o)
    if o["format"] == "log":
        return emit_timing_log(samples)
    if o["format"] == "json":
        return report_json({"samples": samples_to_dicts(samples)})
    return samples_to_csv(samples)


def cmd_classify(o: dict) -> str:
    report = classify(_load_samples(o["input"]), _classifier(o))
    if o["format"] == "table":
        return report.render_table()
    if o["format"] == "json":
        return report_json(report.to_dict())
    return report.to_csv()


def cmd_regress(o: dict) -> str:
    if o["input"]:
        samples = _load_samples(o["input"], o["reps"])
    else:
        samples = _probe_samples(o)
    group_a = _ids(o["group_a"]) or _ids(o["occupied"])
    if o["pool"]:
        pool = _ids(o["pool"])
    else:
        pool = tuple(sorted({s.id for s in samples} - set(group_a)))
    size = o["group_size"] or len(group_a)
    result = regress_compare(samples, group_a, pool, size, o["trials"], o["seed"])
    if o["format"] == "table":
        return f"trials {result.trials}  wins {result.wins_a}  win rate {result.win_rate:.3f}\n"
    return report_json(
        {"trials": result.trials, "wins_a": result.wins_a, "win_rate": result.win_rate,
         "group_a": list(group_a), "pool": list(pool), "group_size": size}
    )


def cmd_collide(o: dict) -> str:
    ids = _ids(o["ids"])
    table = VfTable(o["buckets"], o["capacity"])
    alloc = BuddyAllocator()
    for vf_id in ids:
        insert(table, vf_id, alloc)
    profile = collision_profile(table, ids, _clock(o), GraceClock(), reps=o["reps"])
    if o["format"] == "json":
        return report_json({"profile": [{"depth": d, "avg": a} for d, a in profile]})
    if o["format"] == "table":
        lines = ["Depth   Avg Cycles"] + [f"{d:<8}{a:.2f}" for d, a in profile]
        return "\n".join(lines) + "\n"
    return "depth,avg\n" + "".join(f"{d},{a!r}\n" for d, a in profile)


def cmd_stale_window(o: dict) -> str:
    table, alloc = _seeded_table(o)
    grace = GraceClock()
    report = stale_window(
        table, grace, ReclaimQueue(), alloc,
        ReclamationPolicy.parse(o["policy"]),
        ProbeConfig(_ids(o["ids"]), o["cycles"], o["reps"]),
        _classifier(o),
        o["cadence"],
        _clock(o),
        reader_dwell=_dwell(o["dwell"]),
        max_steps=o["max_steps"],
    )
    if o["format"] == "table":
        return (f"policy {report.policy.value}  window {report.window_steps} steps  "
                f"uaf {report.uaf_count}\n")
    return report_json(report.to_dict())


def _churn_config(o: dict, **extra) -> ChurnConfig:
    return ChurnConfig(
        num_vfs=o["vfs"],
        iterations=o["iters"],
        bucket_order=o["buckets"],
        capacity=o["capacity"],
        total_pages=o["pages"],
        page_size=o["page_size"],
        max_order=o["max_order"],
        profile=AllocProfile(o["big_order"], o["small_blocks"]),
        mode=Mode(o["mode"]),
        seed=o["seed"],
        max_steps=o["max_steps"],
        stride=o["stride"],
        **extra,
    )


def _churn_output(report, fmt: str) -> str:
    return report.timeline_csv() if fmt == "csv" else report.to_json()


def cmd_churn(o: dict) -> str:
    dwell = _dwell(o["dwell"])
    cfg = _churn_config(
        o,
        policy=ReclamationPolicy.parse(o["policy"]),
        reader_count=o["readers"],
        reader_dwell=None if dwell is None else max(1, dwell),
        reclaim_cadence=o["cadence"],
        interleave_create_delete=not o["no_interleave"],
    )
    report = run_churn(cfg)
    if report.oom is not None:
        log.warning("run ended in simulated OOM at step %d: order %d",
                    report.oom.step, report.oom.requested_order)
    return _churn_output(report, o["format"])


def cmd_spam(o: dict) -> str:
    extra = {}
    if o["policy"]:
        extra["policy"] = ReclamationPolicy.parse(o["policy"])
    report = run_creation_spam(_churn_config(o, **extra))
    return _churn_output(report, o["format"])


def cmd_parse_log(o: dict) -> str:
    samples, skipped = scan_timing_log(_read_input(o["input"]), o["strict"], o["reps"])
    if o["format"] == "json":
        return report_json({"samples": samples_to_dicts(samples), "skipped_lines": skipped})
    return samples_to_csv(samples)


COMMANDS = {
    "probe": cmd_probe,
    "classify": cmd_classify,
    "regress": cmd_regress,
    "collide": cmd_collide,
    "stale-window": cmd_stale_window,
    "churn": cmd_churn,
    "spam": cmd_spam,
    "parse-log": cmd_parse_log,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    logging.basicConfig(
        level=logging.INFO if ns.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        opts = _resolve(parser, ns)
    except UsageError as exc:
        print(f"vflab {ns.command}: error: {exc}", file=sys.stderr)
        return 2

    try:
        text = COMMANDS[ns.command](opts)
    except (VfLabError, OSError, ValueError, KeyError, TypeError) as exc:
        print(f"vflab {ns.command}: {exc}", file=sys.stderr)
        return 1

    if opts["out"]:
        Path(opts["out"]).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def main() -> None:
    sys.exit(run())
