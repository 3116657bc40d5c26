"""
Lookup timing probes and the kernel-log timing format.

The instrumented driver loop logs one line per lookup::

    ice_get_vf_by_id: VF ID 3 present, lookup took 6147 clock cycles
    ice_get_vf_by_id: VF ID 7 absent, lookup took 87 clock cycles

The log carries no cycle/rep counters, so the parser rebuilds them from the
loop shape: consecutive lines for one id form a run (``rep_index`` is the
position inside the run) and every new run of an id starts the next
``cycle_index`` for that id.
"""

from __future__ import annotations

import csv
import io
import logging
import re
from collections.abc import Iterable
from dataclasses import dataclass

from .errors import InvalidConfig, ParseError
from .grace import GraceClock, reader_enter, reader_exit
from .registry import VfId, VfTable, lookup, put_ref
from .timing import ClockSource, CostModel, DeterministicClock, TimingSample, WallClock

__all__ = [
    "ClockSource",
    "CostModel",
    "DeterministicClock",
    "ProbeConfig",
    "TimingSample",
    "WallClock",
    "emit_timing_log",
    "parse_id_ranges",
    "parse_timing_log",
    "probe_range",
    "samples_from_csv",
    "samples_to_csv",
    "scan_timing_log",
]

log = logging.getLogger(__name__)

PROBE_READER_ID = 0

LOG_FORMAT = "ice_get_vf_by_id: VF ID {id} {state}, lookup took {duration} clock cycles"
_LOG_RE = re.compile(
    r"ice_get_vf_by_id: VF ID (?P<id>\d+) (?P<state>present|absent), "
    r"lookup took (?P<duration>\d+) clock cycles"
)

CSV_FIELDS = ("id", "hit", "duration", "cycle", "rep")


@dataclass(frozen=True)
class ProbeConfig:
    ids: tuple[int, ...] = tuple(range(1, 17))
    cycles: int = 2
    reps: int = 5

    def __post_init__(self):
        if self.cycles < 1 or self.reps < 1:
            raise InvalidConfig("cycles and reps must both be at least 1")
        object.__setattr__(self, "ids", tuple(int(VfId(i)) for i in self.ids))


def parse_id_ranges(text: str) -> tuple[int, ...]:
    """Expand ``"1-4,9,12-13"`` into ``(1, 2, 3, 4, 9, 12, 13)``."""
    ids: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise InvalidConfig(f"empty id range {part!r}")
            ids.extend(range(lo, hi + 1))
        else:
            ids.append(int(part))
    return tuple(int(VfId(i)) for i in ids)


def probe_range(
    table: VfTable,
    cfg: ProbeConfig,
    clock: ClockSource,
    grace: GraceClock,
    reader_id: int = PROBE_READER_ID,
) -> list[TimingSample]:
    samples = []
    for cycle in range(cfg.cycles):
        for vf_id in cfg.ids:
            for rep in range(cfg.reps):
                handle = reader_enter(grace, reader_id)
                try:
                    outcome, sample = lookup(table, vf_id, handle, clock, cycle, rep)
                finally:
                    reader_exit(grace, handle)
                if outcome.hit:
                    put_ref(outcome.entry)
                samples.append(sample)
    return samples


def emit_timing_log(samples: Iterable[TimingSample]) -> str:
    lines = [
        LOG_FORMAT.format(
            id=s.id, state="present" if s.hit else "absent", duration=s.duration
        )
        for s in samples
    ]
    return "".join(line + "\n" for line in lines)


def scan_timing_log(
    text: str | Iterable[str], strict: bool = False, reps: int | None = None
) -> tuple[list[TimingSample], int]:
    """Parse timing lines; returns the samples and the number of skipped lines.

    ``reps``, when known, also closes a run after that many lines, so a
    single-id probe repeated over several cycles splits correctly.
    """
    lines = text.splitlines() if isinstance(text, str) else text
    samples: list[TimingSample] = []
    skipped = 0
    run_id = None
    rep = 0
    runs_seen: dict[int, int] = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.rstrip("\n")
        m = _LOG_RE.search(line)
        if m is None:
            if line.strip():
                if strict:
                    raise ParseError(lineno, line)
                skipped += 1
            continue
        vf_id = int(VfId(int(m["id"])))
        if vf_id == run_id and (reps is None or rep + 1 < reps):
            rep += 1
        else:
            run_id, rep = vf_id, 0
            runs_seen[vf_id] = runs_seen.get(vf_id, -1) + 1
        samples.append(
            TimingSample(
                id=vf_id,
                hit=m["state"] == "present",
                duration=int(m["duration"]),
                cycle_index=runs_seen[vf_id],
                rep_index=rep,
            )
        )
    if skipped:
        log.warning("skipped %d non-timing line(s)", skipped)
    return samples, skipped


def parse_timing_log(
    text: str | Iterable[str], strict: bool = False, reps: int | None = None
) -> list[TimingSample]:
    return scan_timing_log(text, strict, reps)[0]


def samples_to_csv(samples: Iterable[TimingSample]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for s in samples:
        writer.writerow((s.id, int(s.hit), s.duration, s.cycle_index, s.rep_index))
    return buf.getvalue()


def samples_from_csv(text: str) -> list[TimingSample]:
    reader = csv.DictReader(io.StringIO(text))
    missing = set(CSV_FIELDS) - set(reader.fieldnames or ())
    if missing:
        raise InvalidConfig(f"sample CSV lacks column(s): {', '.join(sorted(missing))}")
    return [
        TimingSample(
            id=int(row["id"]),
            hit=row["hit"].strip().lower() in ("1", "true", "yes"),
            duration=int(row["duration"]),
            cycle_index=int(row["cycle"]),
            rep_index=int(row["rep"]),
        )
        for row in reader
    ]


def samples_to_dicts(samples: Iterable[TimingSample]) -> list[dict]:
    return [
        {"id": s.id, "hit": s.hit, "duration": s.duration, "cycle": s.cycle_index, "rep": s.rep_index}
        for s in samples
    ]
