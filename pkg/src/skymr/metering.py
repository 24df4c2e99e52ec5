"""Resource accounting and system-balance analysis.

Every byte the simulator moves is charged to one of five phases
(map, shuffle, reduce, dfs, bench) and, where it belongs to one of the
four task classes of the balance analysis (mapper, reducer, dfs_read,
dfs_write), to that class as well.  The phase view is the raw accounting
ledger; the class view feeds the Amdahl table.

Work units are a portable instruction-count proxy.  Default weights:
1 per byte checksummed, 1 per byte codec-processed, 0.5 per byte copied
across a lane, 20 per key comparison, 50 per distance evaluation.
Absolute MIPS are hardware-specific, so reports accept an externally
calibrated instruction-rate override.
"""

from __future__ import annotations

import csv
import io
import json
import math
import threading
from dataclasses import dataclass, field, replace

PHASES = ("map", "shuffle", "reduce", "dfs", "bench")
CLASSES = ("mapper", "reducer", "dfs_read", "dfs_write")

CSV_HEADER = [
    "run_id",
    "kind",
    "name",
    "disk_read_bytes",
    "disk_write_bytes",
    "net_local_bytes",
    "net_remote_bytes",
    "work_units",
    "wall_seconds",
    "instr_rate_mips",
    "ad",
    "adn",
]


class UndefinedRatioError(ZeroDivisionError):
    """Raised when an Amdahl number is requested with a zero disk rate."""


@dataclass(frozen=True)
class Counters:
    """One row of the ledger: byte lanes plus work and wall time."""

    disk_read_bytes: int = 0
    disk_write_bytes: int = 0
    net_local_bytes: int = 0
    net_remote_bytes: int = 0
    work_units: float = 0.0
    wall_seconds: float = 0.0

    def __add__(self, other: "Counters") -> "Counters":
        return Counters(
            self.disk_read_bytes + other.disk_read_bytes,
            self.disk_write_bytes + other.disk_write_bytes,
            self.net_local_bytes + other.net_local_bytes,
            self.net_remote_bytes + other.net_remote_bytes,
            self.work_units + other.work_units,
            self.wall_seconds + other.wall_seconds,
        )

    def __sub__(self, other: "Counters") -> "Counters":
        return Counters(
            self.disk_read_bytes - other.disk_read_bytes,
            self.disk_write_bytes - other.disk_write_bytes,
            self.net_local_bytes - other.net_local_bytes,
            self.net_remote_bytes - other.net_remote_bytes,
            self.work_units - other.work_units,
            self.wall_seconds - other.wall_seconds,
        )

    @property
    def disk_bytes(self) -> int:
        return self.disk_read_bytes + self.disk_write_bytes

    @property
    def net_bytes(self) -> int:
        return self.net_local_bytes + self.net_remote_bytes

    def same_bytes_and_work(self, other: "Counters") -> bool:
        """Equality ignoring wall time (wall may differ between runs)."""
        return (
            self.disk_read_bytes == other.disk_read_bytes
            and self.disk_write_bytes == other.disk_write_bytes
            and self.net_local_bytes == other.net_local_bytes
            and self.net_remote_bytes == other.net_remote_bytes
            and self.work_units == other.work_units
        )


@dataclass(frozen=True)
class MeterSnapshot:
    """Consistent view of all phase and class counters at one instant."""

    phases: dict[str, Counters]
    classes: dict[str, Counters]

    def delta(self, earlier: "MeterSnapshot") -> "MeterSnapshot":
        return MeterSnapshot(
            phases={p: self.phases[p] - earlier.phases[p] for p in PHASES},
            classes={c: self.classes[c] - earlier.classes[c] for c in CLASSES},
        )

    def total(self) -> Counters:
        tot = Counters()
        for c in self.phases.values():
            tot = tot + c
        return tot

    def to_dict(self) -> dict:
        return {
            "phases": {p: vars(c).copy() for p, c in self.phases.items()},
            "classes": {k: vars(c).copy() for k, c in self.classes.items()},
        }

    @staticmethod
    def from_dict(doc: dict) -> "MeterSnapshot":
        return MeterSnapshot(
            phases={p: Counters(**v) for p, v in doc["phases"].items()},
            classes={k: Counters(**v) for k, v in doc["classes"].items()},
        )


@dataclass(frozen=True)
class WorkModel:
    """Instruction-count proxy weights plus an optional calibration override.

    When ``instr_rate_override_mips`` is set, reports use it as the
    instruction rate for every class instead of work_units / wall.
    """

    per_byte_checksummed: float = 1.0
    per_byte_codec: float = 1.0
    per_byte_lane_copied: float = 0.5
    per_key_comparison: float = 20.0
    per_distance_eval: float = 50.0
    instr_rate_override_mips: float | None = None

    def __post_init__(self) -> None:
        for name in (
            "per_byte_checksummed",
            "per_byte_codec",
            "per_byte_lane_copied",
            "per_key_comparison",
            "per_distance_eval",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def sort_work(self, n_records: int) -> float:
        """Comparison estimate for sorting n records: n * ceil(log2 n)."""
        if n_records < 2:
            return 0.0
        return self.per_key_comparison * n_records * math.ceil(math.log2(n_records))

    def merge_work(self, n_records: int, n_runs: int) -> float:
        """Comparison estimate for a k-way merge: n * ceil(log2 k)."""
        if n_records < 1 or n_runs < 2:
            return 0.0
        return self.per_key_comparison * n_records * math.ceil(math.log2(n_runs))


class Meter:
    """Thread-safe accumulator of phase- and class-scoped counters.

    Increments are applied atomically under one lock; ``snapshot`` reads
    all lanes under the same lock, so snapshots are consistent and
    monotone over a run.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._phases: dict[str, Counters] = {p: Counters() for p in PHASES}
        self._classes: dict[str, Counters] = {c: Counters() for c in CLASSES}

    def add(
        self,
        phase: str,
        klass: str | None = None,
        *,
        disk_read: int = 0,
        disk_write: int = 0,
        net_local: int = 0,
        net_remote: int = 0,
        work: float = 0.0,
        wall: float = 0.0,
    ) -> None:
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}")
        if klass is not None and klass not in CLASSES:
            raise ValueError(f"unknown class {klass!r}")
        if min(disk_read, disk_write, net_local, net_remote) < 0 or work < 0 or wall < 0:
            raise ValueError("meter increments must be non-negative")
        # Work is quantized to 1/1024 units so concurrent additions sum
        # exactly regardless of order (dyadic floats add associatively
        # at these magnitudes); byte lanes are integers already.
        work = round(work * 1024) / 1024
        inc = Counters(disk_read, disk_write, net_local, net_remote, work, wall)
        with self._lock:
            self._phases[phase] = self._phases[phase] + inc
            if klass is not None:
                self._classes[klass] = self._classes[klass] + inc

    def fold(self, snapshot: MeterSnapshot) -> None:
        """Merge a child meter's snapshot into this meter atomically."""
        with self._lock:
            for p, c in snapshot.phases.items():
                self._phases[p] = self._phases[p] + c
            for k, c in snapshot.classes.items():
                self._classes[k] = self._classes[k] + c

    def snapshot(self) -> MeterSnapshot:
        with self._lock:
            return MeterSnapshot(phases=dict(self._phases), classes=dict(self._classes))

    def scope(self, phase: str, klass: str | None = None) -> "MeterScope":
        return MeterScope(self, phase, klass)


@dataclass(frozen=True)
class MeterScope:
    """A meter handle bound to the caller's phase/class attribution.

    Subsystems like the block store charge their own lanes to the dfs
    phase but route client-side work (checksum verification, codec) to
    whoever called them, via this scope.
    """

    meter: Meter
    phase: str
    klass: str | None = None

    def work(self, units: float) -> None:
        if units:
            self.meter.add(self.phase, self.klass, work=units)

    def wall(self, seconds: float) -> None:
        if seconds:
            self.meter.add(self.phase, self.klass, wall=seconds)


def amdahl_numbers(
    instr_rate_mips: float, disk_bytes_per_sec: float, net_bytes_per_sec: float
) -> tuple[float, float]:
    """Amdahl numbers for one task class.

    AD counts disk traffic only; ADN counts disk plus network.  Larger
    values mean more compute-intensive; a balanced task sits at 1.
    """
    if instr_rate_mips < 0 or disk_bytes_per_sec < 0 or net_bytes_per_sec < 0:
        raise ValueError("rates must be non-negative")
    if disk_bytes_per_sec == 0:
        raise UndefinedRatioError("disk rate is zero; Amdahl number undefined")
    instr_per_sec = instr_rate_mips * 1e6
    ad = instr_per_sec / (disk_bytes_per_sec * 8.0)
    adn = instr_per_sec / ((disk_bytes_per_sec + net_bytes_per_sec) * 8.0)
    return ad, adn


def instr_rate(freq_ratio: float, nominal_hz: float, ipc: float, cores: int) -> float:
    """Instruction rate in MIPS from frequency ratio, nominal clock, IPC, cores."""
    if freq_ratio <= 0 or nominal_hz <= 0 or ipc <= 0 or cores <= 0:
        raise ValueError("all inputs must be positive")
    if freq_ratio > 1:
        raise ValueError("freq_ratio is current/nominal and cannot exceed 1")
    return freq_ratio * nominal_hz * ipc * cores / 1e6


def cores_needed(
    disk_bits_per_sec: float,
    net_link_bits_per_sec: float,
    duplex_factor: float = 2.0,
    ipc: float = 0.5,
    core_hz: float = 1.6e9,
) -> int:
    """Cores required to balance the given I/O under one instruction per bit.

    duplex_factor defaults to 2: network bits are counted both in and out.
    """
    if disk_bits_per_sec <= 0 or duplex_factor <= 0 or ipc <= 0 or core_hz <= 0:
        raise ValueError("all inputs must be positive")
    if net_link_bits_per_sec < 0:
        raise ValueError("net_link_bits_per_sec must be non-negative")
    return math.ceil((disk_bits_per_sec + duplex_factor * net_link_bits_per_sec) / (ipc * core_hz))


@dataclass(frozen=True)
class AmdahlRow:
    """Derived balance figures for one task class."""

    task_class: str
    instr_rate_mips: float
    disk_bit_rate: float
    net_bit_rate: float
    ad: float | None
    adn: float | None


@dataclass(frozen=True)
class AmdahlReport:
    rows: dict[str, AmdahlRow]
    energy_joules: float | None = None

    def to_dict(self) -> dict:
        return {
            "rows": {k: vars(r).copy() for k, r in self.rows.items()},
            "energy_joules": self.energy_joules,
        }


def class_amdahl_rows(
    classes: dict[str, Counters], work_model: WorkModel | None = None
) -> dict[str, AmdahlRow]:
    """Per-class rates and Amdahl numbers from class-scoped counters.

    Classes that saw no wall time or no disk bytes get None for AD/ADN
    (the table prints them as N/A rather than inventing a ratio).
    """
    model = work_model or WorkModel()
    rows: dict[str, AmdahlRow] = {}
    for name in CLASSES:
        c = classes.get(name, Counters())
        wall = c.wall_seconds
        if wall <= 0:
            rows[name] = AmdahlRow(name, 0.0, 0.0, 0.0, None, None)
            continue
        disk_bps = c.disk_bytes / wall
        net_bps = c.net_bytes / wall
        if model.instr_rate_override_mips is not None:
            mips = model.instr_rate_override_mips
        else:
            mips = c.work_units / wall / 1e6
        try:
            ad, adn = amdahl_numbers(mips, disk_bps, net_bps)
        except UndefinedRatioError:
            ad, adn = None, None
        rows[name] = AmdahlRow(name, mips, disk_bps * 8.0, net_bps * 8.0, ad, adn)
    return rows


@dataclass(frozen=True)
class RunReport:
    """The persisted per-run document: config echo, ledger, balance table."""

    run_id: str
    config: dict
    snapshot: MeterSnapshot
    amdahl: AmdahlReport
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "config": self.config,
            "meter": self.snapshot.to_dict(),
            "amdahl": self.amdahl.to_dict(),
            "extras": self.extras,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @staticmethod
    def from_dict(doc: dict) -> "RunReport":
        amdahl = AmdahlReport(
            rows={k: AmdahlRow(**v) for k, v in doc["amdahl"]["rows"].items()},
            energy_joules=doc["amdahl"]["energy_joules"],
        )
        return RunReport(
            run_id=doc["run_id"],
            config=doc["config"],
            snapshot=MeterSnapshot.from_dict(doc["meter"]),
            amdahl=amdahl,
            extras=doc.get("extras", {}),
        )

    @staticmethod
    def from_json(text: str) -> "RunReport":
        return RunReport.from_dict(json.loads(text))

    def with_energy(self, watts: float) -> "RunReport":
        wall = self.snapshot.total().wall_seconds
        amdahl = AmdahlReport(rows=self.amdahl.rows, energy_joules=watts * wall)
        return replace(self, amdahl=amdahl)

    def to_csv(self) -> str:
        """Flat CSV: one row per phase and per class, fixed header."""
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(CSV_HEADER)
        for phase in PHASES:
            c = self.snapshot.phases[phase]
            writer.writerow(
                [self.run_id, "phase", phase, c.disk_read_bytes, c.disk_write_bytes,
                 c.net_local_bytes, c.net_remote_bytes, c.work_units, c.wall_seconds,
                 "", "", ""]
            )
        for name in CLASSES:
            c = self.snapshot.classes[name]
            row = self.amdahl.rows.get(name)
            fmt = lambda v: "" if v is None else f"{v:.6g}"
            writer.writerow(
                [self.run_id, "class", name, c.disk_read_bytes, c.disk_write_bytes,
                 c.net_local_bytes, c.net_remote_bytes, c.work_units, c.wall_seconds,
                 fmt(row.instr_rate_mips if row else None),
                 fmt(row.ad if row else None), fmt(row.adn if row else None)]
            )
        return buf.getvalue()


def build_run_report(
    run_id: str,
    config: dict,
    snapshot: MeterSnapshot,
    work_model: WorkModel | None = None,
    watts: float | None = None,
    extras: dict | None = None,
) -> RunReport:
    rows = class_amdahl_rows(snapshot.classes, work_model)
    energy = None
    if watts is not None:
        energy = watts * snapshot.total().wall_seconds
    return RunReport(
        run_id=run_id,
        config=config,
        snapshot=snapshot,
        amdahl=AmdahlReport(rows=rows, energy_joules=energy),
        extras=extras or {},
    )


def render_table(report: RunReport) -> str:
    """Human-readable phase summary plus the class balance table."""
    lines = [f"run {report.run_id}"]
    lines.append(
        f"{'phase':<8} {'disk_read':>12} {'disk_write':>12} {'net_local':>12} "
        f"{'net_remote':>12} {'work_units':>14} {'wall_s':>9}"
    )
    for phase in PHASES:
        c = report.snapshot.phases[phase]
        lines.append(
            f"{phase:<8} {c.disk_read_bytes:>12} {c.disk_write_bytes:>12} "
            f"{c.net_local_bytes:>12} {c.net_remote_bytes:>12} "
            f"{c.work_units:>14.0f} {c.wall_seconds:>9.3f}"
        )
    lines.append("")
    lines.append(
        f"{'class':<10} {'MIPS':>10} {'disk bit/s':>14} {'net bit/s':>14} {'AD':>8} {'ADN':>8}"
    )
    for name in CLASSES:
        row = report.amdahl.rows.get(name)
        if row is None:
            continue
        ad = "N/A" if row.ad is None else f"{row.ad:.3f}"
        adn = "N/A" if row.adn is None else f"{row.adn:.3f}"
        lines.append(
            f"{name:<10} {row.instr_rate_mips:>10.2f} {row.disk_bit_rate:>14.0f} "
            f"{row.net_bit_rate:>14.0f} {ad:>8} {adn:>8}"
        )
    if report.amdahl.energy_joules is not None:
        lines.append(f"energy: {report.amdahl.energy_joules:.1f} J")
    return "\n".join(lines)
