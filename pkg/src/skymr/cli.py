"""Batch command-line interface: generate, run, bench, report.

Configuration precedence is flags > config file > built-in defaults.
The config file is line-oriented ``key=value`` (``#`` comments allowed),
located via --config or the SKYMR_CONFIG environment variable.  Keys
mirror the runtime parameters they control:

    nodes                   logical node count            (default 8)
    replication             replica count                 (default 3)
    block.size              block size in bytes           (default 64 MiB)
    io.bytes.per.checksum   checksum chunk                (default 4096)
    io.sort.mb              map buffer total, MiB         (default 125)
    io.sort.record.percent  metadata share of the buffer  (default 0.2)
    io.sort.spill.percent   spill threshold               (default 0.8)
    reducers.max            reducer slots per node        (default 2)
    mappers.max             map task cap per node         (default 3)
    store.root              store directory               (default ./store)

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import re
import sys
import time
from pathlib import Path

from . import apps, metering
from .dfs import BlockStore, ClusterSpec, _write_payload_buffered, _write_payload_direct
from .engine import MIB, SpillConfig, job_output_digest, run_job
from .metering import Meter, RunReport, WorkModel, build_run_report, render_table
from .sphere import BlockConfig

DEFAULTS: dict[str, float | int | str] = {
    "nodes": 8,
    "replication": 3,
    "block.size": 64 * MIB,
    "io.bytes.per.checksum": 4096,
    "io.sort.mb": 125,
    "io.sort.record.percent": 0.2,
    "io.sort.spill.percent": 0.8,
    "reducers.max": 2,
    "mappers.max": 3,
    "store.root": "store",
}

_SIZE_RE = re.compile(r"^(\d+(?:\.\d+)?)\s*(b|kb|mb|gb|kib|mib|gib)?$", re.IGNORECASE)
_SIZE_FACTORS = {
    None: 1, "b": 1,
    "kb": 1000, "mb": 1000**2, "gb": 1000**3,
    "kib": 1024, "mib": 1024**2, "gib": 1024**3,
}


def parse_size(text: str) -> int:
    m = _SIZE_RE.match(text.strip())
    if not m:
        raise argparse.ArgumentTypeError(f"cannot parse size {text!r}")
    value, unit = m.groups()
    return int(float(value) * _SIZE_FACTORS[unit.lower() if unit else None])


def load_config(path: str | None) -> dict[str, str]:
    path = path or os.environ.get("SKYMR_CONFIG")
    if not path:
        return {}
    out: dict[str, str] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"bad config line (expected key=value): {raw!r}")
        out[key.strip()] = value.strip()
    return out


class Settings:
    """Merged view of defaults, config file, and flags."""

    def __init__(self, args: argparse.Namespace):
        self._file = load_config(getattr(args, "config", None))
        self._args = args

    def _raw(self, key: str):
        flag = key.replace(".", "_")
        value = getattr(self._args, flag, None)
        if value is not None:
            return value
        if key in self._file:
            return self._file[key]
        return DEFAULTS[key]

    def int_(self, key: str) -> int:
        return int(float(self._raw(key)))

    def float_(self, key: str) -> float:
        return float(self._raw(key))

    def str_(self, key: str) -> str:
        return str(self._raw(key))

    def echo(self) -> dict:
        return {key: self._raw(key) for key in DEFAULTS}


def open_store(settings: Settings) -> BlockStore:
    cluster = ClusterSpec(
        node_count=settings.int_("nodes"),
        replication=settings.int_("replication"),
        block_bytes=settings.int_("block.size"),
        bytes_per_checksum=settings.int_("io.bytes.per.checksum"),
        root_dir=settings.str_("store.root"),
    )
    return BlockStore(cluster)


def spill_from(settings: Settings) -> SpillConfig:
    return SpillConfig(
        total_buffer_bytes=settings.int_("io.sort.mb") * MIB,
        record_percent=settings.float_("io.sort.record.percent"),
        spill_percent=settings.float_("io.sort.spill.percent"),
    )


def runs_dir(settings: Settings) -> Path:
    return Path(settings.str_("store.root")) / "runs"


def save_report(settings: Settings, report: RunReport) -> Path:
    out = runs_dir(settings) / report.run_id
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv())
    return out


def make_run_id(args: argparse.Namespace, kind: str) -> str:
    if getattr(args, "run_id", None):
        return args.run_id
    stamp = time.strftime("%Y%m%d-%H%M%S")
    seed = getattr(args, "seed", None)
    tail = f"-{seed}" if seed is not None else ""
    return f"{stamp}-{kind}{tail}"


# -- commands -----------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    settings = Settings(args)
    store = open_store(settings)
    meter = Meter()
    apps.generate_catalog(
        store,
        args.out,
        args.objects,
        args.seed,
        clustering=args.clustering,
        writer_node=0,
        scope=meter.scope("dfs"),
        write_mode=args.write_mode or "buffered",
    )
    meta = store.lookup(args.out)
    run_id = make_run_id(args, "generate")
    report = build_run_report(
        run_id,
        settings.echo(),
        meter.snapshot(),
        extras={
            "command": "generate",
            "objects": args.objects,
            "seed": args.seed,
            "clustering": args.clustering,
            "path": args.out,
            "bytes": meta.length,
        },
    )
    save_report(settings, report)
    print(f"generated {args.objects} objects ({meta.length} bytes) at {args.out}")
    return 0


def _run_search(args, settings: Settings, store: BlockStore, meter: Meter) -> dict:
    cfg = BlockConfig(theta_arcsec=args.theta)
    out_prefix = args.out or f"/runs/{make_run_id(args, 'x')}/search"
    spec = apps.neighbor_search_job(
        args.theta,
        cfg,
        store,
        args.input,
        out_prefix,
        num_reducers=args.reducers or settings.int_("reducers.max") * store.cluster.node_count,
        spill=spill_from(settings),
        codec=args.codec or "none",
        write_mode=args.write_mode or "buffered",
    )
    report = run_job(
        spec, store, meter, workers=args.workers, mappers_max=settings.int_("mappers.max")
    )
    outputs = [store.lookup(p) for p in report.output_paths]
    payload = sum(f.length for f in outputs)
    stored = sum(f.stored_length for f in outputs)
    return {
        "command": "run search",
        "theta_arcsec": args.theta,
        "input": args.input,
        "output_prefix": out_prefix,
        "output_paths": report.output_paths,
        "pair_count": payload // apps.PAIR_RECORD_BYTES,
        "reducer_output_payload_bytes": payload,
        "reducer_output_stored_bytes": stored,
        "compression_ratio": (stored / payload) if payload else None,
        "map_output_payload_bytes": report.map_output_payload_bytes,
        "border_copy_fraction": apps.border_copy_fraction(
            sum(r.records_in for r in report.map_reports),
            sum(r.records_out for r in report.map_reports),
        ),
        "spill_counts": [r.spill_count for r in report.map_reports],
        "output_digest": job_output_digest(store, report, meter),
        "job_wall_seconds": report.wall_seconds,
    }


def _run_stats(args, settings: Settings, store: BlockStore, meter: Meter) -> dict:
    cfg = BlockConfig(theta_arcsec=60.0)
    out_prefix = args.out or f"/runs/{make_run_id(args, 'x')}/stats"
    step1, step2 = apps.neighbor_stats_job(
        cfg,
        store,
        args.input,
        out_prefix,
        num_reducers=args.reducers or settings.int_("reducers.max") * store.cluster.node_count,
        spill=spill_from(settings),
        codec=args.codec or "none",
        write_mode=args.write_mode or "buffered",
    )
    rep1 = run_job(
        step1, store, meter, workers=args.workers, mappers_max=settings.int_("mappers.max")
    )
    rep2 = run_job(
        step2, store, meter, workers=args.workers, mappers_max=settings.int_("mappers.max")
    )
    final = store.read_file(rep2.output_paths[0], 0, meter.scope("dfs"))
    zone, block, hist = apps.read_final_histogram(final)
    return {
        "command": "run stats",
        "input": args.input,
        "output_prefix": out_prefix,
        "final_line": final.decode().strip(),
        "sentinel": [zone, block],
        "histogram": list(hist.counts),
        "histogram_cumulative": list(hist.cumulative()),
        "pair_total": hist.total(),
        "output_digest": job_output_digest(store, rep2, meter),
        "job_wall_seconds": rep1.wall_seconds + rep2.wall_seconds,
    }


def cmd_run(args: argparse.Namespace) -> int:
    settings = Settings(args)
    store = open_store(settings)
    meter = Meter()
    if args.job == "search":
        extras = _run_search(args, settings, store, meter)
    else:
        extras = _run_stats(args, settings, store, meter)
    run_id = make_run_id(args, args.job)
    report = build_run_report(
        run_id,
        settings.echo(),
        meter.snapshot(),
        work_model=store.work_model,
        watts=args.watts,
        extras=extras,
    )
    save_report(settings, report)
    print(render_table(report))
    return 0


def cmd_bench_disk(args, settings: Settings) -> int:
    store = open_store(settings)
    meter = Meter()
    bench_dir = Path(settings.str_("store.root")) / "bench"
    bench_dir.mkdir(parents=True, exist_ok=True)
    payload = os.urandom(min(args.size, MIB)) * (args.size // min(args.size, MIB) + 1)
    payload = payload[: args.size]
    entries = []
    for i in range(args.files):
        path = bench_dir / f"disk_{args.mode}_{i:03d}.dat"
        t0 = time.perf_counter()
        if args.mode == "unbuffered":
            try:
                _write_payload_direct(path, payload)
            except OSError:
                _write_payload_buffered(path, payload)
        else:
            _write_payload_buffered(path, payload)
        write_s = time.perf_counter() - t0
        t0 = time.perf_counter()
        readback = path.read_bytes()
        read_s = time.perf_counter() - t0
        if readback != payload:
            raise RuntimeError(f"readback mismatch for {path}")
        meter.add("bench", disk_write=args.size, disk_read=args.size,
                  wall=write_s + read_s)
        entries.append({"file": str(path), "bytes": args.size,
                        "write_seconds": write_s, "read_seconds": read_s})
    total = args.files * args.size
    wall = sum(e["write_seconds"] + e["read_seconds"] for e in entries)
    run_id = make_run_id(args, f"bench-disk-{args.mode}")
    report = build_run_report(
        run_id, settings.echo(), meter.snapshot(),
        extras={
            "command": "bench disk",
            "mode": args.mode,
            "files": entries,
            "total_bytes": total,
            "write_mb_per_s": total / max(sum(e["write_seconds"] for e in entries), 1e-9) / 1e6,
            "read_mb_per_s": total / max(sum(e["read_seconds"] for e in entries), 1e-9) / 1e6,
        },
    )
    save_report(settings, report)
    print(f"bench disk mode={args.mode}: {args.files} files x {args.size} bytes "
          f"({total} total) in {wall:.3f}s")
    return 0


def cmd_bench_dfsio(args, settings: Settings) -> int:
    store = open_store(settings)
    meter = Meter()
    n = store.cluster.node_count
    t0 = time.perf_counter()
    if args.op == "write":
        pattern = (b"DFSIO-%08d" % args.seed_byte) * (args.size // 14 + 1)
        for m in range(args.mappers):
            node = m % n
            path = f"/bench/dfsio/part-{m:05d}"
            store.write_file(
                path, pattern[: args.size], node, meter.scope("dfs"),
                write_mode=args.write_mode or "buffered",
            )
    else:
        for m in range(args.mappers):
            node = m % n
            path = f"/bench/dfsio/part-{m:05d}"
            data = store.read_file(path, node, meter.scope("dfs"))
            if len(data) != args.size:
                raise RuntimeError(f"{path}: expected {args.size} bytes, got {len(data)}")
    wall = time.perf_counter() - t0
    total = args.mappers * args.size
    run_id = make_run_id(args, f"bench-dfsio-{args.op}")
    report = build_run_report(
        run_id, settings.echo(), meter.snapshot(),
        extras={
            "command": "bench dfsio",
            "op": args.op,
            "mappers": args.mappers,
            "bytes_per_mapper": args.size,
            "total_bytes": total,
            "per_node_mb_per_s": total / max(wall, 1e-9) / 1e6 / min(args.mappers, n),
        },
    )
    save_report(settings, report)
    snap = meter.snapshot().phases["dfs"]
    print(f"bench dfsio {args.op}: {args.mappers} mappers x {args.size} bytes; "
          f"disk_write={snap.disk_write_bytes} disk_read={snap.disk_read_bytes} "
          f"net_local={snap.net_local_bytes} net_remote={snap.net_remote_bytes}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    settings = Settings(args)
    if args.bench == "disk":
        return cmd_bench_disk(args, settings)
    return cmd_bench_dfsio(args, settings)


def cmd_report(args: argparse.Namespace) -> int:
    settings = Settings(args)
    path = runs_dir(settings) / args.run / "report.json"
    if not path.exists():
        raise FileNotFoundError(f"unknown run id {args.run!r} (no {path})")
    report = RunReport.from_json(path.read_text())
    if args.watts is not None:
        report = report.with_energy(args.watts)
    if args.format == "csv":
        print(report.to_csv(), end="")
    else:
        print(report.to_json())
        print(render_table(report))
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skymr",
        description="Mini MapReduce over a simulated replicated block store "
        "with sky pair-search workloads and balance accounting.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to key=value config file")
    common.add_argument("--store", dest="store_root", help="store root directory")
    common.add_argument("--nodes", type=int, help="logical node count")
    common.add_argument("--replication", type=int, choices=(1, 2, 3), help="replica count")
    common.add_argument("--block-size", dest="block_size", type=parse_size)
    common.add_argument("--run-id", help="explicit run id (default timestamp-seed)")

    p = sub.add_parser("generate", parents=[common], help="write a synthetic catalog")
    p.add_argument("--objects", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clustering", type=float, default=apps.DEFAULT_CLUSTERING)
    p.add_argument("--out", required=True, help="store path for the catalog")
    p.add_argument("--write-mode", choices=("buffered", "unbuffered"))
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("run", parents=[common], help="run a workload")
    p.add_argument("job", choices=("search", "stats"))
    p.add_argument("--theta", type=float, default=60.0, help="search radius in arcsec")
    p.add_argument("--input", default="/cat", help="catalog path in the store")
    p.add_argument("--out", help="output prefix in the store")
    p.add_argument("--codec", choices=("none", "lz"))
    p.add_argument("--write-mode", choices=("buffered", "unbuffered"))
    p.add_argument("--reducers", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--watts", type=float, help="plate power for the energy figure")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="I/O benchmarks")
    bench_sub = p.add_subparsers(dest="bench", required=True)
    b = bench_sub.add_parser("disk", parents=[common])
    b.add_argument("--files", type=int, default=10)
    b.add_argument("--size", type=parse_size, default=64 * MIB)
    b.add_argument("--mode", choices=("buffered", "unbuffered"), default="buffered")
    b.set_defaults(func=cmd_bench)
    b = bench_sub.add_parser("dfsio", parents=[common])
    b.add_argument("--op", choices=("read", "write"), required=True)
    b.add_argument("--mappers", type=int, default=3)
    b.add_argument("--size", type=parse_size, default=64 * MIB)
    b.add_argument("--write-mode", choices=("buffered", "unbuffered"))
    b.add_argument("--seed-byte", type=int, default=0)
    b.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", parents=[common], help="render a stored run report")
    p.add_argument("--run", required=True, help="run id under <store>/runs/")
    p.add_argument("--format", choices=("csv", "doc"), default="doc")
    p.add_argument("--watts", type=float)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # runtime errors exit 1 with a message
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
