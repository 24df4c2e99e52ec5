"""Deterministic MapReduce runtime over the simulated block store.

Map tasks buffer output in two memory regions sized by a SpillConfig:
a data buffer holding key/value payload and a metadata buffer holding
four 32-bit integers per record (partition, key start, value start,
record end).  Whichever buffer crosses its spill threshold first forces
a sort-and-spill to node-local disk; the final flush also counts as a
spill, and multiple spills are merge-sorted into a single segment per
task.  Reducers start only after every map task has finished, fetch
their partition from each segment (metered as local or remote network
traffic), k-way merge, group by key, and write output through the block
store.

Job output is byte-identical across runs and across worker-pool sizes:
tasks are independent, identified by position, and every counter update
is order-independent.

Segment file format (little-endian): a run of
[partition: u32][key_len: u32][val_len: u32][key][value] records sorted
by (partition, key), then one u64 offset per partition, then a trailer
[record_bytes: u64][num_partitions: u32][magic "SEG1"].
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

from .dfs import BlockStore, StoredFile
from .metering import Meter, MeterScope, MeterSnapshot, WorkModel

SEGMENT_MAGIC = b"SEG1"
RECORD_HEADER = struct.Struct("<III")
META_BYTES_PER_RECORD = 16  # four 32-bit integers
MIB = 1024 * 1024


class EngineError(Exception):
    pass


class MalformedInputError(EngineError):
    pass


class RecordTooLargeError(EngineError):
    pass


class FetchError(EngineError):
    pass


class TaskError(EngineError):
    def __init__(self, task_id: str, cause: BaseException):
        self.task_id = task_id
        self.cause = cause
        super().__init__(f"task {task_id} failed: {cause!r}")


def default_partitioner(key: bytes, num_reducers: int) -> int:
    """Byte-wise FNV-1a fold; deterministic and well spread."""
    h = 0xCBF29CE484222325
    for b in key:
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h % num_reducers


def identity_sort_key(key: bytes) -> bytes:
    return key


@dataclass(frozen=True)
class SpillConfig:
    """Dual-buffer sizing: record_percent of the buffer holds metadata."""

    total_buffer_bytes: int
    record_percent: float = 0.2
    spill_percent: float = 0.8

    def __post_init__(self) -> None:
        if self.total_buffer_bytes <= 0:
            raise ValueError("total_buffer_bytes must be positive")
        if not 0.0 < self.record_percent < 1.0:
            raise ValueError("record_percent must be in (0, 1)")
        if not 0.0 < self.spill_percent <= 1.0:
            raise ValueError("spill_percent must be in (0, 1]")
        if self.data_capacity_bytes <= 0 or self.meta_capacity_records <= 0:
            raise ValueError("both buffer capacities must be positive")

    @property
    def data_capacity_bytes(self) -> int:
        return int(self.total_buffer_bytes * (1.0 - self.record_percent))

    @property
    def meta_capacity_records(self) -> int:
        return int(self.total_buffer_bytes * self.record_percent / META_BYTES_PER_RECORD)


@dataclass(frozen=True)
class SpillRecommendation:
    """Buffer sizing that makes a map task spill exactly once."""

    data_need_bytes: float
    meta_need_bytes: float
    total_buffer_bytes: int
    record_percent: float

    def to_spill_config(self, spill_percent: float = 0.8) -> SpillConfig:
        return SpillConfig(self.total_buffer_bytes, self.record_percent, spill_percent)


def recommend_spill_config(
    split_bytes: int,
    in_record_bytes: int,
    out_record_bytes: int,
    record_growth_factor: float = 1.10,
    spill_percent: float = 0.8,
) -> SpillRecommendation:
    """Size the dual buffers so the expected map output fits one spill.

    The metadata share is the metadata fraction of the total need,
    rounded to two decimals; the total is the smallest whole-MiB buffer
    whose spill thresholds clear both needs.
    """
    if min(split_bytes, in_record_bytes, out_record_bytes) <= 0:
        raise ValueError("sizes must be positive")
    if record_growth_factor < 1.0:
        raise ValueError("record_growth_factor must be >= 1")
    if not 0.0 < spill_percent <= 1.0:
        raise ValueError("spill_percent must be in (0, 1]")

    records = (split_bytes // in_record_bytes) * record_growth_factor
    data_need = records * out_record_bytes
    meta_need = records * META_BYTES_PER_RECORD
    record_percent = round(meta_need / (data_need + meta_need), 2)
    record_percent = min(0.99, max(0.01, record_percent))

    total = MIB
    while True:
        data_cap = int(total * (1.0 - record_percent))
        meta_cap = int(total * record_percent / META_BYTES_PER_RECORD)
        if (
            spill_percent * data_cap >= data_need
            and spill_percent * meta_cap * META_BYTES_PER_RECORD >= meta_need
        ):
            break
        total += MIB
    return SpillRecommendation(data_need, meta_need, total, record_percent)


@dataclass(frozen=True)
class FixedRecordFormat:
    record_bytes: int

    def __post_init__(self) -> None:
        if self.record_bytes <= 0:
            raise ValueError("record_bytes must be positive")


@dataclass(frozen=True)
class LineRecordFormat:
    """Newline-delimited text records; each file is one split."""


@dataclass(frozen=True)
class InputSplit:
    path: str
    offset: int
    length: int
    preferred_nodes: tuple[int, ...]


def plan_splits(file: StoredFile, split_bytes: int, record_bytes: int) -> list[InputSplit]:
    """Contiguous record-aligned splits covering the file, each annotated
    with the replica nodes of the block holding its first byte."""
    if split_bytes <= 0 or split_bytes % record_bytes:
        raise ValueError("split_bytes must be a positive multiple of the record size")
    if file.length % record_bytes:
        raise MalformedInputError(
            f"{file.path}: length {file.length} is not a multiple of record size {record_bytes}"
        )
    splits: list[InputSplit] = []
    offset = 0
    while offset < file.length:
        length = min(split_bytes, file.length - offset)
        block_start = 0
        nodes: tuple[int, ...] = ()
        for block in file.blocks:
            if block_start <= offset < block_start + block.length:
                nodes = block.replicas
                break
            block_start += block.length
        splits.append(InputSplit(file.path, offset, length, nodes))
        offset += length
    return splits


@dataclass
class JobSpec:
    """Everything a job run needs; mapper/reducer are plain callables.

    A mapper takes one input record (bytes) and yields (key, value) byte
    pairs; a reducer takes a key and the list of its values and yields
    output byte strings.  Either callable may expose a take_work()
    method returning work units accumulated since the last call, which
    the engine drains into the meter after each record/group.
    """

    name: str
    mapper: Callable[[bytes], Iterable[tuple[bytes, bytes]]]
    reducer: Callable[[bytes, list[bytes]], Iterable[bytes]]
    num_reducers: int
    inputs: tuple[str, ...]
    output_prefix: str
    spill: SpillConfig
    input_format: FixedRecordFormat | LineRecordFormat
    partitioner: Callable[[bytes, int], int] = default_partitioner
    sort_key: Callable[[bytes], bytes] = identity_sort_key
    output_codec: str = "none"
    output_write_mode: str = "buffered"
    split_bytes: int | None = None  # None: largest record multiple <= block size

    def __post_init__(self) -> None:
        if self.num_reducers < 1:
            raise ValueError("num_reducers must be >= 1")
        if not self.inputs:
            raise ValueError("job needs at least one input path")


@dataclass(frozen=True)
class SegmentRef:
    """One partition's byte range inside a map task's segment file."""

    path: str
    node: int
    task_index: int
    partition: int
    offset: int
    length: int
    payload_bytes: int
    record_count: int


@dataclass
class TaskReport:
    task_id: str
    phase: str  # "map" or "reduce"
    node: int
    spill_count: int = 0
    bytes_sorted: int = 0
    bytes_merged: int = 0
    input_payload_bytes: int = 0
    output_payload_bytes: int = 0
    records_in: int = 0
    records_out: int = 0
    wall_seconds: float = 0.0
    meter_delta: MeterSnapshot | None = None


@dataclass
class JobReport:
    job_id: str
    name: str
    map_reports: list[TaskReport]
    reduce_reports: list[TaskReport]
    output_paths: list[str]
    delta: MeterSnapshot
    wall_seconds: float
    extras: dict = field(default_factory=dict)

    @property
    def map_output_payload_bytes(self) -> int:
        return sum(r.output_payload_bytes for r in self.map_reports)

    @property
    def reduce_input_payload_bytes(self) -> int:
        return sum(r.input_payload_bytes for r in self.reduce_reports)


@dataclass(frozen=True)
class JobTopology:
    """Where each map task's segment lives and where each reducer runs."""

    map_task_nodes: tuple[int, ...]
    reducer_nodes: tuple[int, ...]


# -- segment files ---------------------------------------------------------


def _write_segment(
    path: Path,
    sorted_records: Iterable[tuple[int, bytes, bytes]],
    num_partitions: int,
) -> tuple[int, list[SegmentRef]]:
    """Write records (already sorted by (partition, key)) plus the
    partition-offset footer; returns (file bytes, per-partition refs)."""
    buf = bytearray()
    offsets = [0] * (num_partitions + 1)
    payloads = [0] * num_partitions
    counts = [0] * num_partitions
    current = 0
    for partition, key, value in sorted_records:
        while current < partition:
            current += 1
            offsets[current] = len(buf)
        buf += RECORD_HEADER.pack(partition, len(key), len(value))
        buf += key
        buf += value
        payloads[partition] += len(key) + len(value)
        counts[partition] += 1
    while current < num_partitions:
        current += 1
        offsets[current] = len(buf)

    record_bytes = len(buf)
    for p in range(num_partitions):
        buf += struct.pack("<Q", offsets[p])
    buf += struct.pack("<QI", record_bytes, num_partitions)
    buf += SEGMENT_MAGIC
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf)

    refs = [
        SegmentRef(
            path=str(path),
            node=-1,  # filled by the caller
            task_index=-1,
            partition=p,
            offset=offsets[p],
            length=offsets[p + 1] - offsets[p],
            payload_bytes=payloads[p],
            record_count=counts[p],
        )
        for p in range(num_partitions)
    ]
    return len(buf), refs


def _iter_segment_records(blob: bytes) -> Iterator[tuple[int, bytes, bytes]]:
    pos = 0
    end = len(blob)
    while pos < end:
        partition, klen, vlen = RECORD_HEADER.unpack_from(blob, pos)
        pos += RECORD_HEADER.size
        key = blob[pos : pos + klen]
        pos += klen
        value = blob[pos : pos + vlen]
        pos += vlen
        yield partition, key, value


def _parse_footer(raw: bytes, name: str) -> tuple[int, list[int]]:
    if len(raw) < 16 or raw[-4:] != SEGMENT_MAGIC:
        raise FetchError(f"{name}: not a segment file")
    record_bytes, num_partitions = struct.unpack_from("<QI", raw, len(raw) - 16)
    offsets = [
        struct.unpack_from("<Q", raw, record_bytes + 8 * p)[0] for p in range(num_partitions)
    ]
    return record_bytes, offsets


def read_segment_footer(path: Path) -> tuple[int, list[int]]:
    """(record region length, partition offsets) from a segment file."""
    return _parse_footer(path.read_bytes(), str(path))


# -- map side ----------------------------------------------------------------


class _SpillBuffer:
    """The two map-side buffers: payload bytes plus per-record metadata."""

    def __init__(self, cfg: SpillConfig):
        self.cfg = cfg
        self.data = bytearray()
        self.metas: list[tuple[int, int, int, int]] = []
        self._data_trigger = cfg.spill_percent * cfg.data_capacity_bytes
        self._meta_trigger = cfg.spill_percent * cfg.meta_capacity_records

    def would_overflow(self, record_size: int) -> bool:
        return (
            len(self.data) + record_size > self.cfg.data_capacity_bytes
            or len(self.metas) + 1 > self.cfg.meta_capacity_records
        )

    def add(self, partition: int, key: bytes, value: bytes) -> bool:
        """Append one record; True when a threshold was crossed."""
        key_start = len(self.data)
        self.data += key
        value_start = len(self.data)
        self.data += value
        self.metas.append((partition, key_start, value_start, len(self.data)))
        return len(self.data) >= self._data_trigger or len(self.metas) >= self._meta_trigger

    def drain_sorted(self, sort_key: Callable[[bytes], bytes]) -> list[tuple[int, bytes, bytes]]:
        data = bytes(self.data)
        records = [
            (p, data[ks:vs], data[vs:re])
            for p, ks, vs, re in self.metas
        ]
        records.sort(key=lambda rec: (rec[0], sort_key(rec[1])))
        self.data.clear()
        self.metas.clear()
        return records


def _iter_split_records(
    split: InputSplit,
    fmt: FixedRecordFormat | LineRecordFormat,
    store: BlockStore,
    node: int,
    scope: MeterScope,
) -> tuple[list[bytes], int]:
    if isinstance(fmt, FixedRecordFormat):
        blob = store.read_range(split.path, split.offset, split.length, node, scope)
        rb = fmt.record_bytes
        if len(blob) % rb:
            raise MalformedInputError(f"split of {split.path} not record-aligned")
        return [blob[i : i + rb] for i in range(0, len(blob), rb)], len(blob)
    blob = store.read_file(split.path, node, scope)
    return [line for line in blob.split(b"\n") if line], len(blob)


def _drain_work(fn, scope: MeterScope) -> None:
    take = getattr(fn, "take_work", None)
    if take is not None:
        scope.work(take())


def run_map_task(
    task_index: int,
    split: InputSplit,
    node: int,
    spec: JobSpec,
    store: BlockStore,
    meter: Meter,
    scratch_tag: str,
) -> tuple[list[SegmentRef], TaskReport]:
    """Read, map, buffer, sort, spill, and merge one split."""
    t0 = time.perf_counter()
    model = store.work_model
    scope = meter.scope("map", "mapper")
    report = TaskReport(task_id=f"{scratch_tag}_map{task_index:04d}", phase="map", node=node)

    records, read_bytes = _iter_split_records(split, spec.input_format, store, node, scope)
    report.records_in = len(records)
    report.input_payload_bytes = read_bytes

    buffer = _SpillBuffer(spec.spill)
    scratch = store.scratch_dir(node)
    spill_paths: list[Path] = []
    spill_file_bytes: list[int] = []
    last_refs: list[SegmentRef] = []

    def spill() -> None:
        nonlocal last_refs
        records_out = buffer.drain_sorted(spec.sort_key)
        scope.work(model.sort_work(len(records_out)))
        path = scratch / f"{report.task_id}_spill{len(spill_paths)}.seg"
        file_bytes, last_refs = _write_segment(path, records_out, spec.num_reducers)
        meter.add("map", "mapper", disk_write=file_bytes,
                  work=model.per_byte_lane_copied * file_bytes)
        report.bytes_sorted += sum(len(k) + len(v) for _, k, v in records_out)
        report.spill_count += 1
        spill_paths.append(path)
        spill_file_bytes.append(file_bytes)

    for record in records:
        for key, value in spec.mapper(record):
            if not key:
                raise MalformedInputError("mapper emitted an empty key")
            size = len(key) + len(value)
            if size > spec.spill.data_capacity_bytes:
                raise RecordTooLargeError(
                    f"map output record of {size} bytes exceeds the data buffer "
                    f"capacity of {spec.spill.data_capacity_bytes}"
                )
            partition = spec.partitioner(key, spec.num_reducers)
            if not 0 <= partition < spec.num_reducers:
                raise EngineError(f"partitioner returned {partition} for {spec.num_reducers} reducers")
            if buffer.would_overflow(size):
                spill()
            if buffer.add(partition, key, value):
                spill()
            report.records_out += 1
            report.output_payload_bytes += size
        _drain_work(spec.mapper, scope)

    spill()  # final flush always counts as a spill

    final_path = scratch / f"{report.task_id}.seg"
    if len(spill_paths) == 1:
        spill_paths[0].rename(final_path)
        refs = last_refs
    else:
        blobs = []
        for path, fbytes in zip(spill_paths, spill_file_bytes):
            raw = path.read_bytes()
            record_bytes, _ = _parse_footer(raw, str(path))
            blobs.append(raw[:record_bytes])
            meter.add("map", "mapper", disk_read=fbytes,
                      work=model.per_byte_lane_copied * fbytes)
        merged = heapq.merge(
            *(_iter_segment_records(blob) for blob in blobs),
            key=lambda rec: (rec[0], spec.sort_key(rec[1])),
        )
        file_bytes, refs = _write_segment(final_path, merged, spec.num_reducers)
        scope.work(model.merge_work(report.records_out, len(spill_paths)))
        meter.add("map", "mapper", disk_write=file_bytes,
                  work=model.per_byte_lane_copied * file_bytes)
        report.bytes_merged = sum(len(b) for b in blobs)
        for path in spill_paths:
            path.unlink()

    refs = [
        SegmentRef(
            path=str(final_path), node=node, task_index=task_index,
            partition=r.partition, offset=r.offset, length=r.length,
            payload_bytes=r.payload_bytes, record_count=r.record_count,
        )
        for r in refs
    ]
    report.wall_seconds = time.perf_counter() - t0
    meter.add("map", "mapper", wall=report.wall_seconds)
    return refs, report


# -- shuffle + reduce --------------------------------------------------------


def shuffle_fetch(
    reducer_index: int,
    segments: list[SegmentRef],
    topology: JobTopology,
    meter: Meter,
    sort_key: Callable[[bytes], bytes] = identity_sort_key,
    work_model: WorkModel | None = None,
) -> Iterator[tuple[bytes, bytes]]:
    """Merged sorted stream of this reducer's partition from every segment."""
    model = work_model or WorkModel()
    reducer_node = topology.reducer_nodes[reducer_index]
    mine = sorted(
        (ref for ref in segments if ref.partition == reducer_index),
        key=lambda ref: ref.task_index,
    )
    runs: list[list[tuple[bytes, bytes]]] = []
    total_records = 0
    for ref in mine:
        path = Path(ref.path)
        if not path.exists():
            raise FetchError(f"segment {ref.path} for partition {reducer_index} is missing")
        with open(path, "rb") as fh:
            fh.seek(ref.offset)
            blob = fh.read(ref.length)
        local = ref.node == reducer_node
        meter.add(
            "shuffle",
            "reducer",
            disk_read=ref.length,
            net_local=ref.length if local else 0,
            net_remote=0 if local else ref.length,
            work=model.per_byte_lane_copied * 2 * ref.length,
        )
        run = [(key, value) for _, key, value in _iter_segment_records(blob)]
        total_records += len(run)
        runs.append(run)
    if len(runs) > 1:
        meter.add("shuffle", "reducer", work=model.merge_work(total_records, len(runs)))
    return heapq.merge(*runs, key=lambda kv: sort_key(kv[0]))


def run_reduce_task(
    reducer_index: int,
    node: int,
    spec: JobSpec,
    segments: list[SegmentRef],
    topology: JobTopology,
    store: BlockStore,
    meter: Meter,
    scratch_tag: str,
) -> tuple[str, TaskReport]:
    """Fetch, merge, group, reduce, and write one reducer's output."""
    t0 = time.perf_counter()
    model = store.work_model
    report = TaskReport(
        task_id=f"{scratch_tag}_reduce{reducer_index:04d}", phase="reduce", node=node
    )
    t_shuffle = time.perf_counter()
    stream = shuffle_fetch(reducer_index, segments, topology, meter, spec.sort_key, model)
    grouped = itertools.groupby(stream, key=lambda kv: spec.sort_key(kv[0]))
    meter.add("shuffle", "reducer", wall=time.perf_counter() - t_shuffle)

    scope = meter.scope("reduce", "reducer")
    out = bytearray()
    try:
        for _, group in grouped:
            group = list(group)
            key = group[0][0]
            values = [v for _, v in group]
            report.records_in += len(values)
            report.input_payload_bytes += sum(len(k) + len(v) for k, v in group)
            scope.work(model.per_key_comparison * len(values))
            for piece in spec.reducer(key, values):
                out += piece
                report.records_out += 1
            _drain_work(spec.reducer, scope)
    except EngineError:
        raise
    except Exception as exc:
        raise TaskError(report.task_id, exc) from exc

    report.output_payload_bytes = len(out)
    output_path = f"{spec.output_prefix}/part-{reducer_index:05d}"
    store.write_file(
        output_path,
        bytes(out),
        writer_node=node,
        scope=scope,
        codec=spec.output_codec,
        write_mode=spec.output_write_mode,
    )
    report.wall_seconds = time.perf_counter() - t0
    meter.add("reduce", "reducer", wall=report.wall_seconds)
    return output_path, report


# -- whole job ---------------------------------------------------------------


def _schedule_map_tasks(
    splits: list[InputSplit], node_count: int, mappers_max: int | None
) -> list[int]:
    """Locality-preferring deterministic assignment: replica node with the
    fewest tasks wins, ties to the lowest node id."""
    load = [0] * node_count
    nodes = []
    for split in splits:
        candidates = [n for n in split.preferred_nodes if n < node_count]
        if mappers_max is not None:
            open_candidates = [n for n in candidates if load[n] < mappers_max]
            candidates = open_candidates or []
        if not candidates:
            candidates = list(range(node_count))
        best = min(candidates, key=lambda n: (load[n], n))
        load[best] += 1
        nodes.append(best)
    return nodes


def run_job(
    spec: JobSpec,
    store: BlockStore,
    meter: Meter,
    workers: int = 1,
    job_id: str | None = None,
    mappers_max: int | None = None,
) -> JobReport:
    """Execute a full job; output is invariant to workers and scheduling."""
    t0 = time.perf_counter()
    job_id = job_id or f"job_{hashlib.sha1(spec.name.encode()).hexdigest()[:8]}"
    before = meter.snapshot()

    splits: list[InputSplit] = []
    for path in spec.inputs:
        meta = store.lookup(path)
        if isinstance(spec.input_format, FixedRecordFormat):
            rb = spec.input_format.record_bytes
            split_bytes = spec.split_bytes or max(rb, store.cluster.block_bytes // rb * rb)
            splits.extend(plan_splits(meta, split_bytes, rb))
        else:
            nodes = meta.blocks[0].replicas if meta.blocks else ()
            splits.append(InputSplit(meta.path, 0, meta.length, nodes))

    map_nodes = _schedule_map_tasks(splits, store.cluster.node_count, mappers_max)
    reducer_nodes = tuple(r % store.cluster.node_count for r in range(spec.num_reducers))
    topology = JobTopology(tuple(map_nodes), reducer_nodes)

    def map_one(i: int) -> tuple[list[SegmentRef], TaskReport]:
        child = Meter()
        try:
            refs, rep = run_map_task(i, splits[i], map_nodes[i], spec, store, child, job_id)
        except EngineError:
            raise
        except Exception as exc:
            raise TaskError(f"{job_id}_map{i:04d}", exc) from exc
        delta = child.snapshot()
        rep.meter_delta = delta
        meter.fold(delta)
        return refs, rep

    def reduce_one(r: int) -> tuple[str, TaskReport]:
        child = Meter()
        path, rep = run_reduce_task(
            r, reducer_nodes[r], spec, segments, topology, store, child, job_id
        )
        delta = child.snapshot()
        rep.meter_delta = delta
        meter.fold(delta)
        return path, rep

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        map_results = list(pool.map(map_one, range(len(splits))))
    segments = [ref for refs, _ in map_results for ref in refs]
    map_reports = [rep for _, rep in map_results]

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        reduce_results = list(pool.map(reduce_one, range(spec.num_reducers)))
    output_paths = [path for path, _ in reduce_results]
    reduce_reports = [rep for _, rep in reduce_results]

    wall = time.perf_counter() - t0
    return JobReport(
        job_id=job_id,
        name=spec.name,
        map_reports=map_reports,
        reduce_reports=reduce_reports,
        output_paths=output_paths,
        delta=meter.snapshot().delta(before),
        wall_seconds=wall,
    )


def job_output_digest(store: BlockStore, report: JobReport, meter: Meter) -> str:
    """SHA-256 over the decoded output files in path order."""
    scope = meter.scope("dfs")
    h = hashlib.sha256()
    for path in report.output_paths:
        h.update(store.read_file(path, 0, scope))
    return h.hexdigest()
