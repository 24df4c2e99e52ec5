"""MapReduce runtime: splits, spill mechanics, shuffle, determinism."""

import struct

import pytest

from skymr.dfs import BlockMeta, BlockStore, ClusterSpec, StoredFile
from skymr.engine import (
    MIB,
    FixedRecordFormat,
    JobSpec,
    JobTopology,
    LineRecordFormat,
    MalformedInputError,
    RecordTooLargeError,
    SegmentRef,
    SpillConfig,
    _write_segment,
    default_partitioner,
    job_output_digest,
    plan_splits,
    read_segment_footer,
    recommend_spill_config,
    run_job,
    run_map_task,
    shuffle_fetch,
)
from skymr.metering import Meter


def make_store(tmp_path, nodes=4, replication=2, block_bytes=64 * 1024, bpc=512):
    cluster = ClusterSpec(
        node_count=nodes,
        replication=replication,
        block_bytes=block_bytes,
        bytes_per_checksum=bpc,
        root_dir=str(tmp_path / "store"),
    )
    return BlockStore(cluster)


def fixed_record_file(store, meter, path, n_records, record_bytes=16, node=0):
    data = b"".join(
        struct.pack("<Q", i) + bytes([i % 251]) * (record_bytes - 8) for i in range(n_records)
    )
    store.write_file(path, data, node, meter.scope("dfs"))
    return data


def kv_identity_spec(store, n_reducers=2, spill=None, split_bytes=None, name="job"):
    def mapper(rec):
        yield rec[:8], rec[8:]

    def reducer(key, values):
        for v in values:
            yield key + v

    return JobSpec(
        name=name,
        mapper=mapper,
        reducer=reducer,
        num_reducers=n_reducers,
        inputs=("/in",),
        output_prefix="/out",
        spill=spill or SpillConfig(1 * MIB),
        input_format=FixedRecordFormat(16),
        split_bytes=split_bytes,
    )


# -- recommend_spill_config ---------------------------------------------------


def test_recommend_reproduces_shuffle_sizing():
    rec = recommend_spill_config(64 * MIB, 57, 63, 1.10, 0.8)
    assert rec.data_need_bytes / MIB == pytest.approx(77, abs=1)
    assert rec.meta_need_bytes / MIB == pytest.approx(20, abs=1)
    assert rec.record_percent == pytest.approx(0.20, abs=0.01)
    assert 123 * MIB <= rec.total_buffer_bytes <= 126 * MIB


def test_recommend_single_record_floor_is_one_mib():
    rec = recommend_spill_config(57, 57, 63, 1.0, 1.0)
    assert rec.data_need_bytes == 63
    assert rec.meta_need_bytes == 16
    assert rec.total_buffer_bytes == MIB


def test_recommend_exact_integer_arithmetic():
    rec = recommend_spill_config(64 * MIB, 57, 63, 1.0, 1.0)
    assert rec.data_need_bytes == (64 * MIB // 57) * 63 == 74172924
    assert rec.meta_need_bytes == (64 * MIB // 57) * 16 == 18837568


def test_recommend_rejects_bad_inputs():
    with pytest.raises(ValueError):
        recommend_spill_config(0, 57, 63)
    with pytest.raises(ValueError):
        recommend_spill_config(MIB, 57, 63, record_growth_factor=0.5)


def test_recommended_config_satisfies_one_spill_inequalities():
    rec = recommend_spill_config(64 * MIB, 57, 63, 1.10, 0.8)
    cfg = rec.to_spill_config(0.8)
    assert 0.8 * cfg.data_capacity_bytes >= rec.data_need_bytes
    assert 0.8 * cfg.meta_capacity_records * 16 >= rec.meta_need_bytes
    # and one MiB less must violate a constraint (minimality)
    smaller = SpillConfig(rec.total_buffer_bytes - MIB, rec.record_percent, 0.8)
    assert (
        0.8 * smaller.data_capacity_bytes < rec.data_need_bytes
        or 0.8 * smaller.meta_capacity_records * 16 < rec.meta_need_bytes
    )


def test_spill_config_validation():
    with pytest.raises(ValueError):
        SpillConfig(0)
    with pytest.raises(ValueError):
        SpillConfig(MIB, record_percent=0.0)
    with pytest.raises(ValueError):
        SpillConfig(MIB, spill_percent=1.5)
    with pytest.raises(ValueError):
        SpillConfig(64, record_percent=0.01)  # meta capacity would be zero


# -- plan_splits -----------------------------------------------------------------


def fake_file(length, block_bytes=64 * MIB, replicas=((0, 1, 2),)):
    blocks = []
    offset = 0
    i = 0
    while offset < length:
        blen = min(block_bytes, length - offset)
        blocks.append(BlockMeta(f"blk_{i}", blen, replicas[i % len(replicas)]))
        offset += blen
        i += 1
    return StoredFile("/fake", length, length, "none", "buffered", tuple(blocks))


def test_plan_splits_single():
    splits = plan_splits(fake_file(64 * MIB), 64 * MIB, 64)
    assert len(splits) == 1
    assert splits[0].offset == 0 and splits[0].length == 64 * MIB


def test_plan_splits_three_even():
    splits = plan_splits(fake_file(192 * MIB), 64 * MIB, 64)
    assert [s.offset for s in splits] == [0, 64 * MIB, 128 * MIB]
    assert all(s.length == 64 * MIB for s in splits)


def test_plan_splits_tail():
    splits = plan_splits(fake_file(100 * MIB), 64 * MIB, 64)
    assert [(s.offset, s.length) for s in splits] == [(0, 64 * MIB), (64 * MIB, 36 * MIB)]


def test_plan_splits_locality_annotation():
    f = fake_file(128 * MIB, replicas=((0, 1, 2), (3, 1, 0)))
    splits = plan_splits(f, 64 * MIB, 64)
    assert splits[0].preferred_nodes == (0, 1, 2)
    assert splits[1].preferred_nodes == (3, 1, 0)


def test_plan_splits_rejects_misaligned():
    with pytest.raises(ValueError):
        plan_splits(fake_file(1024), 100, 64)  # split not a record multiple
    with pytest.raises(MalformedInputError):
        plan_splits(fake_file(1000), 640, 64)  # file not a record multiple


# -- map task mechanics ------------------------------------------------------------


def run_single_map(tmp_path, n_records, spill, n_reducers=2, record_bytes=16):
    store = make_store(tmp_path)
    meter = Meter()
    fixed_record_file(store, meter, "/in", n_records, record_bytes)
    spec = kv_identity_spec(store, n_reducers, spill)
    spec = JobSpec(**{**spec.__dict__, "input_format": FixedRecordFormat(record_bytes)})
    splits = plan_splits(store.lookup("/in"), max(record_bytes, n_records * record_bytes), record_bytes)
    if not splits:
        splits = [plan_splits(fake_file(0), record_bytes, record_bytes)]
    refs, report = run_map_task(0, splits[0], 0, spec, store, meter, "t")
    return store, meter, refs, report


def test_empty_split_final_flush_counts_as_spill(tmp_path):
    store = make_store(tmp_path)
    meter = Meter()
    store.write_file("/in", b"", 0, meter.scope("dfs"))
    spec = kv_identity_spec(store)
    from skymr.engine import InputSplit

    split = InputSplit("/in", 0, 0, (0,))
    refs, report = run_map_task(0, split, 0, spec, store, meter, "t")
    assert report.spill_count == 1
    assert report.records_out == 0
    assert all(r.length == 0 for r in refs)


def test_small_output_single_spill_no_merge(tmp_path):
    _, _, refs, report = run_single_map(tmp_path, 500, SpillConfig(1 * MIB))
    assert report.spill_count == 1
    assert report.bytes_merged == 0
    assert report.records_out == 500


def test_multi_spill_then_merge_sorted(tmp_path):
    # 1000 records x 128 payload bytes = 128000 payload against a 51200-byte
    # data trigger: two threshold spills plus the final flush, then a merge
    spill = SpillConfig(80000, record_percent=0.2, spill_percent=0.8)
    assert spill.data_capacity_bytes == 64000
    store, meter, refs, report = run_single_map(tmp_path, 1000, spill, record_bytes=128)
    assert report.spill_count == 3
    assert report.bytes_merged > 0
    # merged segment must be globally sorted by (partition, key)
    seg = refs[0].path
    raw = open(seg, "rb").read()
    record_bytes, _ = read_segment_footer(__import__("pathlib").Path(seg))
    from skymr.engine import _iter_segment_records

    seen = [(p, k) for p, k, _ in _iter_segment_records(raw[:record_bytes])]
    assert seen == sorted(seen)
    assert len(seen) == 1000


def test_meta_buffer_can_trigger_spills(tmp_path):
    # generous data space but only ~50 metadata slots
    spill = SpillConfig(4000, record_percent=0.2, spill_percent=0.8)
    assert spill.meta_capacity_records == 50
    store, meter, refs, report = run_single_map(tmp_path, 200, spill)
    assert report.spill_count >= 4


def test_record_too_large_rejected(tmp_path):
    store = make_store(tmp_path)
    meter = Meter()
    fixed_record_file(store, meter, "/in", 4, record_bytes=16)

    def fat_mapper(rec):
        yield rec[:8], b"v" * 10000

    spec = JobSpec(
        name="fat", mapper=fat_mapper, reducer=lambda k, v: [],
        num_reducers=1, inputs=("/in",), output_prefix="/out",
        spill=SpillConfig(10000, 0.2, 0.8), input_format=FixedRecordFormat(16),
    )
    splits = plan_splits(store.lookup("/in"), 64, 16)
    with pytest.raises(RecordTooLargeError):
        run_map_task(0, splits[0], 0, spec, store, meter, "t")


def test_empty_key_rejected(tmp_path):
    store = make_store(tmp_path)
    meter = Meter()
    fixed_record_file(store, meter, "/in", 2)

    def bad_mapper(rec):
        yield b"", rec

    spec = JobSpec(
        name="bad", mapper=bad_mapper, reducer=lambda k, v: [],
        num_reducers=1, inputs=("/in",), output_prefix="/out",
        spill=SpillConfig(MIB), input_format=FixedRecordFormat(16),
    )
    splits = plan_splits(store.lookup("/in"), 32, 16)
    with pytest.raises(MalformedInputError):
        run_map_task(0, splits[0], 0, spec, store, meter, "t")


def test_segment_wire_format_by_hand(tmp_path):
    """Freeze the external segment layout with raw struct parsing."""
    path = tmp_path / "seg"
    records = [(0, b"ka", b"v1"), (1, b"kb", b"v22"), (1, b"kc", b"")]
    _write_segment(path, records, 3)
    raw = path.read_bytes()
    assert raw[-4:] == b"SEG1"
    record_bytes, num_partitions = struct.unpack_from("<QI", raw, len(raw) - 16)
    assert num_partitions == 3
    offsets = [struct.unpack_from("<Q", raw, record_bytes + 8 * p)[0] for p in range(3)]
    assert offsets == [0, 16, 16 + 17 + 14]  # partition 2 is empty and starts at the end
    p, klen, vlen = struct.unpack_from("<III", raw, 0)
    assert (p, klen, vlen) == (0, 2, 2)
    assert raw[12:14] == b"ka" and raw[14:16] == b"v1"


# -- shuffle ---------------------------------------------------------------------


def write_plain_segment(tmp_path, name, records, n_partitions, node, task_index):
    path = tmp_path / name
    _, refs = _write_segment(path, records, n_partitions)
    return [
        SegmentRef(str(path), node, task_index, r.partition, r.offset, r.length,
                   r.payload_bytes, r.record_count)
        for r in refs
    ]


def test_shuffle_single_segment_pass_through(tmp_path):
    records = [(0, bytes([k]), b"v" * k) for k in range(20)]
    refs = write_plain_segment(tmp_path, "s0", records, 1, node=0, task_index=0)
    meter = Meter()
    topo = JobTopology((0,), (0,))
    out = list(shuffle_fetch(0, refs, topo, meter))
    assert out == [(k, v) for _, k, v in records]


def test_shuffle_three_mappers_merged_order(tmp_path):
    refs = []
    for t in range(3):
        records = [(0, struct.pack(">I", k), struct.pack("<I", t)) for k in range(1, 101)]
        refs += write_plain_segment(tmp_path, f"s{t}", records, 1, node=t % 2, task_index=t)
    meter = Meter()
    topo = JobTopology((0, 1, 0), (0,))
    out = list(shuffle_fetch(0, refs, topo, meter))
    assert len(out) == 300
    keys = [k for k, _ in out]
    assert keys == sorted(keys)
    # stability: equal keys keep task order 0, 1, 2
    for i in range(0, 300, 3):
        assert [struct.unpack("<I", v)[0] for _, v in out[i : i + 3]] == [0, 1, 2]


def test_shuffle_locality_accounting(tmp_path):
    # three equal segments, reducer co-located with two of them
    refs = []
    records = [(0, b"k%03d" % k, b"x" * 4) for k in range(50)]
    for t, node in enumerate([1, 1, 3]):
        refs += write_plain_segment(tmp_path, f"s{t}", records, 1, node=node, task_index=t)
    seg_bytes = refs[0].length
    meter = Meter()
    topo = JobTopology((1, 1, 3), (1,))
    list(shuffle_fetch(0, refs, topo, meter))
    snap = meter.snapshot().phases["shuffle"]
    assert snap.net_local_bytes == 2 * seg_bytes
    assert snap.net_remote_bytes == 1 * seg_bytes
    assert snap.net_local_bytes + snap.net_remote_bytes == snap.disk_read_bytes


def test_shuffle_missing_segment_raises(tmp_path):
    refs = [SegmentRef(str(tmp_path / "gone"), 0, 0, 0, 0, 10, 10, 1)]
    meter = Meter()
    from skymr.engine import FetchError

    with pytest.raises(FetchError):
        list(shuffle_fetch(0, refs, JobTopology((0,), (0,)), meter))


# -- whole jobs -------------------------------------------------------------------


def test_job_identity_single_reducer_sorts_input(tmp_path):
    store = make_store(tmp_path)
    meter = Meter()
    import random

    rng = random.Random(5)
    ids = list(range(300))
    rng.shuffle(ids)
    data = b"".join(struct.pack("<Q", i) + struct.pack("<Q", i * 7) for i in ids)
    store.write_file("/in", data, 0, meter.scope("dfs"))

    def mapper(rec):
        yield rec[:8], rec[8:]

    def reducer(key, values):
        for v in values:
            yield key + v

    spec = JobSpec(
        name="sortjob", mapper=mapper, reducer=reducer, num_reducers=1,
        inputs=("/in",), output_prefix="/out", spill=SpillConfig(MIB),
        input_format=FixedRecordFormat(16),
        sort_key=lambda k: k[::-1],  # little-endian ids: reverse for numeric order
    )
    report = run_job(spec, store, meter)
    out = store.read_file(report.output_paths[0], 0, meter.scope("dfs"))
    got = [struct.unpack_from("<Q", out, i)[0] for i in range(0, len(out), 16)]
    assert got == sorted(ids)


def test_job_group_sizes(tmp_path):
    store = make_store(tmp_path)
    meter = Meter()
    recs = [(b"aaaaaaaa", b"1"), (b"aaaaaaaa", b"2"), (b"bbbbbbbb", b"3")]
    data = b"".join(k + v + b"0" * 7 for k, v in recs)
    store.write_file("/in", data, 0, meter.scope("dfs"))
    calls = []

    def mapper(rec):
        yield rec[:8], rec[8:9]

    def reducer(key, values):
        calls.append((key, len(values)))
        return []

    spec = JobSpec(
        name="groups", mapper=mapper, reducer=reducer, num_reducers=1,
        inputs=("/in",), output_prefix="/out", spill=SpillConfig(MIB),
        input_format=FixedRecordFormat(16),
    )
    run_job(spec, store, meter)
    assert calls == [(b"aaaaaaaa", 2), (b"bbbbbbbb", 1)]


def test_job_empty_partition_creates_empty_output(tmp_path):
    store = make_store(tmp_path)
    meter = Meter()
    fixed_record_file(store, meter, "/in", 1)
    spec = kv_identity_spec(store, n_reducers=4)
    report = run_job(spec, store, meter)
    assert len(report.output_paths) == 4
    lengths = [store.lookup(p).length for p in report.output_paths]
    assert lengths.count(0) == 3  # one record lands in exactly one partition


def test_job_deterministic_across_worker_counts(tmp_path):
    digests = []
    byte_views = []
    for workers in (1, 4, 8):
        store = make_store(tmp_path / f"w{workers}")
        meter = Meter()
        fixed_record_file(store, meter, "/in", 5000)
        base = meter.snapshot()
        spec = kv_identity_spec(store, n_reducers=3, split_bytes=16 * 250)
        report = run_job(spec, store, meter, workers=workers)
        digests.append(job_output_digest(store, report, Meter()))
        delta = meter.snapshot().delta(base)
        byte_views.append(
            {
                name: (c.disk_read_bytes, c.disk_write_bytes, c.net_local_bytes,
                       c.net_remote_bytes, c.work_units)
                for view in (delta.phases, delta.classes)
                for name, c in view.items()
            }
        )
    assert digests[0] == digests[1] == digests[2]
    assert byte_views[0] == byte_views[1] == byte_views[2]


def test_job_meter_equals_sum_of_task_deltas(tmp_path):
    store = make_store(tmp_path)
    meter = Meter()
    fixed_record_file(store, meter, "/in", 2000)
    base = meter.snapshot()
    spec = kv_identity_spec(store, n_reducers=3, split_bytes=16 * 500)
    report = run_job(spec, store, meter, workers=4)
    delta = meter.snapshot().delta(base)
    total = {}
    for rep in report.map_reports + report.reduce_reports:
        for phase, c in rep.meter_delta.phases.items():
            cur = total.setdefault(phase, [0, 0, 0, 0, 0.0])
            cur[0] += c.disk_read_bytes
            cur[1] += c.disk_write_bytes
            cur[2] += c.net_local_bytes
            cur[3] += c.net_remote_bytes
            cur[4] += c.work_units
    for phase, c in delta.phases.items():
        got = total.get(phase, [0, 0, 0, 0, 0.0])
        assert got == [c.disk_read_bytes, c.disk_write_bytes, c.net_local_bytes,
                       c.net_remote_bytes, c.work_units], phase


def test_job_shuffle_conserves_payload(tmp_path):
    store = make_store(tmp_path)
    meter = Meter()
    fixed_record_file(store, meter, "/in", 3000)
    spec = kv_identity_spec(store, n_reducers=5, split_bytes=16 * 700)
    report = run_job(spec, store, meter, workers=2)
    assert report.map_output_payload_bytes == report.reduce_input_payload_bytes
    # shuffle lanes must cover exactly the framed partition ranges
    snap = report.delta.phases["shuffle"]
    assert snap.net_local_bytes + snap.net_remote_bytes == snap.disk_read_bytes


def test_job_locality_all_map_inputs_local(tmp_path):
    store = make_store(tmp_path, nodes=8, replication=3, block_bytes=4096)
    meter = Meter()
    data = bytes(8 * 4096)  # 8 blocks
    store.write_file("/in", data, 0, meter.scope("dfs"))
    spec = kv_identity_spec(store, n_reducers=2, split_bytes=4096)
    spec.inputs = ("/in",)
    report = run_job(spec, store, meter)
    assert len(report.map_reports) == 8
    for rep in report.map_reports:
        dfs = rep.meter_delta.phases["dfs"]
        assert dfs.net_remote_bytes == 0, f"{rep.task_id} read remotely"


def test_line_record_format_jobs(tmp_path):
    store = make_store(tmp_path)
    meter = Meter()
    store.write_file("/lines", b"alpha 1\nbeta 2\nalpha 3\n", 0, meter.scope("dfs"))

    def mapper(line):
        word, n = line.split()
        yield word, n

    def reducer(key, values):
        yield key + b":" + str(sum(int(v) for v in values)).encode() + b"\n"

    spec = JobSpec(
        name="wc", mapper=mapper, reducer=reducer, num_reducers=1,
        inputs=("/lines",), output_prefix="/out", spill=SpillConfig(MIB),
        input_format=LineRecordFormat(),
    )
    report = run_job(spec, store, meter)
    out = store.read_file(report.output_paths[0], 0, meter.scope("dfs"))
    assert out == b"alpha:4\nbeta:2\n"


def test_default_partitioner_spread_and_range():
    buckets = [0] * 7
    for i in range(1000):
        p = default_partitioner(struct.pack("<Q", i), 7)
        assert 0 <= p < 7
        buckets[p] += 1
    assert min(buckets) > 60  # roughly uniform
