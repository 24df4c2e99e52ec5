"""Command-line surface: flags, config precedence, reports, exit codes."""

import hashlib
import json
import os

import pytest

from skymr.cli import DEFAULTS, Settings, build_parser, main, parse_size
from skymr.dfs import BlockStore, ClusterSpec
from skymr.metering import CSV_HEADER, Meter, RunReport


def run_cli(*argv):
    return main(list(argv))


def store_args(tmp_path, nodes=4):
    return ["--store", str(tmp_path / "store"), "--nodes", str(nodes)]


def read_store_file(tmp_path, path, nodes=4):
    cluster = ClusterSpec(node_count=nodes, replication=3, root_dir=str(tmp_path / "store"))
    store = BlockStore(cluster)
    return store.read_file(path, 0, Meter().scope("dfs"))


def load_report(tmp_path, run_id):
    p = tmp_path / "store" / "runs" / run_id / "report.json"
    return RunReport.from_json(p.read_text())


# -- parse_size / config --------------------------------------------------------


def test_parse_size_units():
    assert parse_size("64MiB") == 64 * 1024 * 1024
    assert parse_size("1MB") == 1000000
    assert parse_size("512") == 512
    assert parse_size("4 KiB") == 4096
    with pytest.raises(Exception):
        parse_size("sixty")


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "skymr.conf"
    cfg.write_text("replication=1\nio.sort.mb=32\n# comment\nnodes=5\n")

    class Args:
        config = str(cfg)
        replication = None
        nodes = 3  # flag beats config

    s = Settings(Args())
    assert s.int_("replication") == 1  # config beats default (3)
    assert s.int_("io.sort.mb") == 32
    assert s.int_("nodes") == 3  # flag wins
    assert s.int_("io.bytes.per.checksum") == 4096  # default


def test_config_env_variable(tmp_path, monkeypatch):
    cfg = tmp_path / "env.conf"
    cfg.write_text("replication=1\n")
    monkeypatch.setenv("SKYMR_CONFIG", str(cfg))

    class Args:
        config = None
        replication = None

    assert Settings(Args()).int_("replication") == 1


def test_config_rejects_bad_line(tmp_path):
    cfg = tmp_path / "bad.conf"
    cfg.write_text("replication 3\n")

    class Args:
        config = str(cfg)

    with pytest.raises(ValueError):
        Settings(Args())._raw("replication")


# -- generate ----------------------------------------------------------------------


def test_generate_deterministic_across_stores(tmp_path):
    digests = []
    for sub in ("a", "b"):
        base = tmp_path / sub
        assert run_cli("generate", "--objects", "1000", "--seed", "42", "--out", "/cat",
                       *store_args(base)) == 0
        digests.append(hashlib.sha256(read_store_file(base, "/cat")).hexdigest())
    assert digests[0] == digests[1]


def test_generate_zero_objects(tmp_path):
    assert run_cli("generate", "--objects", "0", "--out", "/e", *store_args(tmp_path)) == 0
    assert read_store_file(tmp_path, "/e") == b""


def test_generate_requires_out(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run_cli("generate", "--objects", "10", *store_args(tmp_path))
    assert exc.value.code == 2


def test_generate_duplicate_path_fails_cleanly(tmp_path):
    args = ["generate", "--objects", "5", "--out", "/cat", *store_args(tmp_path)]
    assert run_cli(*args) == 0
    assert run_cli(*args) == 1  # path exists -> runtime error, exit 1


# -- run ---------------------------------------------------------------------------


def setup_catalog(tmp_path, n=1500, seed=9, nodes=4):
    assert run_cli("generate", "--objects", str(n), "--seed", str(seed), "--out", "/cat",
                   *store_args(tmp_path, nodes)) == 0


def test_run_search_and_report(tmp_path):
    setup_catalog(tmp_path)
    assert run_cli("run", "search", "--theta", "30", "--input", "/cat",
                   "--reducers", "3", "--run-id", "s1", "--out", "/o/s1",
                   *store_args(tmp_path)) == 0
    report = load_report(tmp_path, "s1")
    assert report.extras["theta_arcsec"] == 30
    assert report.extras["pair_count"] > 0
    assert set(report.snapshot.phases) == {"map", "shuffle", "reduce", "dfs", "bench"}


def test_run_search_codec_shrinks_reducer_output(tmp_path):
    setup_catalog(tmp_path, n=3000, seed=21)
    for run_id, codec in (("raw", "none"), ("lz", "lz")):
        assert run_cli("run", "search", "--theta", "60", "--input", "/cat",
                       "--codec", codec, "--run-id", run_id, "--out", f"/o/{run_id}",
                       "--reducers", "3", *store_args(tmp_path)) == 0
    raw = load_report(tmp_path, "raw").extras
    lz = load_report(tmp_path, "lz").extras
    assert lz["reducer_output_stored_bytes"] < raw["reducer_output_stored_bytes"]
    assert lz["pair_count"] == raw["pair_count"]
    assert lz["compression_ratio"] < 1.0


def test_run_stats_three_point_fixture(tmp_path):
    from skymr.apps import encode_catalog_record
    from skymr.sphere import SkyObject

    store = BlockStore(ClusterSpec(node_count=4, replication=3,
                                   root_dir=str(tmp_path / "store")))
    objs = [SkyObject(i, off / 3600.0, 0.0) for i, off in enumerate([0.0, 15.0, 45.0])]
    store.write_file("/three", b"".join(encode_catalog_record(o) for o in objs), 0,
                     Meter().scope("dfs"))
    assert run_cli("run", "stats", "--input", "/three", "--run-id", "st1",
                   "--out", "/o/st1", "--reducers", "2", *store_args(tmp_path)) == 0
    extras = load_report(tmp_path, "st1").extras
    hist = extras["histogram"]
    assert hist[14] == 1 and hist[29] == 1 and hist[44] == 1 and sum(hist) == 3
    assert extras["sentinel"] == [-1, -1]
    assert extras["histogram_cumulative"][59] == 3


def test_run_search_worker_count_invariance(tmp_path):
    digests = []
    for workers, sub in ((1, "w1"), ("8", "w8")):
        base = tmp_path / sub
        setup_catalog(base, n=1200, seed=5)
        assert run_cli("run", "search", "--theta", "30", "--input", "/cat",
                       "--workers", str(workers), "--run-id", "r", "--out", "/o/r",
                       "--reducers", "4", *store_args(base)) == 0
        digests.append(load_report(base, "r").extras["output_digest"])
    assert digests[0] == digests[1]


def test_run_watts_energy(tmp_path):
    setup_catalog(tmp_path, n=200)
    assert run_cli("run", "search", "--theta", "15", "--input", "/cat",
                   "--watts", "40", "--run-id", "e1", "--out", "/o/e1",
                   *store_args(tmp_path)) == 0
    report = load_report(tmp_path, "e1")
    wall = report.snapshot.total().wall_seconds
    assert report.amdahl.energy_joules == pytest.approx(40.0 * wall)


def test_run_missing_catalog_exits_one(tmp_path):
    assert run_cli("run", "search", "--input", "/absent", *store_args(tmp_path)) == 1


# -- bench --------------------------------------------------------------------------


def test_bench_disk_accounting(tmp_path):
    assert run_cli("bench", "disk", "--files", "10", "--size", "64KiB",
                   "--mode", "buffered", "--run-id", "bd", *store_args(tmp_path)) == 0
    report = load_report(tmp_path, "bd")
    bench = report.snapshot.phases["bench"]
    assert bench.disk_write_bytes == 10 * 64 * 1024
    assert report.extras["total_bytes"] == 10 * 64 * 1024
    assert len(report.extras["files"]) == 10


def test_bench_disk_unbuffered_mode(tmp_path):
    assert run_cli("bench", "disk", "--files", "2", "--size", "8KiB",
                   "--mode", "unbuffered", "--run-id", "bu", *store_args(tmp_path)) == 0
    assert load_report(tmp_path, "bu").extras["mode"] == "unbuffered"


def test_bench_dfsio_write_then_local_read(tmp_path):
    size = 256 * 1024
    assert run_cli("bench", "dfsio", "--op", "write", "--mappers", "3",
                   "--size", str(size), "--replication", "3", "--run-id", "bw",
                   *store_args(tmp_path)) == 0
    report = load_report(tmp_path, "bw")
    dfs = report.snapshot.phases["dfs"]
    sidecars = 3 * 3 * 4 * (size // 4096)
    assert dfs.disk_write_bytes == 3 * 3 * size + sidecars
    assert dfs.net_local_bytes == 3 * size
    assert dfs.net_remote_bytes == 2 * 3 * size

    assert run_cli("bench", "dfsio", "--op", "read", "--mappers", "3",
                   "--size", str(size), "--replication", "3", "--run-id", "br",
                   *store_args(tmp_path)) == 0
    dfs = load_report(tmp_path, "br").snapshot.phases["dfs"]
    assert dfs.net_remote_bytes == 0  # co-located readers
    assert dfs.net_local_bytes == 3 * size


def test_bench_dfsio_read_without_write_fails(tmp_path):
    assert run_cli("bench", "dfsio", "--op", "read", "--mappers", "2",
                   *store_args(tmp_path)) == 1


# -- report -----------------------------------------------------------------------


def test_report_csv_and_doc(tmp_path, capsys):
    setup_catalog(tmp_path, n=300)
    assert run_cli("run", "search", "--theta", "15", "--input", "/cat",
                   "--run-id", "rep1", "--out", "/o/rep1", *store_args(tmp_path)) == 0
    capsys.readouterr()
    assert run_cli("report", "--run", "rep1", "--format", "csv",
                   *store_args(tmp_path)) == 0
    out = capsys.readouterr().out
    lines = out.strip().splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert len(lines) == 1 + 5 + 4  # header + phases + classes

    assert run_cli("report", "--run", "rep1", "--format", "doc", "--watts", "40",
                   *store_args(tmp_path)) == 0
    out = capsys.readouterr().out
    doc = json.loads(out[: out.index("\nrun ")])
    assert doc["run_id"] == "rep1"
    assert doc["amdahl"]["energy_joules"] > 0


def test_report_unknown_run_exits_one(tmp_path):
    assert run_cli("report", "--run", "nope", *store_args(tmp_path)) == 1


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        run_cli("frobnicate")
    assert exc.value.code == 2


def test_defaults_mirror_published_parameters():
    assert DEFAULTS["replication"] == 3
    assert DEFAULTS["block.size"] == 64 * 1024 * 1024
    assert DEFAULTS["io.bytes.per.checksum"] == 4096
    assert DEFAULTS["io.sort.mb"] == 125
    assert DEFAULTS["io.sort.record.percent"] == 0.2
    assert DEFAULTS["io.sort.spill.percent"] == 0.8
