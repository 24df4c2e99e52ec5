"""The two sky workloads as job specs, plus record wire formats.

Catalog records are 57 bytes: id (u64 LE), ra and dec (f64 LE degrees),
four f64 photometry values, and a one-byte type tag.  Map output frames
an 8-byte big-endian (zone, block) key in front of the unchanged record,
so byte-lexicographic key order equals numeric block order.  Pair
records are 24 bytes: two u64 ids (lower first) and the f64 separation.

The search job emits every qualifying pair; the statistics job runs the
same partitioning but reduces each block to a 60-bin histogram line,
then a second single-reducer step sums the lines into one final line
whose zone/block columns are the sentinel "-1 -1".
"""

from __future__ import annotations

import struct
import threading

import numpy as np

from . import sphere
from .dfs import BlockStore, StoredFile
from .engine import (
    FixedRecordFormat,
    JobSpec,
    LineRecordFormat,
    SpillConfig,
    recommend_spill_config,
)
from .metering import MeterScope
from .sphere import (
    BlockConfig,
    BlockKey,
    PairHistogram,
    PairRecord,
    PairSearchStats,
    SkyObject,
)

CATALOG_RECORD_BYTES = 57
MAP_KEY_BYTES = 8
PAIR_RECORD_BYTES = 24
MAP_OUTPUT_RECORD_BYTES = MAP_KEY_BYTES + CATALOG_RECORD_BYTES  # framed payload: 65

_CATALOG_STRUCT = struct.Struct("<Q6dB")
_KEY_STRUCT = struct.Struct(">II")
_PAIR_STRUCT = struct.Struct("<QQd")

_CATALOG_DTYPE = np.dtype(
    [("id", "<u8"), ("ra", "<f8"), ("dec", "<f8"), ("phot", "<f8", (4,)), ("objtype", "u1")]
)
assert _CATALOG_DTYPE.itemsize == CATALOG_RECORD_BYTES

BLOCK_KEY_HASH_MULTIPLIER = 2654435761  # Knuth's multiplicative constant

CLUMP_SIZE = 20
CLUMP_SIGMA_ARCSEC = 15.0  # clumps span roughly a 30'' radius
DEFAULT_CLUSTERING = 0.01


class HistogramLineError(ValueError):
    """A statistics line failed to parse."""


# -- wire formats ------------------------------------------------------------


def encode_catalog_record(obj: SkyObject) -> bytes:
    return _CATALOG_STRUCT.pack(obj.id, obj.ra, obj.dec, *obj.photometry, obj.obj_type)


def decode_catalog_record(raw: bytes) -> SkyObject:
    if len(raw) != CATALOG_RECORD_BYTES:
        raise ValueError(f"catalog record must be {CATALOG_RECORD_BYTES} bytes, got {len(raw)}")
    oid, ra, dec, p0, p1, p2, p3, tag = _CATALOG_STRUCT.unpack(raw)
    return SkyObject(oid, ra, dec, (p0, p1, p2, p3), tag)


def encode_block_key(key: BlockKey) -> bytes:
    return _KEY_STRUCT.pack(key.zone, key.block)


def decode_block_key(raw: bytes) -> BlockKey:
    zone, block = _KEY_STRUCT.unpack(raw)
    return BlockKey(zone, block)


def encode_pair_record(pair: PairRecord) -> bytes:
    return _PAIR_STRUCT.pack(pair.id_a, pair.id_b, pair.dist_arcsec)


def decode_pair_record(raw: bytes) -> PairRecord:
    if len(raw) != PAIR_RECORD_BYTES:
        raise ValueError(f"pair record must be {PAIR_RECORD_BYTES} bytes, got {len(raw)}")
    id_a, id_b, dist = _PAIR_STRUCT.unpack(raw)
    return PairRecord(id_a, id_b, dist)


def decode_pair_stream(raw: bytes) -> list[PairRecord]:
    if len(raw) % PAIR_RECORD_BYTES:
        raise ValueError("pair stream length is not a multiple of 24")
    return [
        decode_pair_record(raw[i : i + PAIR_RECORD_BYTES])
        for i in range(0, len(raw), PAIR_RECORD_BYTES)
    ]


def format_histogram_line(zone: int, block: int, hist: PairHistogram) -> bytes:
    counts = " ".join(str(c) for c in hist.counts)
    return f"{zone} {block} {counts}\n".encode()


def parse_histogram_line(line: bytes) -> tuple[int, int, PairHistogram]:
    tokens = line.split()
    if len(tokens) != 2 + sphere.HISTOGRAM_BINS:
        raise HistogramLineError(
            f"expected {2 + sphere.HISTOGRAM_BINS} tokens, got {len(tokens)}: {line[:80]!r}"
        )
    try:
        zone, block = int(tokens[0]), int(tokens[1])
        counts = tuple(int(t) for t in tokens[2:])
    except ValueError as exc:
        raise HistogramLineError(f"non-integer token in line {line[:80]!r}") from exc
    if any(c < 0 for c in counts):
        raise HistogramLineError(f"negative count in line {line[:80]!r}")
    return zone, block, PairHistogram(counts)


def block_key_partitioner(key: bytes, num_reducers: int) -> int:
    zone, block = _KEY_STRUCT.unpack(key)
    return (zone * BLOCK_KEY_HASH_MULTIPLIER + block) % num_reducers


def read_final_histogram(raw: bytes) -> tuple[int, int, PairHistogram]:
    """Decode the statistics job's final output.

    An empty catalog produces no reduce groups and therefore an empty
    final file; that reads back as the all-zero histogram.
    """
    if not raw.strip():
        return -1, -1, PairHistogram((0,) * sphere.HISTOGRAM_BINS)
    return parse_histogram_line(raw)


# -- synthetic catalog --------------------------------------------------------


def generate_catalog_bytes(n: int, seed: int, clustering: float = DEFAULT_CLUSTERING) -> bytes:
    """Deterministic catalog: uniform sphere positions with a clustered
    fraction planted in small Gaussian clumps so tight radii still find
    pairs.  Clustered objects hold the low ids."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if not 0.0 <= clustering <= 1.0:
        raise ValueError("clustering must be in [0, 1]")
    rng = np.random.RandomState(seed)

    n_clustered = int(round(n * clustering))
    n_clumps = -(-n_clustered // CLUMP_SIZE) if n_clustered else 0

    ra = np.empty(n)
    dec = np.empty(n)
    if n_clustered:
        centers_ra = rng.uniform(0.0, 360.0, n_clumps)
        centers_dec = np.degrees(np.arcsin(rng.uniform(-1.0, 1.0, n_clumps)))
        idx = np.arange(n_clustered) // CLUMP_SIZE
        sigma_deg = CLUMP_SIGMA_ARCSEC / 3600.0
        d_dec = rng.normal(0.0, sigma_deg, n_clustered)
        d_ra = rng.normal(0.0, sigma_deg, n_clustered)
        dec_c = centers_dec[idx] + d_dec
        cos_dec = np.maximum(np.cos(np.radians(centers_dec[idx])), 1e-9)
        ra_c = centers_ra[idx] + d_ra / cos_dec
        # fold positions that crossed a pole back onto the sphere
        over = dec_c > 90.0
        dec_c[over] = 180.0 - dec_c[over]
        ra_c[over] += 180.0
        under = dec_c < -90.0
        dec_c[under] = -180.0 - dec_c[under]
        ra_c[under] += 180.0
        dec[:n_clustered] = np.clip(dec_c, -90.0, 90.0)
        ra[:n_clustered] = np.mod(ra_c, 360.0)
    n_uniform = n - n_clustered
    if n_uniform:
        ra[n_clustered:] = rng.uniform(0.0, 360.0, n_uniform)
        dec[n_clustered:] = np.degrees(np.arcsin(rng.uniform(-1.0, 1.0, n_uniform)))

    table = np.zeros(n, dtype=_CATALOG_DTYPE)
    table["id"] = np.arange(n, dtype=np.uint64)
    table["ra"] = ra
    table["dec"] = dec
    table["phot"] = rng.random_sample((n, 4))
    table["objtype"] = rng.randint(0, 256, n, dtype=np.uint8) if n else 0
    return table.tobytes()


def generate_catalog(
    store: BlockStore,
    path: str,
    n: int,
    seed: int,
    clustering: float = DEFAULT_CLUSTERING,
    writer_node: int = 0,
    scope: MeterScope | None = None,
    write_mode: str = "buffered",
) -> StoredFile:
    """Generate and store a catalog (always uncompressed: map splits need
    ranged reads)."""
    from .metering import Meter

    scope = scope or Meter().scope("dfs")
    data = generate_catalog_bytes(n, seed, clustering)
    return store.write_file(path, data, writer_node, scope, codec="none", write_mode=write_mode)


def decode_catalog(data: bytes) -> list[SkyObject]:
    if len(data) % CATALOG_RECORD_BYTES:
        raise ValueError("catalog length is not a multiple of the record size")
    table = np.frombuffer(data, dtype=_CATALOG_DTYPE)
    return [
        SkyObject(int(r["id"]), float(r["ra"]), float(r["dec"]),
                  tuple(float(x) for x in r["phot"]), int(r["objtype"]))
        for r in table
    ]


# -- mappers / reducers --------------------------------------------------------


class _WorkTracker:
    """Per-thread work accumulator drained by the engine after each call."""

    def __init__(self) -> None:
        self._local = threading.local()

    def _bucket(self) -> list[float]:
        bucket = getattr(self._local, "work", None)
        if bucket is None:
            bucket = [0.0]
            self._local.work = bucket
        return bucket

    def add_work(self, units: float) -> None:
        self._bucket()[0] += units

    def take_work(self) -> float:
        bucket = self._bucket()
        units, bucket[0] = bucket[0], 0.0
        return units


class BlockPartitionMapper(_WorkTracker):
    """Emit one (block key, record) pair per assignment of the object."""

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.cfg = cfg

    def __call__(self, record: bytes):
        obj = decode_catalog_record(record)
        for assignment in sphere.assignments(obj, self.cfg):
            yield encode_block_key(assignment.key), record


class PairSearchReducer(_WorkTracker):
    """Run the in-block pair search and emit 24-byte pair records."""

    def __init__(self, cfg: BlockConfig, work_per_distance_eval: float = 50.0):
        super().__init__()
        self.cfg = cfg
        self.work_per_distance_eval = work_per_distance_eval

    def pairs(self, key: bytes, values: list[bytes]) -> list[PairRecord]:
        block = decode_block_key(key)
        members = []
        for raw in values:
            obj = decode_catalog_record(raw)
            members.append((obj, sphere.home_block(obj, self.cfg) == block))
        stats = PairSearchStats()
        pairs = sphere.pairs_in_block(members, self.cfg, stats)
        self.add_work(self.work_per_distance_eval * stats.distance_evals)
        return pairs

    def __call__(self, key: bytes, values: list[bytes]):
        for pair in self.pairs(key, values):
            yield encode_pair_record(pair)


class BlockHistogramReducer(PairSearchReducer):
    """Reduce one block to a text histogram line."""

    def __call__(self, key: bytes, values: list[bytes]):
        block = decode_block_key(key)
        hist = sphere.histogram(self.pairs(key, values))
        yield format_histogram_line(block.zone, block.block, hist)


class HistogramLineMapper(_WorkTracker):
    """Step-two mapper: validate a line and key everything together."""

    def __call__(self, record: bytes):
        parse_histogram_line(record)
        yield b"ALL", record


class HistogramSumReducer(_WorkTracker):
    """Single reducer summing per-block histograms into the final line."""

    def __call__(self, key: bytes, values: list[bytes]):
        total = PairHistogram((0,) * sphere.HISTOGRAM_BINS)
        for line in values:
            _, _, hist = parse_histogram_line(line)
            total = total + hist
        yield format_histogram_line(-1, -1, total)


# -- job builders ----------------------------------------------------------------


def _default_spill(store: BlockStore, record_growth: float = 1.10) -> SpillConfig:
    split = store.cluster.block_bytes // CATALOG_RECORD_BYTES * CATALOG_RECORD_BYTES
    rec = recommend_spill_config(
        split, CATALOG_RECORD_BYTES, MAP_OUTPUT_RECORD_BYTES, record_growth, 0.8
    )
    return rec.to_spill_config(0.8)


def neighbor_search_job(
    theta_arcsec: float,
    cfg: BlockConfig | None,
    store: BlockStore,
    input_path: str,
    output_prefix: str,
    num_reducers: int = 2,
    spill: SpillConfig | None = None,
    codec: str = "none",
    write_mode: str = "buffered",
) -> JobSpec:
    """All object pairs within theta, one output file per reducer."""
    cfg = cfg or BlockConfig(theta_arcsec=theta_arcsec)
    if cfg.theta_arcsec != theta_arcsec:
        cfg = BlockConfig(cfg.zone_height_deg, cfg.block_width_deg, theta_arcsec)
    return JobSpec(
        name=f"search_theta{theta_arcsec:g}",
        mapper=BlockPartitionMapper(cfg),
        reducer=PairSearchReducer(cfg, store.work_model.per_distance_eval),
        num_reducers=num_reducers,
        inputs=(input_path,),
        output_prefix=output_prefix,
        spill=spill or _default_spill(store),
        input_format=FixedRecordFormat(CATALOG_RECORD_BYTES),
        partitioner=block_key_partitioner,
        output_codec=codec,
        output_write_mode=write_mode,
    )


def neighbor_stats_job(
    cfg: BlockConfig | None,
    store: BlockStore,
    input_path: str,
    output_prefix: str,
    num_reducers: int = 2,
    spill: SpillConfig | None = None,
    codec: str = "none",
    write_mode: str = "buffered",
) -> tuple[JobSpec, JobSpec]:
    """Two chained steps: per-block histograms, then one global sum."""
    cfg = cfg or BlockConfig(theta_arcsec=60.0)
    if cfg.theta_arcsec > sphere.HISTOGRAM_BINS:
        raise ValueError("statistics radius cannot exceed the 60'' histogram range")
    step1_prefix = f"{output_prefix}/step1"
    step1 = JobSpec(
        name="stats_step1",
        mapper=BlockPartitionMapper(cfg),
        reducer=BlockHistogramReducer(cfg, store.work_model.per_distance_eval),
        num_reducers=num_reducers,
        inputs=(input_path,),
        output_prefix=step1_prefix,
        spill=spill or _default_spill(store),
        input_format=FixedRecordFormat(CATALOG_RECORD_BYTES),
        partitioner=block_key_partitioner,
        output_codec=codec,
        output_write_mode=write_mode,
    )
    step2 = JobSpec(
        name="stats_step2",
        mapper=HistogramLineMapper(),
        reducer=HistogramSumReducer(),
        num_reducers=1,
        inputs=tuple(f"{step1_prefix}/part-{r:05d}" for r in range(num_reducers)),
        output_prefix=f"{output_prefix}/final",
        spill=SpillConfig(4 * 1024 * 1024),
        input_format=LineRecordFormat(),
        output_codec="none",
        output_write_mode=write_mode,
    )
    return step1, step2


def border_copy_fraction(records_in: int, assignments_out: int) -> float:
    """Fraction of map output records that are border copies."""
    if records_in == 0:
        return 0.0
    return assignments_out / records_in - 1.0
