"""Simulated replicated block store over logical nodes.

Logical nodes are directories under one root; "network" transfer is a
metered byte copy.  Files are append-once-read-many: written through a
replication pipeline (client -> first replica -> next replica ...),
split into fixed-size blocks, each with a CRC-32 sidecar checksummed in
bytes_per_checksum chunks.  Reads prefer a replica on the reader's own
node and verify every chunk before releasing bytes.

Byte-accounting identities for a post-codec payload of L bytes with
replication r and sidecar CRC payload s = 4 * ceil(L / chunk):

    write: disk_write = r * (L + s), net_local = L, net_remote = (r-1) * L
    read:  disk_read  = L + s, and net_local = L (local replica)
                                or net_remote = L (remote replica)

The 8-byte sidecar header (magic + chunk size) and the manifest are
namespace overhead and are not metered.
"""

from __future__ import annotations

import hashlib
import mmap
import os
import struct
import threading
import time
import urllib.parse
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from . import codec as codec_mod
from .metering import MeterScope, WorkModel

DEFAULT_BLOCK_BYTES = 64 * 1024 * 1024
DEFAULT_BYTES_PER_CHECKSUM = 4096
LEGACY_BYTES_PER_CHECKSUM = 512
SIDECAR_MAGIC = b"CSUM"
WRITE_MODES = ("buffered", "unbuffered")

_DIRECT_ALIGN = 4096


class StoreError(Exception):
    """Base class for block-store failures."""


class PathExistsError(StoreError):
    pass


class PathMissingError(StoreError):
    pass


class MissingReplicaError(StoreError):
    pass


class IntegrityError(StoreError):
    """Chunk checksum mismatch detected on read."""

    def __init__(self, block_id: str, chunk_index: int, expected: int, actual: int):
        self.block_id = block_id
        self.chunk_index = chunk_index
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"checksum mismatch in block {block_id} chunk {chunk_index}: "
            f"expected 0x{expected:08X}, got 0x{actual:08X}"
        )


def crc32(data: bytes) -> int:
    """Standard CRC-32 (reflected 0x04C11DB7, init and xorout 0xFFFFFFFF)."""
    return zlib.crc32(data) & 0xFFFFFFFF


@dataclass(frozen=True)
class ClusterSpec:
    node_count: int = 8
    replication: int = 3
    block_bytes: int = DEFAULT_BLOCK_BYTES
    bytes_per_checksum: int = DEFAULT_BYTES_PER_CHECKSUM
    root_dir: str = "store"

    def __post_init__(self) -> None:
        if self.node_count < 1:
            raise ValueError("node_count must be >= 1")
        if not 1 <= self.replication <= self.node_count:
            raise ValueError("replication must be in [1, node_count]")
        if self.block_bytes < 1:
            raise ValueError("block_bytes must be positive")
        bpc = self.bytes_per_checksum
        if bpc < 512 or bpc & (bpc - 1):
            raise ValueError("bytes_per_checksum must be a power of two >= 512")


def place_replicas(block_index: int, writer_node: int, cluster: ClusterSpec) -> tuple[int, ...]:
    """Pipeline-ordered replica nodes: writer first, then a deterministic
    rotation over the remaining nodes keyed by block index."""
    if not 0 <= writer_node < cluster.node_count:
        raise ValueError(f"writer_node {writer_node} out of range")
    nodes = [writer_node]
    n, r = cluster.node_count, cluster.replication
    j = 0
    while len(nodes) < r:
        cand = (writer_node + 1 + ((block_index + j) % (n - 1))) % n
        j += 1
        if cand not in nodes:
            nodes.append(cand)
    return tuple(nodes)


@dataclass(frozen=True)
class BlockMeta:
    block_id: str
    length: int
    replicas: tuple[int, ...]

    def chunk_count(self, bytes_per_checksum: int) -> int:
        return -(-self.length // bytes_per_checksum) if self.length else 0


@dataclass(frozen=True)
class StoredFile:
    path: str
    length: int            # bytes the reader gets back (pre-codec)
    stored_length: int     # bytes on disk per replica (post-codec)
    codec: str
    write_mode: str
    blocks: tuple[BlockMeta, ...]

    def replica_nodes(self) -> set[int]:
        nodes: set[int] = set()
        for b in self.blocks:
            nodes.update(b.replicas)
        return nodes


@dataclass
class MeteredWrite:
    """Per-write lane tally: what one pipeline write moved, by lane."""

    disk_write: int = 0
    net_local: int = 0
    net_remote: int = 0
    mode: str = "buffered"

    def __add__(self, other: "MeteredWrite") -> "MeteredWrite":
        return MeteredWrite(
            self.disk_write + other.disk_write,
            self.net_local + other.net_local,
            self.net_remote + other.net_remote,
            self.mode,
        )


class ChunkedChecksumWriter:
    """Accumulates writes into fixed chunks and finalizes one CRC per chunk.

    The sidecar produced is a function of (content, chunk size) only;
    caller write granularity never changes it.  finalizations counts the
    CRC computations actually performed.
    """

    def __init__(self, sink, bytes_per_checksum: int = DEFAULT_BYTES_PER_CHECKSUM):
        self._sink = sink
        self.bytes_per_checksum = bytes_per_checksum
        self._pending = bytearray()
        self.crcs: list[int] = []
        self.finalizations = 0
        self.bytes_written = 0
        self.closed = False

    def write(self, data: bytes) -> None:
        if self.closed:
            raise ValueError("write after close")
        if not data:
            return
        self.bytes_written += len(data)
        if self._sink is not None:
            self._sink(data)
        chunk = self.bytes_per_checksum
        view = memoryview(data)
        if self._pending:
            need = chunk - len(self._pending)
            take = view[:need]
            self._pending.extend(take)
            view = view[len(take):]
            if len(self._pending) == chunk:
                self._finalize(bytes(self._pending))
                self._pending.clear()
        while len(view) >= chunk:
            self._finalize(bytes(view[:chunk]))
            view = view[chunk:]
        if len(view):
            self._pending.extend(view)

    def _finalize(self, chunk: bytes) -> None:
        self.crcs.append(crc32(chunk))
        self.finalizations += 1

    def close(self) -> None:
        if self.closed:
            return
        if self._pending:
            self._finalize(bytes(self._pending))
            self._pending.clear()
        self.closed = True

    def sidecar_payload(self) -> bytes:
        """CRC list only; this is the metered portion of the sidecar."""
        return b"".join(struct.pack("<I", c) for c in self.crcs)

    def sidecar_file_bytes(self) -> bytes:
        return SIDECAR_MAGIC + struct.pack("<I", self.bytes_per_checksum) + self.sidecar_payload()


def chunked_write(writer: ChunkedChecksumWriter, data: bytes) -> None:
    """Append bytes through the chunked checksummer (module-level alias)."""
    writer.write(data)


def parse_sidecar(raw: bytes) -> tuple[int, list[int]]:
    if len(raw) < 8 or raw[:4] != SIDECAR_MAGIC:
        raise StoreError("bad sidecar header")
    bpc = struct.unpack_from("<I", raw, 4)[0]
    body = raw[8:]
    if len(body) % 4:
        raise StoreError("sidecar body not a multiple of 4 bytes")
    return bpc, [struct.unpack_from("<I", body, i)[0] for i in range(0, len(body), 4)]


def _write_payload_buffered(fs_path: Path, data: bytes) -> None:
    with open(fs_path, "wb") as fh:
        fh.write(data)


def _write_payload_direct(fs_path: Path, data: bytes) -> None:
    """Unbuffered write: aligned portion via O_DIRECT through a
    pre-allocated page-aligned staging buffer, tail appended buffered."""
    aligned_len = len(data) // _DIRECT_ALIGN * _DIRECT_ALIGN
    fd = os.open(fs_path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC | os.O_DIRECT, 0o644)
    try:
        if aligned_len:
            stage = mmap.mmap(-1, aligned_len)
            try:
                stage[:] = data[:aligned_len]
                view = memoryview(stage)
                try:
                    done = 0
                    while done < aligned_len:
                        done += os.write(fd, view[done:])
                finally:
                    view.release()
            finally:
                stage.close()
    finally:
        os.close(fd)
    if aligned_len < len(data):
        with open(fs_path, "r+b") as fh:
            fh.seek(aligned_len)
            fh.write(data[aligned_len:])


class BlockStore:
    """Namespace plus node directories; thread-safe create/lookup."""

    def __init__(self, cluster: ClusterSpec, work_model: WorkModel | None = None):
        self.cluster = cluster
        self.work_model = work_model or WorkModel()
        self.root = Path(cluster.root_dir)
        self._lock = threading.Lock()
        self._files: dict[str, StoredFile] = {}
        self.direct_io_available: bool | None = None  # unknown until first attempt
        for node in range(cluster.node_count):
            self.node_dir(node).mkdir(parents=True, exist_ok=True)
        self._manifest_dir().mkdir(parents=True, exist_ok=True)
        self._load_manifests()

    # -- layout ----------------------------------------------------------

    def node_dir(self, node: int) -> Path:
        return self.root / f"node{node:02d}"

    def scratch_dir(self, node: int) -> Path:
        d = self.node_dir(node) / "scratch"
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _manifest_dir(self) -> Path:
        return self.root / "namenode"

    def _manifest_path(self, path: str) -> Path:
        return self._manifest_dir() / (urllib.parse.quote(path, safe="") + ".manifest")

    def _block_paths(self, node: int, block_id: str) -> tuple[Path, Path]:
        base = self.node_dir(node)
        return base / f"{block_id}.blk", base / f"{block_id}.csum"

    # -- namespace -------------------------------------------------------

    def exists(self, path: str) -> bool:
        with self._lock:
            return path in self._files

    def lookup(self, path: str) -> StoredFile:
        with self._lock:
            try:
                return self._files[path]
            except KeyError:
                raise PathMissingError(f"no such path: {path}") from None

    def list_paths(self, prefix: str = "") -> list[str]:
        with self._lock:
            return sorted(p for p in self._files if p.startswith(prefix))

    def _register(self, meta: StoredFile) -> None:
        with self._lock:
            if meta.path in self._files:
                raise PathExistsError(f"path exists: {meta.path}")
            self._files[meta.path] = meta
        self._save_manifest(meta)

    def _reserve(self, path: str) -> None:
        with self._lock:
            if path in self._files:
                raise PathExistsError(f"path exists: {path}")

    # -- manifests (line-oriented text) -----------------------------------

    def _save_manifest(self, meta: StoredFile) -> None:
        lines = [
            f"path {urllib.parse.quote(meta.path, safe='/')}",
            f"length {meta.length}",
            f"stored_length {meta.stored_length}",
            f"codec {meta.codec}",
            f"write_mode {meta.write_mode}",
        ]
        for b in meta.blocks:
            lines.append(f"block {b.block_id} {b.length} {','.join(map(str, b.replicas))}")
        self._manifest_path(meta.path).write_text("\n".join(lines) + "\n")

    def _load_manifests(self) -> None:
        for mf in sorted(self._manifest_dir().glob("*.manifest")):
            fields: dict[str, str] = {}
            blocks: list[BlockMeta] = []
            for line in mf.read_text().splitlines():
                key, _, rest = line.partition(" ")
                if key == "block":
                    bid, blen, reps = rest.split(" ")
                    blocks.append(
                        BlockMeta(bid, int(blen), tuple(int(x) for x in reps.split(",")))
                    )
                else:
                    fields[key] = rest
            meta = StoredFile(
                path=urllib.parse.unquote(fields["path"]),
                length=int(fields["length"]),
                stored_length=int(fields["stored_length"]),
                codec=fields["codec"],
                write_mode=fields["write_mode"],
                blocks=tuple(blocks),
            )
            self._files[meta.path] = meta

    # -- write path --------------------------------------------------------

    def write_file(
        self,
        path: str,
        data: bytes,
        writer_node: int,
        scope: MeterScope,
        codec: str = "none",
        write_mode: str = "buffered",
    ) -> StoredFile:
        """Compress (optionally), block, checksum, and replicate a byte stream."""
        t0 = time.perf_counter()
        if codec not in codec_mod.CODECS:
            raise ValueError(f"unknown codec {codec!r}")
        if write_mode not in WRITE_MODES:
            raise ValueError(f"unknown write mode {write_mode!r}")
        self._reserve(path)

        encoded = codec_mod.encode(data, codec)
        if codec != "none":
            scope.work(self.work_model.per_byte_codec * len(data))

        tag = hashlib.sha1(path.encode()).hexdigest()[:10]
        blocks: list[BlockMeta] = []
        tally = MeteredWrite(mode=write_mode)
        meter = scope.meter
        bb = self.cluster.block_bytes
        n_blocks = -(-len(encoded) // bb) if encoded else 0
        for index in range(n_blocks):
            payload = encoded[index * bb : (index + 1) * bb]
            block_id = f"blk_{tag}_{index:05d}"
            replicas = place_replicas(index, writer_node, self.cluster)

            writer = ChunkedChecksumWriter(None, self.cluster.bytes_per_checksum)
            writer.write(payload)
            writer.close()
            scope.work(self.work_model.per_byte_checksummed * len(payload))
            sidecar = writer.sidecar_file_bytes()
            sidecar_metered = len(writer.sidecar_payload())

            for node in replicas:
                blk_path, csum_path = self._block_paths(node, block_id)
                self._store_block(blk_path, payload, write_mode)
                csum_path.write_bytes(sidecar)
                tally.disk_write += len(payload) + sidecar_metered
            tally.net_local += len(payload)
            tally.net_remote += (len(replicas) - 1) * len(payload)
            blocks.append(BlockMeta(block_id, len(payload), replicas))

        lane_work = self.work_model.per_byte_lane_copied * (
            tally.disk_write + tally.net_local + tally.net_remote
        )
        meter.add(
            "dfs",
            "dfs_write",
            disk_write=tally.disk_write,
            net_local=tally.net_local,
            net_remote=tally.net_remote,
            work=lane_work,
            wall=time.perf_counter() - t0,
        )

        meta = StoredFile(
            path=path,
            length=len(data),
            stored_length=len(encoded),
            codec=codec,
            write_mode=write_mode,
            blocks=tuple(blocks),
        )
        self._register(meta)
        return meta

    def _store_block(self, fs_path: Path, payload: bytes, write_mode: str) -> None:
        if write_mode == "unbuffered":
            try:
                _write_payload_direct(fs_path, payload)
                if self.direct_io_available is None:
                    self.direct_io_available = True
                return
            except OSError:
                self.direct_io_available = False
                # platform lacks a usable unbuffered path; mode stays recorded
        _write_payload_buffered(fs_path, payload)

    # -- read path ---------------------------------------------------------

    def _serve_block(
        self, meta: StoredFile, block: BlockMeta, reader_node: int, scope: MeterScope
    ) -> bytes:
        """Read one full block from the preferred replica and verify it."""
        node = reader_node if reader_node in block.replicas else block.replicas[0]
        blk_path, csum_path = self._block_paths(node, block.block_id)
        if not blk_path.exists() or not csum_path.exists():
            raise MissingReplicaError(f"replica of {block.block_id} missing on node {node}")
        payload = blk_path.read_bytes()
        bpc, crcs = parse_sidecar(csum_path.read_bytes())
        n_chunks = block.chunk_count(bpc)
        if len(crcs) != n_chunks or len(payload) != block.length:
            raise IntegrityError(block.block_id, -1, n_chunks, len(crcs))
        for i in range(n_chunks):
            chunk = payload[i * bpc : (i + 1) * bpc]
            actual = crc32(chunk)
            if actual != crcs[i]:
                raise IntegrityError(block.block_id, i, crcs[i], actual)

        local = node == reader_node
        scope.meter.add(
            "dfs",
            "dfs_read",
            disk_read=len(payload) + 4 * n_chunks,
            net_local=len(payload) if local else 0,
            net_remote=0 if local else len(payload),
            work=self.work_model.per_byte_lane_copied
            * (2 * len(payload) + 4 * n_chunks),
        )
        scope.work(self.work_model.per_byte_checksummed * len(payload))
        return payload

    def read_file(self, path: str, reader_node: int, scope: MeterScope) -> bytes:
        """Whole-file read: locality-preferring, checksum-verified, decoded."""
        t0 = time.perf_counter()
        meta = self.lookup(path)
        parts = [self._serve_block(meta, b, reader_node, scope) for b in meta.blocks]
        encoded = b"".join(parts)
        scope.meter.add("dfs", "dfs_read", wall=time.perf_counter() - t0)
        data = codec_mod.decode(encoded, meta.codec)
        if meta.codec != "none":
            scope.work(self.work_model.per_byte_codec * len(data))
        if len(data) != meta.length:
            raise StoreError(f"{path}: decoded {len(data)} bytes, manifest says {meta.length}")
        return data

    def read_range(
        self, path: str, offset: int, length: int, reader_node: int, scope: MeterScope
    ) -> bytes:
        """Ranged read of an uncompressed file; serves chunk-aligned spans."""
        t0 = time.perf_counter()
        meta = self.lookup(path)
        if meta.codec != "none":
            raise StoreError("ranged reads require codec=none")
        if offset < 0 or length < 0 or offset + length > meta.length:
            raise ValueError("range out of bounds")
        if length == 0:
            return b""
        bpc = self.cluster.bytes_per_checksum
        out = bytearray()
        block_start = 0
        for block in meta.blocks:
            block_end = block_start + block.length
            lo = max(offset, block_start)
            hi = min(offset + length, block_end)
            if lo < hi:
                rel_lo, rel_hi = lo - block_start, hi - block_start
                span_lo = rel_lo // bpc * bpc
                span_hi = min(-(-rel_hi // bpc) * bpc, block.length)
                chunk_lo, chunk_hi = span_lo // bpc, -(-span_hi // bpc)

                node = reader_node if reader_node in block.replicas else block.replicas[0]
                blk_path, csum_path = self._block_paths(node, block.block_id)
                if not blk_path.exists() or not csum_path.exists():
                    raise MissingReplicaError(
                        f"replica of {block.block_id} missing on node {node}"
                    )
                with open(blk_path, "rb") as fh:
                    fh.seek(span_lo)
                    span = fh.read(span_hi - span_lo)
                _, crcs = parse_sidecar(csum_path.read_bytes())
                for i in range(chunk_lo, chunk_hi):
                    chunk = span[(i - chunk_lo) * bpc : (i - chunk_lo + 1) * bpc]
                    actual = crc32(chunk)
                    if actual != crcs[i]:
                        raise IntegrityError(block.block_id, i, crcs[i], actual)

                local = node == reader_node
                served = len(span)
                scope.meter.add(
                    "dfs",
                    "dfs_read",
                    disk_read=served + 4 * (chunk_hi - chunk_lo),
                    net_local=served if local else 0,
                    net_remote=0 if local else served,
                    work=self.work_model.per_byte_lane_copied
                    * (2 * served + 4 * (chunk_hi - chunk_lo)),
                )
                scope.work(self.work_model.per_byte_checksummed * served)
                out.extend(span[rel_lo - span_lo : rel_hi - span_lo])
            block_start = block_end
        scope.meter.add("dfs", "dfs_read", wall=time.perf_counter() - t0)
        return bytes(out)

    # -- fault injection (tests) -------------------------------------------

    def corrupt_block(self, path: str, block_index: int, byte_offset: int, bit: int = 0) -> None:
        """Flip one bit in every stored replica of a block (test helper)."""
        meta = self.lookup(path)
        block = meta.blocks[block_index]
        for node in block.replicas:
            blk_path, _ = self._block_paths(node, block.block_id)
            raw = bytearray(blk_path.read_bytes())
            raw[byte_offset] ^= 1 << bit
            blk_path.write_bytes(bytes(raw))
