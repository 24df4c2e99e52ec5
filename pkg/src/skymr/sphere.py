"""Spatial core: zone/block decomposition of the sphere and pair search.

The sphere is cut into declination zones of fixed height; each zone is
cut into right-ascension cells widened by 1/cos(zone mid declination) so
cells keep roughly equal solid angle.  An object belongs to exactly one
home block and is additionally copied into every neighboring block whose
region, grown by the search radius, contains it; that guarantee lets
each block find all of its pairs without cross-block joins.

A pair is emitted only by the home block of its lower-id member, so the
union of per-block results is globally duplicate-free by construction.

Distances use the half-angle chord form (2 asin(|a-b|/2) on unit
vectors), which keeps full precision at arcsecond scales where arccos
of a dot product would lose half the significand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

ARCSEC_PER_DEG = 3600.0
ARCSEC_PER_RAD = 180.0 * 3600.0 / math.pi
MAX_SEPARATION_ARCSEC = 648000.0  # antipodal points

# cos(dec) is clamped here so polar zone widths stay finite
_MIN_COS_DEC = math.cos(math.radians(89.999))

HISTOGRAM_BINS = 60


class DuplicateObjectError(ValueError):
    """Two members of one block carry the same object id."""


class HistogramRangeError(ValueError):
    """Pair distance outside the 60-arcsecond histogram range."""


@dataclass(frozen=True, slots=True)
class SkyObject:
    """One catalog record: position plus an opaque photometry payload."""

    id: int
    ra: float
    dec: float
    photometry: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    obj_type: int = 0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.ra) and math.isfinite(self.dec)):
            raise ValueError("ra/dec must be finite")
        if not 0.0 <= self.ra < 360.0:
            raise ValueError(f"ra {self.ra} outside [0, 360)")
        if not -90.0 <= self.dec <= 90.0:
            raise ValueError(f"dec {self.dec} outside [-90, +90]")

    def unit_vector(self) -> tuple[float, float, float]:
        ra = math.radians(self.ra)
        dec = math.radians(self.dec)
        cd = math.cos(dec)
        return (cd * math.cos(ra), cd * math.sin(ra), math.sin(dec))


@dataclass(frozen=True, slots=True, order=True)
class BlockKey:
    zone: int
    block: int

    def __post_init__(self) -> None:
        if self.zone < 0 or self.block < 0:
            raise ValueError("zone and block must be non-negative")


@dataclass(frozen=True, slots=True)
class BlockConfig:
    """Decomposition geometry and search radius.

    Defaults (1 degree zones/blocks, sub-block = search radius) satisfy
    every structural constraint for radii up to 3600 arcseconds.
    """

    zone_height_deg: float = 1.0
    block_width_deg: float = 1.0
    theta_arcsec: float = 60.0
    sub_block_arcsec: float | None = None

    def __post_init__(self) -> None:
        if self.zone_height_deg <= 0 or self.block_width_deg <= 0:
            raise ValueError("zone height and block width must be positive")
        if self.theta_arcsec <= 0:
            raise ValueError("theta must be positive")
        if self.sub_block_arcsec is None:
            object.__setattr__(self, "sub_block_arcsec", self.theta_arcsec)
        if self.zone_height_deg * ARCSEC_PER_DEG < self.theta_arcsec:
            raise ValueError("zone height (in arcsec) must be >= theta")
        if self.sub_block_arcsec < self.theta_arcsec:
            raise ValueError("sub-block edge must be >= theta")

    @property
    def theta_deg(self) -> float:
        return self.theta_arcsec / ARCSEC_PER_DEG

    def zone_count(self) -> int:
        return math.ceil(180.0 / self.zone_height_deg)

    def zone_dec_range(self, zone: int) -> tuple[float, float]:
        lo = -90.0 + zone * self.zone_height_deg
        return lo, min(lo + self.zone_height_deg, 90.0)

    def blocks_in_zone(self, zone: int) -> int:
        lo, hi = self.zone_dec_range(zone)
        mid = 0.5 * (lo + hi)
        cos_mid = max(math.cos(math.radians(mid)), _MIN_COS_DEC)
        adjusted = min(self.block_width_deg / cos_mid, 360.0)
        return max(1, int(math.floor(360.0 / adjusted + 0.5)))

    def block_width(self, zone: int) -> float:
        return 360.0 / self.blocks_in_zone(zone)


@dataclass(frozen=True, slots=True)
class BlockAssignment:
    key: BlockKey
    native: bool


@dataclass(frozen=True, slots=True)
class PairRecord:
    id_a: int
    id_b: int
    dist_arcsec: float

    def __post_init__(self) -> None:
        if self.id_a >= self.id_b:
            raise ValueError("pair ids must satisfy id_a < id_b")
        if self.dist_arcsec < 0:
            raise ValueError("distance must be non-negative")


@dataclass(frozen=True)
class PairHistogram:
    """Counts per 1-arcsecond bin: bin k holds distances in (k-1, k]."""

    counts: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.counts) != HISTOGRAM_BINS:
            raise ValueError(f"expected {HISTOGRAM_BINS} bins")
        if any(c < 0 for c in self.counts):
            raise ValueError("counts must be non-negative")

    def total(self) -> int:
        return sum(self.counts)

    def cumulative(self) -> tuple[int, ...]:
        out, acc = [], 0
        for c in self.counts:
            acc += c
            out.append(acc)
        return tuple(out)

    def __add__(self, other: "PairHistogram") -> "PairHistogram":
        return PairHistogram(tuple(a + b for a, b in zip(self.counts, other.counts)))


@dataclass
class PairSearchStats:
    """Optional instrumentation: how many distances a search evaluated."""

    distance_evals: int = 0
    candidates: int = 0


def angular_distance(a: SkyObject, b: SkyObject) -> float:
    """Great-circle separation in arcseconds via the half-angle chord form."""
    ax, ay, az = a.unit_vector()
    bx, by, bz = b.unit_vector()
    dx, dy, dz = ax - bx, ay - by, az - bz
    half_chord = 0.5 * math.sqrt(dx * dx + dy * dy + dz * dz)
    return 2.0 * math.asin(min(1.0, half_chord)) * ARCSEC_PER_RAD


def home_block(obj: SkyObject, cfg: BlockConfig) -> BlockKey:
    """The block an object natively belongs to."""
    n_zones = cfg.zone_count()
    zone = min(int(math.floor((obj.dec + 90.0) / cfg.zone_height_deg)), n_zones - 1)
    n_blocks = cfg.blocks_in_zone(zone)
    block = min(int(math.floor(obj.ra / cfg.block_width(zone))), n_blocks - 1)
    return BlockKey(zone, block)


def _ra_growth_deg(theta_arcsec: float, cos_dec: float) -> float | None:
    """RA half-width of the grown region at the given cosine, or None for
    the full circle.

    asin(sin theta / cos dec) dominates theta / cos dec everywhere below
    the saturation point, so growing by it can only add blocks relative
    to the plain 1/cos rectangle; near a pole (cos dec <= sin theta) any
    RA offset can be within range and the whole zone is used.  The tiny
    inflation keeps pairs sitting exactly on the boundary inside.
    """
    u = math.sin(math.radians(theta_arcsec / ARCSEC_PER_DEG)) * (1.0 + 1e-12) / cos_dec
    if u >= 1.0:
        return None
    return math.degrees(math.asin(u))


def assignments(obj: SkyObject, cfg: BlockConfig) -> list[BlockAssignment]:
    """Home block plus border copies into every block whose grown region
    contains the object.  Native first, copies sorted by (zone, block)."""
    home = home_block(obj, cfg)
    theta_deg = cfg.theta_deg
    n_zones = cfg.zone_count()
    cos_obj = max(math.cos(math.radians(obj.dec)), 0.0)

    copies: list[BlockKey] = []
    for zone in range(max(0, home.zone - 1), min(n_zones, home.zone + 2)):
        lo, hi = cfg.zone_dec_range(zone)
        if not (lo - theta_deg <= obj.dec <= hi + theta_deg):
            continue
        dec_star = min(max(obj.dec, lo), hi)
        cos_eff = min(math.cos(math.radians(dec_star)), cos_obj)
        n_blocks = cfg.blocks_in_zone(zone)
        width = cfg.block_width(zone)
        if cos_eff <= 0.0:
            grow = None
        else:
            grow = _ra_growth_deg(cfg.theta_arcsec, cos_eff)
        if grow is None or 2.0 * grow + width >= 360.0:
            blocks = range(n_blocks)
        else:
            b_lo = math.floor((obj.ra - grow) / width)
            b_hi = math.floor((obj.ra + grow) / width)
            blocks = [b % n_blocks for b in range(int(b_lo), int(b_hi) + 1)]
        for b in blocks:
            key = BlockKey(zone, b)
            if key != home:
                copies.append(key)

    copies = sorted(set(copies))
    return [BlockAssignment(home, True)] + [BlockAssignment(k, False) for k in copies]


def _chord_length(theta_arcsec: float) -> float:
    return 2.0 * math.sin(0.5 * theta_arcsec / ARCSEC_PER_RAD)


def pairs_in_block(
    members: list[tuple[SkyObject, bool]],
    cfg: BlockConfig,
    stats: PairSearchStats | None = None,
) -> list[PairRecord]:
    """All qualifying pairs among one block's members.

    Members are bucketed into a grid of sub-blocks whose edge is the
    chord of sub_block_arcsec, so only same-cell and adjacent-cell
    candidates are compared; because the sub-block edge is at least the
    search radius, no qualifying pair can span further than one cell.
    A pair is kept when its distance is within theta and its lower-id
    member is native here (the single-emission rule).
    """
    seen: set[int] = set()
    for obj, _ in members:
        if obj.id in seen:
            raise DuplicateObjectError(f"duplicate object id {obj.id} in block members")
        seen.add(obj.id)

    theta = cfg.theta_arcsec
    edge = _chord_length(cfg.sub_block_arcsec)
    cells: dict[tuple[int, int, int], list[int]] = {}
    vecs: list[tuple[float, float, float]] = []
    for idx, (obj, _) in enumerate(members):
        v = obj.unit_vector()
        vecs.append(v)
        cell = (int(math.floor(v[0] / edge)), int(math.floor(v[1] / edge)),
                int(math.floor(v[2] / edge)))
        cells.setdefault(cell, []).append(idx)

    out: list[PairRecord] = []

    def consider(i: int, j: int) -> None:
        a_obj, a_native = members[i]
        b_obj, b_native = members[j]
        if stats is not None:
            stats.distance_evals += 1
        dist = angular_distance(a_obj, b_obj)
        if dist > theta:
            return
        if a_obj.id < b_obj.id:
            lo_native, lo, hi = a_native, a_obj, b_obj
        else:
            lo_native, lo, hi = b_native, b_obj, a_obj
        if lo_native:
            out.append(PairRecord(lo.id, hi.id, dist))

    neighbor_offsets = [
        (dx, dy, dz)
        for dx in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dz in (-1, 0, 1)
    ]
    for cell, idxs in cells.items():
        for a_pos in range(len(idxs)):
            for b_pos in range(a_pos + 1, len(idxs)):
                if stats is not None:
                    stats.candidates += 1
                consider(idxs[a_pos], idxs[b_pos])
        for off in neighbor_offsets:
            if off <= (0, 0, 0):
                continue  # each unordered cell pair visited once
            other = (cell[0] + off[0], cell[1] + off[1], cell[2] + off[2])
            if other in cells:
                for i in idxs:
                    for j in cells[other]:
                        if stats is not None:
                            stats.candidates += 1
                        consider(i, j)

    out.sort(key=lambda p: (p.id_a, p.id_b))
    return out


def brute_force_pairs(
    objs: list[SkyObject], theta_arcsec: float, stats: PairSearchStats | None = None
) -> list[PairRecord]:
    """All-pairs reference oracle: vectorized O(n^2) scan over unit vectors.

    Computes the same half-angle chord distance as angular_distance and is
    independent of the block/sub-block machinery.
    """
    import numpy as np

    n = len(objs)
    ids = [o.id for o in objs]
    if len(set(ids)) != n:
        raise DuplicateObjectError("duplicate object ids in catalog")
    if n < 2:
        return []
    if stats is not None:
        stats.distance_evals += n * (n - 1) // 2

    vecs = np.array([o.unit_vector() for o in objs], dtype=np.float64)
    max_half_chord = math.sin(0.5 * theta_arcsec / ARCSEC_PER_RAD) * (1.0 + 1e-9)
    out: list[PairRecord] = []
    chunk = max(1, min(n, 8 * 1024 * 1024 // (n * 8)))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        diff = vecs[start:stop, None, :] - vecs[None, :, :]
        half = 0.5 * np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        rows, cols = np.nonzero(half <= max_half_chord)
        keep = start + rows < cols  # upper triangle only
        rows, cols = rows[keep], cols[keep]
        dists = 2.0 * np.arcsin(np.minimum(half[rows, cols], 1.0)) * ARCSEC_PER_RAD
        for r, c, d in zip(rows, cols, dists):
            if d > theta_arcsec:
                continue  # candidate margin overshoot
            i, j = start + int(r), int(c)
            a, b = ids[i], ids[j]
            if a > b:
                a, b = b, a
            out.append(PairRecord(a, b, float(d)))
    out.sort(key=lambda p: (p.id_a, p.id_b))
    return out


_BIN_EDGE_SLACK = 1e-9  # arcsec; absorbs representation error at bin edges


def histogram(pairs: list[PairRecord]) -> PairHistogram:
    """Bucket pair distances into 60 one-arcsecond bins, (k-1, k] each.

    Exactly-zero separations land in bin 1 so co-located objects still
    count somewhere deterministic.  Distances within 1e-9'' above a bin
    edge count as the edge: a separation that is 15'' in exact arithmetic
    may compute as 15 plus an ulp, and it must still land in bin 15.
    """
    counts = [0] * HISTOGRAM_BINS
    for p in pairs:
        if p.dist_arcsec > HISTOGRAM_BINS + _BIN_EDGE_SLACK:
            raise HistogramRangeError(
                f"pair ({p.id_a}, {p.id_b}) at {p.dist_arcsec}'' exceeds {HISTOGRAM_BINS}''"
            )
        k = min(HISTOGRAM_BINS, max(1, math.ceil(p.dist_arcsec - _BIN_EDGE_SLACK)))
        counts[k - 1] += 1
    return PairHistogram(tuple(counts))
