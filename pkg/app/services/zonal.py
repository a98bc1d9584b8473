"""
Zonal statistics through an intersections file.

Computing per-polygon statistics is split in two passes:

  build_intersections   vector data + raster metadata only -> for every raster
                        row, the half-open column ranges of pixel centers
                        inside each polygon (even-odd scanline over edges)
  zonal_stats           one pass over the raster rows covered by the sorted
                        ranges, accumulating per-polygon value multisets

Pixel membership is decided on pixel centers. A center lying exactly on a
vertical edge belongs to the polygon on its east side, one lying exactly on a
horizontal edge to the polygon on its south side, so tilings partition pixels.

Statistics are taken over non-nodata pixels. The median of an even count is
the lower median and mode ties go to the smallest value.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

import numpy as np
import pandas as pd
from shapely import STRtree
from shapely.geometry import Polygon

from app.core.exceptions import DimensionMismatchError, GeometryParseError, IdMismatchError

logger = logging.getLogger(__name__)

STATISTICS = ("min", "max", "median", "sum", "mode", "count")


# ------------------------------------------------------------------------------
# Raster and vector inputs
# ------------------------------------------------------------------------------

@dataclass(frozen=True)
class RasterMetadata:
    n_rows: int
    n_cols: int
    # lower-left corner of the raster extent
    x_origin: float
    y_origin: float
    cell_size: float
    nodata: float | None = None

    def __post_init__(self):
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValueError(f"raster must be at least 1x1, got {self.n_rows}x{self.n_cols}")
        if not self.cell_size > 0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")

    @property
    def y_top(self) -> float:
        return self.y_origin + self.n_rows * self.cell_size

    def column_centers(self) -> np.ndarray:
        return self.x_origin + (np.arange(self.n_cols) + 0.5) * self.cell_size

    def row_centers(self) -> np.ndarray:
        """Center y of every row, row 0 being the northern-most."""
        return self.y_top - (np.arange(self.n_rows) + 0.5) * self.cell_size


@dataclass(frozen=True, eq=False)
class RasterGrid:
    metadata: RasterMetadata
    values: np.ndarray

    def __post_init__(self):
        expected = (self.metadata.n_rows, self.metadata.n_cols)
        if np.shape(self.values) != expected:
            raise DimensionMismatchError(f"raster values are {np.shape(self.values)}, metadata says {expected}")

    @property
    def is_integer(self) -> bool:
        return np.issubdtype(self.values.dtype, np.integer)

    def valid_mask(self, values: np.ndarray) -> np.ndarray:
        mask = np.ones(values.shape, dtype=bool)
        if not self.is_integer:
            mask &= ~np.isnan(values)
        if self.metadata.nodata is not None:
            mask &= values != self.metadata.nodata
        return mask


@dataclass(frozen=True)
class ZonePolygon:
    id: Hashable
    geometry: Polygon

    def rings(self) -> list[np.ndarray]:
        """Exterior and interior rings as closed (k, 2) coordinate arrays."""
        rings = [np.asarray(self.geometry.exterior.coords)]
        rings.extend(np.asarray(r.coords) for r in self.geometry.interiors)
        return rings


@dataclass(frozen=True)
class PolygonSet:
    polygons: tuple[ZonePolygon, ...]

    def __post_init__(self):
        ids = [p.id for p in self.polygons]
        if len(set(ids)) != len(ids):
            seen, dupes = set(), set()
            for i in ids:
                (dupes if i in seen else seen).add(i)
            raise GeometryParseError(f"duplicate polygon ids: {sorted(map(str, dupes))}")

    def __len__(self) -> int:
        return len(self.polygons)

    def __iter__(self):
        return iter(self.polygons)

    @property
    def ids(self) -> list[Hashable]:
        return [p.id for p in self.polygons]

    @classmethod
    def from_rings(cls, items: Iterable[tuple[Hashable, Sequence[tuple[float, float]]]]) -> PolygonSet:
        """Build from (id, vertex list) pairs; open rings are closed."""
        polygons = []
        for pid, ring in items:
            coords = [tuple(map(float, v)) for v in ring]
            if len(coords) > 1 and coords[0] == coords[-1]:
                coords = coords[:-1]
            if len(coords) < 3:
                raise GeometryParseError(f"polygon {pid}: a ring needs at least 3 vertices")
            polygons.append(ZonePolygon(pid, Polygon(coords)))
        return cls(tuple(polygons))


# ------------------------------------------------------------------------------
# Intersections file
# ------------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class IntersectionsFile:
    """
    Sorted (polygon, raster_row, col_start, col_end) entries; column ranges are
    inclusive. `polygon` indexes into `polygon_ids`.
    """

    polygon_ids: tuple[Hashable, ...]
    n_rows: int
    n_cols: int
    polygon: np.ndarray
    row: np.ndarray
    col_start: np.ndarray
    col_end: np.ndarray

    def __len__(self) -> int:
        return int(self.row.size)

    def pixel_count(self) -> int:
        return int((self.col_end - self.col_start + 1).sum())

    def entries(self) -> list[tuple[Hashable, int, int, int]]:
        return [
            (self.polygon_ids[p], int(r), int(a), int(b))
            for p, r, a, b in zip(self.polygon, self.row, self.col_start, self.col_end)
        ]


def _edges(rings: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    x0 = np.concatenate([r[:-1, 0] for r in rings])
    y0 = np.concatenate([r[:-1, 1] for r in rings])
    x1 = np.concatenate([r[1:, 0] for r in rings])
    y1 = np.concatenate([r[1:, 1] for r in rings])
    return x0, y0, x1, y1


def scanline_crossings(rings: list[np.ndarray], y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    X coordinates where horizontal lines at `y` cross the ring edges.

    Returns (xs, counts): xs is (len(y), n_edges) sorted ascending with +inf
    padding; counts[i] is the number of real crossings on line i. An edge
    counts when its endpoints lie on opposite sides of the line under the rule
    (y_a < y) != (y_b < y), which assigns on-boundary points to the south side.
    """
    x0, y0, x1, y1 = _edges(rings)
    yy = y[:, None]
    crosses = (y0 < yy) != (y1 < yy)
    dy = np.where(y1 == y0, 1.0, y1 - y0)
    xs = x0 + (yy - y0) * (x1 - x0) / dy
    xs = np.where(crosses, xs, np.inf)
    xs.sort(axis=1)
    return xs, crosses.sum(axis=1)


def build_intersections(polys: PolygonSet, meta: RasterMetadata) -> IntersectionsFile:
    """
    Pixel-center ranges covered by every polygon, from geometry and raster
    metadata alone. Raster values are never read.
    """
    col_centers = meta.column_centers()
    row_centers = meta.row_centers()
    cs = meta.cell_size

    parts_p, parts_r, parts_a, parts_b = [], [], [], []
    for idx, zone in enumerate(polys):
        geom = zone.geometry
        if geom.is_empty or geom.area == 0:
            logger.warning(f"Polygon {zone.id} has zero area; it contributes no pixels")
            continue
        minx, miny, maxx, maxy = geom.bounds
        r_lo = max(0, math.floor((meta.y_top - maxy) / cs - 0.5))
        r_hi = min(meta.n_rows - 1, math.ceil((meta.y_top - miny) / cs - 0.5))
        if r_lo > r_hi or maxx < col_centers[0] or minx > col_centers[-1]:
            continue

        rows = np.arange(r_lo, r_hi + 1)
        xs, counts = scanline_crossings(zone.rings(), row_centers[rows])
        for k in range(0, xs.shape[1] - 1, 2):
            live = counts > k + 1
            if not live.any():
                break
            # first center >= left crossing, last center < right crossing
            a = np.searchsorted(col_centers, xs[live, k], side="left")
            b = np.searchsorted(col_centers, xs[live, k + 1], side="left") - 1
            keep = a <= b
            n_keep = int(keep.sum())
            if n_keep:
                parts_p.append(np.full(n_keep, idx))
                parts_r.append(rows[live][keep])
                parts_a.append(a[keep])
                parts_b.append(b[keep])

    if parts_r:
        polygon = np.concatenate(parts_p)
        row = np.concatenate(parts_r)
        col_start = np.concatenate(parts_a)
        col_end = np.concatenate(parts_b)
        order = np.lexsort((polygon, col_start, row))
        polygon, row, col_start, col_end = polygon[order], row[order], col_start[order], col_end[order]
    else:
        polygon = row = col_start = col_end = np.empty(0, dtype=np.int64)

    logger.info(f"Built intersections for {len(polys)} polygons: {row.size} ranges")
    return IntersectionsFile(
        tuple(polys.ids),
        meta.n_rows,
        meta.n_cols,
        polygon.astype(np.int64),
        row.astype(np.int64),
        col_start.astype(np.int64),
        col_end.astype(np.int64),
    )


# ------------------------------------------------------------------------------
# Aggregation
# ------------------------------------------------------------------------------

@dataclass(frozen=True)
class ZoneStats:
    min: float | None
    max: float | None
    median: float | None
    sum: float | None
    mode: float | None
    count: int

    @classmethod
    def empty(cls) -> ZoneStats:
        return cls(None, None, None, None, None, 0)

    @classmethod
    def from_sorted(cls, values: np.ndarray) -> ZoneStats:
        n = int(values.size)
        if n == 0:
            return cls.empty()
        uniq, freq = np.unique(values, return_counts=True)
        return cls(
            min=values[0].item(),
            max=values[-1].item(),
            median=values[(n - 1) // 2].item(),
            sum=values.sum().item(),
            mode=uniq[int(np.argmax(freq))].item(),
            count=n,
        )

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in STATISTICS}


@dataclass(frozen=True)
class ZonalResult:
    layer: str
    stats: dict[Hashable, ZoneStats]

    @property
    def ids(self) -> list[Hashable]:
        return list(self.stats)


@dataclass
class ZoneAccumulator:
    """Per-polygon pixel values gathered from one block of raster rows."""

    polygon: np.ndarray
    values: np.ndarray

    @classmethod
    def merge(cls, parts: Sequence[ZoneAccumulator]) -> ZoneAccumulator:
        if not parts:
            return cls(np.empty(0, dtype=np.int64), np.empty(0))
        return cls(np.concatenate([p.polygon for p in parts]), np.concatenate([p.values for p in parts]))


def _accumulate_rows(ix: IntersectionsFile, raster: RasterGrid, lo: int, hi: int) -> ZoneAccumulator:
    """Gather the pixels of entries lo..hi-1 (a contiguous block of rows)."""
    starts = ix.col_start[lo:hi]
    lengths = ix.col_end[lo:hi] - starts + 1
    total = int(lengths.sum())
    first = np.cumsum(lengths) - lengths
    cols = np.repeat(starts, lengths) + (np.arange(total) - np.repeat(first, lengths))
    rows = np.repeat(ix.row[lo:hi], lengths)
    poly = np.repeat(ix.polygon[lo:hi], lengths)
    vals = raster.values[rows, cols]
    ok = raster.valid_mask(vals)
    return ZoneAccumulator(poly[ok], vals[ok])


def _row_blocks(ix: IntersectionsFile, n_blocks: int) -> list[tuple[int, int]]:
    """Split the entry list at row boundaries into at most n_blocks pieces."""
    if len(ix) == 0:
        return []
    cuts = np.linspace(0, ix.n_rows, n_blocks + 1).round().astype(int)
    bounds = np.searchsorted(ix.row, cuts, side="left")
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def zonal_stats(ix: IntersectionsFile, raster: RasterGrid, layer: str = "layer", workers: int = 1) -> ZonalResult:
    """
    Six summary statistics per polygon. Rows are partitioned across `workers`
    threads; partial accumulators merge exactly, so results do not depend on
    the worker count.
    """
    meta = raster.metadata
    if (ix.n_rows, ix.n_cols) != (meta.n_rows, meta.n_cols):
        raise DimensionMismatchError(
            f"intersections built for {ix.n_rows}x{ix.n_cols}, raster is {meta.n_rows}x{meta.n_cols}"
        )

    blocks = _row_blocks(ix, max(1, workers))
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda blk: _accumulate_rows(ix, raster, *blk), blocks))
    else:
        parts = [_accumulate_rows(ix, raster, lo, hi) for lo, hi in blocks]
    acc = ZoneAccumulator.merge(parts)

    order = np.lexsort((acc.values, acc.polygon))
    poly, vals = acc.polygon[order], acc.values[order]
    bounds = np.searchsorted(poly, np.arange(len(ix.polygon_ids) + 1), side="left")

    stats = {}
    for idx, pid in enumerate(ix.polygon_ids):
        stats[pid] = ZoneStats.from_sorted(vals[bounds[idx]:bounds[idx + 1]])

    logger.info(f"Zonal statistics for layer '{layer}': {len(stats)} polygons, {vals.size} pixels")
    return ZonalResult(layer, stats)


def naive_zonal_stats(polys: PolygonSet, raster: RasterGrid, layer: str = "layer") -> ZonalResult:
    """
    Reference implementation: tests every pixel center against every polygon
    with the same even-odd boundary rule. Quadratic; meant for verification.
    """
    meta = raster.metadata
    cx = meta.column_centers()
    cy = meta.row_centers()
    stats = {}
    for zone in polys:
        if zone.geometry.area == 0:
            stats[zone.id] = ZoneStats.empty()
            continue
        xs, counts = scanline_crossings(zone.rings(), cy)
        # a center is inside when an odd number of crossings lie at or left of it
        left = (xs[:, None, :] <= cx[None, :, None]).sum(axis=2)
        inside = left % 2 == 1
        vals = raster.values[inside]
        vals = np.sort(vals[raster.valid_mask(vals)])
        stats[zone.id] = ZoneStats.from_sorted(vals)
    return ZonalResult(layer, stats)


# ------------------------------------------------------------------------------
# Neighborhoods
# ------------------------------------------------------------------------------

def neighbor_join(polys: PolygonSet) -> list[tuple[Hashable, Hashable]]:
    """
    Spatial self-join with the `intersects` predicate: pairs of polygon ids
    (in input order, first < second) that share boundary or interior.
    """
    geoms = [p.geometry for p in polys]
    if not geoms:
        return []
    tree = STRtree(geoms)
    left, right = tree.query(geoms, predicate="intersects")
    keep = left < right
    pairs = sorted(zip(left[keep].tolist(), right[keep].tolist()))
    ids = polys.ids
    logger.info(f"Neighbor join over {len(geoms)} polygons found {len(pairs)} pairs")
    return [(ids[i], ids[j]) for i, j in pairs]


# ------------------------------------------------------------------------------
# Covariate export
# ------------------------------------------------------------------------------

def covariate_columns(layers: Sequence[str], stats: Sequence[str] = STATISTICS) -> list[str]:
    return ["id"] + [f"{layer}_{name}" for layer in layers for name in stats]


def export_covariates(results: Sequence[ZonalResult], out, stats: Sequence[str] = STATISTICS) -> int:
    """
    Write one CSV row per polygon id joining the statistics of every layer.
    Empty zones leave their statistic cells blank. Returns the rows written.
    """
    unknown = [s for s in stats if s not in STATISTICS]
    if unknown:
        raise ValueError(f"unknown statistics {unknown}; choose from {','.join(STATISTICS)}")

    universe: dict[Hashable, None] = {}
    for result in results:
        universe.update(dict.fromkeys(result.ids))
    missing = {r.layer: [i for i in universe if i not in r.stats] for r in results}
    missing = {layer: ids for layer, ids in missing.items() if ids}
    if missing:
        raise IdMismatchError(missing)

    ids = list(results[0].ids) if results else []
    records = []
    for pid in ids:
        record = {"id": pid}
        for result in results:
            zone = result.stats[pid].as_dict()
            for name in stats:
                record[f"{result.layer}_{name}"] = zone[name]
        records.append(record)

    frame = pd.DataFrame.from_records(records, columns=covariate_columns([r.layer for r in results], stats))
    frame.to_csv(out, index=False, lineterminator="\n")
    logger.info(f"Exported {len(frame)} covariate rows with {len(frame.columns) - 1} statistic columns to {out}")
    return len(frame)
