import time

import numpy as np
import pandas as pd
import pytest
from shapely.geometry import Polygon

from app.core.exceptions import DimensionMismatchError, GeometryParseError, IdMismatchError
from app.services.zonal import (
    STATISTICS,
    PolygonSet,
    RasterGrid,
    RasterMetadata,
    ZonalResult,
    ZonePolygon,
    ZoneStats,
    build_intersections,
    export_covariates,
    naive_zonal_stats,
    neighbor_join,
    zonal_stats,
)


def square(x0, y0, x1, y1):
    return [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]


def grid_meta(n_rows, n_cols, nodata=-9999):
    return RasterMetadata(n_rows, n_cols, 0.0, 0.0, 1.0, nodata)


def random_polygons(rng, count, extent, max_radius):
    """Star-shaped (hence simple) polygons scattered over [0, extent)^2."""
    items = []
    for i in range(count):
        cx, cy = rng.uniform(0, extent, size=2)
        k = int(rng.integers(3, 9))
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=k))
        radii = rng.uniform(0.3, 1.0, size=k) * max_radius
        items.append((f"p{i}", list(zip(cx + radii * np.cos(angles), cy + radii * np.sin(angles)))))
    return PolygonSet.from_rings(items)


def assert_same_stats(a, b, rel=0.0):
    assert a.ids == b.ids
    for pid in a.ids:
        x, y = a.stats[pid], b.stats[pid]
        assert x.count == y.count, pid
        for name in STATISTICS:
            u, v = getattr(x, name), getattr(y, name)
            if u is None or v is None:
                assert u is v
            elif rel:
                assert u == pytest.approx(v, rel=rel)
            else:
                assert u == v, (pid, name)


# ------------------------------------------------------------------------------
# Intersections
# ------------------------------------------------------------------------------

def test_single_pixel_polygon():
    meta = grid_meta(4, 4)
    polys = PolygonSet.from_rings([("a", square(0.2, 3.2, 0.8, 3.8))])
    ix = build_intersections(polys, meta)
    assert ix.entries() == [("a", 0, 0, 0)]


def test_rectangle_two_rows_three_cols():
    meta = grid_meta(6, 6)
    polys = PolygonSet.from_rings([("r", square(1.1, 2.1, 3.9, 3.9))])
    ix = build_intersections(polys, meta)
    # y in (2.1, 3.9) holds row centers 3.5 and 2.5 -> rows 2 and 3
    assert ix.entries() == [("r", 2, 1, 3), ("r", 3, 1, 3)]


def test_polygon_outside_extent():
    polys = PolygonSet.from_rings([("far", square(100, 100, 110, 110))])
    ix = build_intersections(polys, grid_meta(8, 8))
    assert len(ix) == 0
    assert ix.pixel_count() == 0


def test_zero_area_polygon_warns(caplog):
    polys = PolygonSet.from_rings([("flat", [(0, 0), (2, 2), (4, 4)])])
    with caplog.at_level("WARNING"):
        ix = build_intersections(polys, grid_meta(8, 8))
    assert len(ix) == 0
    assert "zero area" in caplog.text


def test_entries_sorted_by_row_then_column(rng):
    polys = random_polygons(rng, 30, 32, 6)
    ix = build_intersections(polys, grid_meta(32, 32))
    keys = list(zip(ix.row.tolist(), ix.col_start.tolist()))
    assert keys == sorted(keys)
    assert np.all(ix.col_start <= ix.col_end)
    assert ix.row.min() >= 0 and ix.row.max() < 32
    assert ix.col_end.max() < 32


def test_duplicate_ids_rejected():
    with pytest.raises(GeometryParseError):
        PolygonSet.from_rings([("a", square(0, 0, 1, 1)), ("a", square(2, 2, 3, 3))])


# ------------------------------------------------------------------------------
# Statistics
# ------------------------------------------------------------------------------

def test_constant_raster():
    meta = grid_meta(4, 4)
    raster = RasterGrid(meta, np.full((4, 4), 7, dtype=np.int64))
    polys = PolygonSet.from_rings([("z", square(1, 1, 3, 3))])
    z = zonal_stats(build_intersections(polys, meta), raster).stats["z"]
    assert (z.min, z.max, z.median, z.mode, z.sum, z.count) == (7, 7, 7, 7, 28, 4)


def test_nodata_only_zone():
    meta = grid_meta(4, 4, nodata=-1)
    values = np.full((4, 4), 3, dtype=np.int64)
    values[0, 0] = -1
    polys = PolygonSet.from_rings([("z", square(0, 3, 1, 4))])
    z = zonal_stats(build_intersections(polys, meta), RasterGrid(meta, values)).stats["z"]
    assert z == ZoneStats.empty()


def test_lower_median_and_smallest_mode():
    assert ZoneStats.from_sorted(np.array([1, 2, 3, 4])).median == 2
    assert ZoneStats.from_sorted(np.array([1, 1, 2, 3, 3])).mode == 1


def test_holes_are_excluded():
    meta = grid_meta(5, 5)
    donut = Polygon(square(0, 0, 5, 5), holes=[square(2, 2, 3, 3)])
    polys = PolygonSet((ZonePolygon("d", donut),))
    ix = build_intersections(polys, meta)
    assert ix.pixel_count() == 24


def test_matches_naive_oracle_on_integer_raster(rng):
    meta = grid_meta(64, 64)
    raster = RasterGrid(meta, rng.integers(0, 12, size=(64, 64)))
    polys = random_polygons(rng, 40, 64, 10)
    assert_same_stats(zonal_stats(build_intersections(polys, meta), raster), naive_zonal_stats(polys, raster))


def test_matches_naive_oracle_on_float_raster(rng):
    meta = RasterMetadata(40, 50, 10.0, -5.0, 0.5, None)
    values = rng.normal(size=(40, 50))
    values[rng.random((40, 50)) < 0.1] = np.nan
    raster = RasterGrid(meta, values)
    polys = random_polygons(rng, 25, 20, 6)
    polys = PolygonSet.from_rings(
        (p.id, [(x + 10.0, y - 5.0) for x, y in list(p.geometry.exterior.coords)[:-1]]) for p in polys
    )
    assert_same_stats(
        zonal_stats(build_intersections(polys, meta), raster), naive_zonal_stats(polys, raster), rel=1e-9
    )


def test_worker_count_does_not_change_results(rng):
    meta = grid_meta(48, 48)
    raster = RasterGrid(meta, rng.integers(0, 100, size=(48, 48)))
    polys = random_polygons(rng, 20, 48, 12)
    ix = build_intersections(polys, meta)
    assert_same_stats(zonal_stats(ix, raster, workers=1), zonal_stats(ix, raster, workers=4))


def test_partition_of_tiling():
    meta = grid_meta(16, 16)
    values = np.arange(256).reshape(16, 16)
    # tile borders run through pixel centers; every center must land in exactly one tile
    edges = [0.0, 4.5, 8.5, 12.5, 16.0]
    tiles = [
        (f"t{i}{j}", square(edges[i], edges[j], edges[i + 1], edges[j + 1]))
        for i in range(4)
        for j in range(4)
    ]
    polys = PolygonSet.from_rings(tiles)
    result = zonal_stats(build_intersections(polys, meta), RasterGrid(meta, values))
    assert sum(z.count for z in result.stats.values()) == 256
    assert sum(z.sum for z in result.stats.values()) == values.sum()


def test_dimension_mismatch():
    polys = PolygonSet.from_rings([("a", square(0, 0, 2, 2))])
    ix = build_intersections(polys, grid_meta(4, 4))
    with pytest.raises(DimensionMismatchError):
        zonal_stats(ix, RasterGrid(grid_meta(5, 5), np.zeros((5, 5))))


# ------------------------------------------------------------------------------
# Neighbors
# ------------------------------------------------------------------------------

def test_disjoint_squares_have_no_neighbors():
    polys = PolygonSet.from_rings([("a", square(0, 0, 1, 1)), ("b", square(3, 3, 4, 4))])
    assert neighbor_join(polys) == []


def test_lattice_center_has_eight_neighbors():
    polys = PolygonSet.from_rings(
        [(f"c{r}{c}", square(c, r, c + 1, r + 1)) for r in range(3) for c in range(3)]
    )
    pairs = neighbor_join(polys)
    center = [p for p in pairs if "c11" in p]
    assert len(center) == 8
    assert all(a < b for a, b in ((polys.ids.index(x), polys.ids.index(y)) for x, y in pairs))


def test_duplicate_geometry_reported_once():
    polys = PolygonSet.from_rings([("a", square(0, 0, 1, 1)), ("b", square(0, 0, 1, 1))])
    assert neighbor_join(polys) == [("a", "b")]


# ------------------------------------------------------------------------------
# Covariate export
# ------------------------------------------------------------------------------

def _two_layers(rng):
    meta = grid_meta(8, 8)
    polys = PolygonSet.from_rings(
        [("a", square(0, 0, 3, 3)), ("b", square(4, 4, 8, 8)), ("c", square(20, 20, 21, 21))]
    )
    ix = build_intersections(polys, meta)
    elevation = zonal_stats(ix, RasterGrid(meta, rng.integers(0, 50, size=(8, 8))), layer="elevation")
    slope = zonal_stats(ix, RasterGrid(meta, rng.random((8, 8))), layer="slope")
    return elevation, slope


def test_export_two_layers(tmp_path, rng):
    elevation, slope = _two_layers(rng)
    out = tmp_path / "covariates.csv"
    assert export_covariates([elevation, slope], out) == 3

    frame = pd.read_csv(out)
    assert len(frame.columns) == 13
    assert frame.columns[0] == "id"
    assert list(frame["id"]) == ["a", "b", "c"]
    assert frame.loc[0, "elevation_sum"] == elevation.stats["a"].sum
    assert frame.loc[1, "slope_median"] == slope.stats["b"].median
    # empty zone: blank statistics, zero count
    assert pd.isna(frame.loc[2, "elevation_min"])
    assert frame.loc[2, "elevation_count"] == 0


def test_export_selected_statistics(tmp_path, rng):
    elevation, _ = _two_layers(rng)
    out = tmp_path / "subset.csv"
    export_covariates([elevation], out, stats=["min", "count"])
    assert pd.read_csv(out).columns.tolist() == ["id", "elevation_min", "elevation_count"]


def test_export_empty(tmp_path):
    out = tmp_path / "empty.csv"
    assert export_covariates([ZonalResult("a", {})], out) == 0
    assert out.read_text().strip() == ",".join(["id"] + [f"a_{s}" for s in STATISTICS])


def test_export_id_mismatch(tmp_path):
    left = ZonalResult("a", {"x": ZoneStats.empty(), "y": ZoneStats.empty()})
    right = ZonalResult("b", {"x": ZoneStats.empty()})
    with pytest.raises(IdMismatchError) as exc:
        export_covariates([left, right], tmp_path / "bad.csv")
    assert exc.value.missing == {"b": ["y"]}


# ------------------------------------------------------------------------------
# Acceptance-scale checks
# ------------------------------------------------------------------------------

@pytest.mark.slow
def test_oracle_equivalence_at_scale():
    rng = np.random.default_rng(512)
    meta = grid_meta(512, 512)
    raster = RasterGrid(meta, rng.integers(0, 1000, size=(512, 512)))
    polys = random_polygons(rng, 100, 512, 40)
    assert_same_stats(zonal_stats(build_intersections(polys, meta), raster), naive_zonal_stats(polys, raster))


@pytest.mark.slow
def test_aggregation_scales_linearly_in_pixels():
    rng = np.random.default_rng(0)
    per_pixel = []
    for side in (256, 512, 1024):
        meta = RasterMetadata(side, side, 0.0, 0.0, 1024 / side, None)
        raster = RasterGrid(meta, rng.integers(0, 100, size=(side, side)))
        polys = PolygonSet.from_rings(
            [(f"t{i}{j}", square(i * 128, j * 128, (i + 1) * 128, (j + 1) * 128)) for i in range(8) for j in range(8)]
        )
        ix = build_intersections(polys, meta)
        best = min(_timed(lambda: zonal_stats(ix, raster)) for _ in range(3))
        per_pixel.append(best / (side * side))
    mean = float(np.mean(per_pixel))
    assert all(abs(p - mean) / mean <= 0.25 for p in per_pixel)


@pytest.mark.slow
def test_intersections_scale_as_n_log_n_in_polygons():
    rng = np.random.default_rng(2)
    per_unit = []
    for count in (1_000, 10_000, 100_000):
        # constant polygon density and size, so pixels per polygon stay level
        side = int(np.sqrt(count) * 8)
        meta = grid_meta(side, side)
        polys = random_polygons(rng, count, side, 4)
        best = min(_timed(lambda: build_intersections(polys, meta)) for _ in range(3))
        per_unit.append(best / (count * np.log(count)))
    mean = float(np.mean(per_unit))
    assert all(abs(p - mean) / mean <= 0.35 for p in per_unit), per_unit


def _timed(fn):
    started = time.perf_counter()
    fn()
    return time.perf_counter() - started
