"""
File formats for the zonal engine.

- rasters: ASCII grid, a 6-line header (ncols, nrows, xllcorner, yllcorner,
  cellsize, nodata_value) followed by row-major values, north row first
- polygons: CSV with columns `id,wkt`, one POLYGON per row
- intersections: CSV with columns `polygon_id,row,col_start,col_end`
- neighbors: CSV with columns `id_a,id_b`
"""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import pandas as pd
from shapely import wkt
from shapely.errors import ShapelyError
from shapely.geometry import Polygon

from app.core.exceptions import GeometryParseError, TableParseError
from app.services.zonal import IntersectionsFile, PolygonSet, RasterGrid, RasterMetadata, ZonePolygon

logger = logging.getLogger(__name__)

HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")
INTERSECTION_COLUMNS = ["polygon_id", "row", "col_start", "col_end"]


def _read_header(lines: list[str], path) -> dict[str, str]:
    header = {}
    for number, line in enumerate(lines, start=1):
        parts = line.split()
        if len(parts) != 2:
            raise TableParseError(number, f"malformed raster header line in {path}: {line.strip()!r}")
        header[parts[0].lower()] = parts[1]
    missing = [k for k in HEADER_KEYS if k not in header]
    if missing:
        raise TableParseError(len(lines), f"raster header in {path} lacks {', '.join(missing)}")
    return header


def read_raster_metadata(path: str | Path) -> RasterMetadata:
    """Header of an ASCII grid, without touching the pixel values."""
    with open(path, encoding="utf-8") as fh:
        lines = [fh.readline() for _ in range(len(HEADER_KEYS))]
    h = _read_header(lines, path)
    return RasterMetadata(
        n_rows=int(h["nrows"]),
        n_cols=int(h["ncols"]),
        x_origin=float(h["xllcorner"]),
        y_origin=float(h["yllcorner"]),
        cell_size=float(h["cellsize"]),
        nodata=float(h["nodata_value"]),
    )


def read_ascii_grid(path: str | Path) -> RasterGrid:
    """
    Load an ASCII grid. Rasters whose values (and nodata sentinel) are all
    integral load as int64 so statistics stay exact.
    """
    meta = read_raster_metadata(path)
    values = np.loadtxt(path, skiprows=len(HEADER_KEYS), dtype=float, ndmin=2)
    if values.shape != (meta.n_rows, meta.n_cols):
        raise TableParseError(
            len(HEADER_KEYS) + 1,
            f"raster {path} holds {values.shape} values, header says {(meta.n_rows, meta.n_cols)}",
        )
    finite = np.isfinite(values).all()
    if finite and np.array_equal(values, np.round(values)) and float(meta.nodata).is_integer():
        values = values.astype(np.int64)
        meta = RasterMetadata(meta.n_rows, meta.n_cols, meta.x_origin, meta.y_origin, meta.cell_size, int(meta.nodata))
    logger.info(f"Loaded raster {path}: {meta.n_rows}x{meta.n_cols}, cell size {meta.cell_size}")
    return RasterGrid(meta, values)


def _num(value) -> str:
    value = float(value)
    return str(int(value)) if value.is_integer() else repr(value)


def write_ascii_grid(raster: RasterGrid, path: str | Path) -> None:
    meta = raster.metadata
    nodata = -9999 if meta.nodata is None else meta.nodata
    header = (
        f"ncols {meta.n_cols}\n"
        f"nrows {meta.n_rows}\n"
        f"xllcorner {_num(meta.x_origin)}\n"
        f"yllcorner {_num(meta.y_origin)}\n"
        f"cellsize {_num(meta.cell_size)}\n"
        f"nodata_value {_num(nodata)}"
    )
    fmt = "%d" if raster.is_integer else "%.17g"
    np.savetxt(path, raster.values, fmt=fmt, header=header, comments="", encoding="utf-8")


def read_polygons_csv(path: str | Path) -> PolygonSet:
    frame = pd.read_csv(path, dtype={"id": str, "wkt": str}, keep_default_na=False)
    if list(frame.columns) != ["id", "wkt"]:
        raise GeometryParseError(f"{path}: expected columns id,wkt, got {','.join(frame.columns)}")
    polygons = []
    for offset, (pid, text) in enumerate(frame.itertuples(index=False, name=None)):
        line = offset + 2
        try:
            geom = wkt.loads(text)
        except (ShapelyError, ValueError) as e:
            raise GeometryParseError(f"{path} line {line}: invalid WKT for polygon {pid}: {e}") from e
        if not isinstance(geom, Polygon):
            raise GeometryParseError(f"{path} line {line}: polygon {pid} is a {geom.geom_type}, expected POLYGON")
        if len(geom.exterior.coords) < 4:
            raise GeometryParseError(f"{path} line {line}: polygon {pid} needs at least 3 vertices")
        polygons.append(ZonePolygon(pid, geom))
    logger.info(f"Loaded {len(polygons)} polygons from {path}")
    return PolygonSet(tuple(polygons))


def write_polygons_csv(polys: PolygonSet, path: str | Path) -> None:
    frame = pd.DataFrame({"id": polys.ids, "wkt": [p.geometry.wkt for p in polys]})
    frame.to_csv(path, index=False, lineterminator="\n")


def save_intersections(ix: IntersectionsFile, path: str | Path) -> None:
    frame = pd.DataFrame(
        {
            "polygon_id": [ix.polygon_ids[p] for p in ix.polygon],
            "row": ix.row,
            "col_start": ix.col_start,
            "col_end": ix.col_end,
        },
        columns=INTERSECTION_COLUMNS,
    )
    frame.to_csv(path, index=False, lineterminator="\n")


def load_intersections(path: str | Path, polys: PolygonSet, meta: RasterMetadata) -> IntersectionsFile:
    """
    Read a saved intersections file. Polygon ids resolve against `polys` so the
    zone universe (including zones without pixels) is preserved.
    """
    frame = pd.read_csv(path, dtype={"polygon_id": str})
    if list(frame.columns) != INTERSECTION_COLUMNS:
        raise TableParseError(1, f"{path}: expected columns {','.join(INTERSECTION_COLUMNS)}")
    position = {str(pid): i for i, pid in enumerate(polys.ids)}
    unknown = sorted(set(frame["polygon_id"]) - set(position))
    if unknown:
        raise GeometryParseError(f"{path}: unknown polygon ids {unknown[:5]}")
    row = frame["row"].to_numpy(np.int64)
    col_start = frame["col_start"].to_numpy(np.int64)
    col_end = frame["col_end"].to_numpy(np.int64)
    bad = (row < 0) | (row >= meta.n_rows) | (col_start < 0) | (col_end >= meta.n_cols) | (col_start > col_end)
    if bad.any():
        raise TableParseError(int(np.argmax(bad)) + 2, f"{path}: range outside the raster extent")
    return IntersectionsFile(
        tuple(polys.ids),
        meta.n_rows,
        meta.n_cols,
        frame["polygon_id"].map(position).to_numpy(np.int64),
        row,
        col_start,
        col_end,
    )


def write_neighbors(pairs: list[tuple], path: str | Path) -> int:
    frame = pd.DataFrame(pairs, columns=["id_a", "id_b"])
    frame.to_csv(path, index=False, lineterminator="\n")
    return len(frame)
