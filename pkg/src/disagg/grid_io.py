"""Raster and region-polygon I/O, plus polygon rasterization.

Rasters use the plain-text ASCII grid interchange format: six header lines
(``ncols``, ``nrows``, ``xllcorner``, ``yllcorner``, ``cellsize``,
``NODATA_value``, case-insensitive keys) followed by ``nrows`` lines of
``ncols`` numbers, north row first. Regions are read from GeoJSON feature
collections restricted to Polygon and MultiPolygon geometries.

No reprojection is performed anywhere; all inputs must already share one
coordinate system.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "AlignmentReport",
    "GridFormatError",
    "Raster",
    "RasterStack",
    "Region",
    "RegionFormatError",
    "RegionMask",
    "RegionSet",
    "UNASSIGNED",
    "check_alignment",
    "parse_ascii_grid",
    "parse_region_file",
    "rasterize_regions",
    "read_ascii_grid",
    "read_region_file",
    "write_ascii_grid",
    "write_region_file",
]

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")

#: Marker for grid cells whose center falls inside no region.
UNASSIGNED = -1


class GridFormatError(ValueError):
    """Malformed ASCII grid content."""


class RegionFormatError(ValueError):
    """Malformed or unsupported region file content."""


@dataclass(frozen=True)
class Raster:
    """A georeferenced pixel grid, row-major with the first row northernmost.

    The center of cell ``(r, c)`` sits at
    ``(xll + (c + 0.5) * cellsize, yll + (nrows - r - 0.5) * cellsize)``,
    so cell indices and coordinates are mutually recoverable.
    """

    ncols: int
    nrows: int
    xll: float
    yll: float
    cellsize: float
    nodata: float
    values: np.ndarray

    def __post_init__(self):
        if self.ncols < 1 or self.nrows < 1:
            raise ValueError("raster dimensions must be positive")
        if not self.cellsize > 0:
            raise ValueError("cellsize must be positive")
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (self.nrows, self.ncols):
            raise ValueError(
                f"values shape {values.shape} does not match "
                f"(nrows, ncols)=({self.nrows}, {self.ncols})"
            )
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nrows, self.ncols)

    @property
    def geometry(self) -> tuple:
        """Header attributes that two grids must share to be aligned."""
        return (self.ncols, self.nrows, self.xll, self.yll, self.cellsize)

    def missing_mask(self) -> np.ndarray:
        """Boolean grid marking nodata or non-finite cells."""
        return (self.values == self.nodata) | ~np.isfinite(self.values)

    def center_x(self) -> np.ndarray:
        """Pixel-center x coordinates per column, shape (ncols,)."""
        return self.xll + (np.arange(self.ncols) + 0.5) * self.cellsize

    def center_y(self) -> np.ndarray:
        """Pixel-center y coordinates per row (north first), shape (nrows,)."""
        return self.yll + (self.nrows - np.arange(self.nrows) - 0.5) * self.cellsize

    def center_xy(self) -> np.ndarray:
        """Pixel-center (x, y) pairs for every cell, row-major, shape (nrows*ncols, 2)."""
        xg, yg = np.meshgrid(self.center_x(), self.center_y())
        return np.column_stack([xg.ravel(), yg.ravel()])

    def with_values(self, values: np.ndarray, nodata: float | None = None) -> "Raster":
        """A raster with the same geometry but new cell values."""
        return Raster(
            ncols=self.ncols,
            nrows=self.nrows,
            xll=self.xll,
            yll=self.yll,
            cellsize=self.cellsize,
            nodata=self.nodata if nodata is None else nodata,
            values=values,
        )


@dataclass(frozen=True)
class RasterStack:
    """Named covariate layers sharing one grid geometry exactly."""

    names: tuple[str, ...]
    layers: tuple[Raster, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.names) != len(self.layers):
            raise ValueError("names and layers differ in length")
        if not self.layers:
            raise ValueError("a raster stack needs at least one layer")
        if len(set(self.names)) != len(self.names):
            raise ValueError("covariate names must be unique")
        ref = self.layers[0].geometry
        for name, layer in zip(self.names, self.layers):
            if layer.geometry != ref:
                raise ValueError(f"layer {name!r} geometry differs from the first layer")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def reference(self) -> Raster:
        return self.layers[0]

    def layer(self, name: str) -> Raster:
        try:
            return self.layers[self.names.index(name)]
        except ValueError:
            raise KeyError(f"no covariate named {name!r}") from None

    def select(self, names) -> "RasterStack":
        """Reorder/subset layers by name; unknown names raise KeyError."""
        names = tuple(names)
        return RasterStack(names=names, layers=tuple(self.layer(n) for n in names))


@dataclass(frozen=True)
class Region:
    """One aggregation polygon: identifier, aggregated response, coordinate rings."""

    id: str
    response: float
    rings: tuple[np.ndarray, ...]

    def __post_init__(self):
        if self.response < 0:
            raise ValueError(f"region {self.id!r} has negative response {self.response}")
        rings = []
        for ring in self.rings:
            arr = np.asarray(ring, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 4:
                raise ValueError(f"region {self.id!r}: each ring needs >= 4 (x, y) vertices")
            if not np.array_equal(arr[0], arr[-1]):
                raise ValueError(f"region {self.id!r}: ring is not closed (first != last vertex)")
            rings.append(arr)
        object.__setattr__(self, "rings", tuple(rings))


@dataclass(frozen=True)
class RegionSet:
    """Ordered regions with unique identifiers."""

    regions: tuple[Region, ...]

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(self.regions))
        seen = set()
        for region in self.regions:
            if region.id in seen:
                raise ValueError(f"duplicate region id {region.id!r}")
            seen.add(region.id)

    def __len__(self) -> int:
        return len(self.regions)

    def __iter__(self):
        return iter(self.regions)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(r.id for r in self.regions)

    @property
    def responses(self) -> np.ndarray:
        return np.array([r.response for r in self.regions], dtype=np.float64)


@dataclass(frozen=True)
class RegionMask:
    """Per-pixel region assignment; ``UNASSIGNED`` marks cells in no region."""

    indices: np.ndarray
    n_regions: int

    def __post_init__(self):
        indices = np.asarray(self.indices, dtype=np.int32)
        if indices.ndim != 2:
            raise ValueError("mask indices must be a 2-d grid")
        if indices.size and indices.max() >= self.n_regions:
            raise ValueError("mask references a region index beyond n_regions")
        object.__setattr__(self, "indices", indices)

    @property
    def shape(self) -> tuple[int, int]:
        return self.indices.shape

    def pixels_of(self, region_index: int) -> np.ndarray:
        """Row-major linear indices of the cells assigned to one region."""
        flat = self.indices.ravel()
        return np.nonzero(flat == region_index)[0]


def parse_ascii_grid(text: str) -> Raster:
    """Parse ASCII grid content into a :class:`Raster`.

    Cells equal to the declared nodata value are kept verbatim as the
    sentinel. Errors report the offending 1-based line number.
    """
    lines = text.splitlines()
    header: dict[str, float] = {}
    for i, key in enumerate(_HEADER_KEYS):
        if i >= len(lines):
            raise GridFormatError(f"line {i + 1}: missing header line for {key!r}")
        parts = lines[i].split()
        if len(parts) != 2:
            raise GridFormatError(f"line {i + 1}: expected '<key> <value>', got {lines[i]!r}")
        found = parts[0].lower()
        if found != key:
            raise GridFormatError(f"line {i + 1}: expected header key {key!r}, found {parts[0]!r}")
        try:
            header[key] = float(parts[1])
        except ValueError:
            raise GridFormatError(f"line {i + 1}: non-numeric value for {key!r}: {parts[1]!r}") from None

    ncols, nrows = int(header["ncols"]), int(header["nrows"])
    if ncols <= 0 or nrows <= 0 or ncols != header["ncols"] or nrows != header["nrows"]:
        raise GridFormatError("ncols and nrows must be positive integers")

    values: list[float] = []
    for lineno, line in enumerate(lines[len(_HEADER_KEYS):], start=len(_HEADER_KEYS) + 1):
        for token in line.split():
            try:
                values.append(float(token))
            except ValueError:
                raise GridFormatError(f"line {lineno}: non-numeric token {token!r}") from None
    if len(values) != nrows * ncols:
        raise GridFormatError(
            f"value count mismatch: header declares {nrows * ncols} cells, body has {len(values)}"
        )

    return Raster(
        ncols=ncols,
        nrows=nrows,
        xll=header["xllcorner"],
        yll=header["yllcorner"],
        cellsize=header["cellsize"],
        nodata=header["nodata_value"],
        values=np.array(values, dtype=np.float64).reshape(nrows, ncols),
    )


def read_ascii_grid(path) -> Raster:
    return parse_ascii_grid(Path(path).read_text())


def write_ascii_grid(raster: Raster, path) -> None:
    """Write a raster as an ASCII grid.

    Values are printed with 17 significant digits so a write/parse round
    trip reproduces them bit-exactly.
    """
    lines = [
        f"ncols {raster.ncols}",
        f"nrows {raster.nrows}",
        f"xllcorner {raster.xll!r}",
        f"yllcorner {raster.yll!r}",
        f"cellsize {raster.cellsize!r}",
        f"NODATA_value {raster.nodata!r}",
    ]
    for row in raster.values:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def parse_region_file(text: str, id_field: str, response_field: str) -> RegionSet:
    """Parse a GeoJSON feature collection into a :class:`RegionSet`.

    Only Polygon and MultiPolygon geometries are accepted; multi-ring
    polygons keep all rings. Region id and response are read from the two
    named feature properties, preserving file order.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RegionFormatError(f"unparseable region document: {exc}") from None
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise RegionFormatError("region document must be a GeoJSON FeatureCollection")

    regions = []
    for i, feature in enumerate(doc.get("features", [])):
        props = feature.get("properties") or {}
        for field_name in (id_field, response_field):
            if field_name not in props:
                raise RegionFormatError(f"feature {i}: missing property {field_name!r}")
        geometry = feature.get("geometry") or {}
        gtype = geometry.get("type")
        coords = geometry.get("coordinates")
        if gtype == "Polygon":
            raw_rings = coords
        elif gtype == "MultiPolygon":
            raw_rings = [ring for polygon in coords for ring in polygon]
        else:
            raise RegionFormatError(f"feature {i}: geometry type {gtype!r} is not polygonal")
        try:
            region = Region(
                id=str(props[id_field]),
                response=float(props[response_field]),
                rings=tuple(np.asarray(r, dtype=np.float64) for r in raw_rings),
            )
        except (TypeError, ValueError) as exc:
            raise RegionFormatError(f"feature {i}: {exc}") from None
        regions.append(region)
    try:
        return RegionSet(regions=tuple(regions))
    except ValueError as exc:
        raise RegionFormatError(str(exc)) from None


def read_region_file(path, id_field: str, response_field: str) -> RegionSet:
    return parse_region_file(Path(path).read_text(), id_field, response_field)


def write_region_file(regions: RegionSet, path, id_field: str = "id",
                      response_field: str = "response") -> None:
    """Write regions as a GeoJSON FeatureCollection (one Polygon per ring set)."""
    features = []
    for region in regions:
        features.append({
            "type": "Feature",
            "properties": {id_field: region.id, response_field: region.response},
            "geometry": {
                "type": "Polygon",
                "coordinates": [ring.tolist() for ring in region.rings],
            },
        })
    Path(path).write_text(json.dumps({"type": "FeatureCollection", "features": features}))


def _contains(rings: tuple[np.ndarray, ...], px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Even-odd ray-cast containment; points exactly on an edge count as inside."""
    inside = np.zeros(px.shape, dtype=bool)
    on_edge = np.zeros(px.shape, dtype=bool)
    for ring in rings:
        for (x1, y1), (x2, y2) in zip(ring[:-1], ring[1:]):
            crosses = (y1 > py) != (y2 > py)
            if crosses.any():
                dy = y2 - y1 if y2 != y1 else 1.0
                x_at = x1 + (x2 - x1) * (py - y1) / dy
                inside ^= crosses & (px < x_at)
            cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
            on_edge |= (
                (cross == 0.0)
                & (px >= min(x1, x2)) & (px <= max(x1, x2))
                & (py >= min(y1, y2)) & (py <= max(y1, y2))
            )
    return inside | on_edge


def rasterize_regions(regions: RegionSet, reference: Raster) -> RegionMask:
    """Assign each pixel whose center lies inside a region to that region.

    Containment uses even-odd ray casting on pixel centers; when several
    regions contain a center (shared edges, overlaps) the earliest region
    in file order wins. Remaining cells are left ``UNASSIGNED``.
    """
    xg, yg = np.meshgrid(reference.center_x(), reference.center_y())
    assigned = np.full(reference.shape, UNASSIGNED, dtype=np.int32)
    for index, region in enumerate(regions):
        free = assigned == UNASSIGNED
        if not free.any():
            break
        hit = _contains(region.rings, xg, yg)
        assigned[free & hit] = index
    return RegionMask(indices=assigned, n_regions=len(regions))


@dataclass(frozen=True)
class AlignmentReport:
    """Outcome of a grid-geometry comparison; lists each mismatching attribute."""

    aligned: bool
    mismatches: tuple[str, ...]

    def __bool__(self) -> bool:
        return self.aligned


def check_alignment(stack: RasterStack, population: Raster) -> AlignmentReport:
    """Compare covariate-stack geometry against the population grid, exactly."""
    ref = stack.reference
    mismatches = tuple(
        name
        for name in ("ncols", "nrows", "xll", "yll", "cellsize")
        if getattr(ref, name) != getattr(population, name)
    )
    return AlignmentReport(aligned=not mismatches, mismatches=mismatches)
