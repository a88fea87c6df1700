"""Geometry-constrained patch placement on building polygons and water gating.

Coordinates are pixel space: x runs along columns, y along rows, and a pixel
(r, c) is tested at its center (c + 0.5, r + 0.5). Containment uses the
even-odd rule throughout, so the sampler and the rasterization oracle agree.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imageops import (
    LABEL_NO_BUILDING,
    SOBEL_X,
    SOBEL_Y,
    BlendConfig,
    ImageTile,
    blend,
    correlate_taps,
    to_grayscale,
)

__all__ = [
    "BuildingPolygon",
    "PlacementConfig",
    "WaterFilterConfig",
    "PlacementResult",
    "shoelace_area",
    "point_in_polygon",
    "rasterize_polygon",
    "polygons_from_geojson",
    "sample_placement",
    "is_water",
    "place_patch",
]


def shoelace_area(vertices: np.ndarray) -> float:
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _segments_properly_cross(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(p3, p4, p1), orient(p3, p4, p2)
    d3, d4 = orient(p1, p2, p3), orient(p1, p2, p4)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


@dataclass
class BuildingPolygon:
    """Simple polygon in pixel coordinates with its shoelace area."""

    vertices: np.ndarray
    area: float = 0.0

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2 or len(self.vertices) < 3:
            raise ValueError("polygon needs at least 3 (x, y) vertices")
        self.area = shoelace_area(self.vertices)
        if self.area <= 0.0:
            raise ValueError("polygon area must be positive")
        n = len(self.vertices)
        for i in range(n):
            for j in range(i + 1, n):
                if abs(i - j) in (1, n - 1):
                    continue  # adjacent edges share a vertex
                if _segments_properly_cross(
                    self.vertices[i],
                    self.vertices[(i + 1) % n],
                    self.vertices[j],
                    self.vertices[(j + 1) % n],
                ):
                    raise ValueError("polygon is self-intersecting")

    def bounds(self) -> tuple[float, float, float, float]:
        """(min_x, min_y, max_x, max_y)."""
        return (
            float(self.vertices[:, 0].min()),
            float(self.vertices[:, 1].min()),
            float(self.vertices[:, 0].max()),
            float(self.vertices[:, 1].max()),
        )


@dataclass(frozen=True)
class PlacementConfig:
    patch_height: int
    patch_width: int
    max_coverage: float = 0.5
    max_attempts: int = 100

    def __post_init__(self):
        if not 0.0 < self.max_coverage <= 1.0:
            raise ValueError("max_coverage must be in (0, 1]")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be positive")
        if self.patch_height < 1 or self.patch_width < 1:
            raise ValueError("patch dims must be positive")


@dataclass(frozen=True)
class WaterFilterConfig:
    area_ratio: float = 0.5
    corner_window: int = 8
    corner_density: float = 0.02
    edge_magnitude: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.area_ratio < 1.0:
            raise ValueError("area_ratio must be in (0, 1)")


def point_in_polygon(x: float, y: float, vertices: np.ndarray) -> bool:
    """Even-odd ray cast."""
    inside = False
    n = len(vertices)
    j = n - 1
    for i in range(n):
        x1, y1 = vertices[j]
        x2, y2 = vertices[i]
        if (y1 <= y) != (y2 <= y):
            xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < xint:
                inside = not inside
        j = i
    return inside


def rasterize_polygon(polygon: BuildingPolygon, height: int, width: int) -> np.ndarray:
    """Boolean mask of pixels whose centers fall inside the polygon."""
    px = np.arange(width) + 0.5
    py = np.arange(height) + 0.5
    gx, gy = np.meshgrid(px, py)
    inside = np.zeros((height, width), dtype=bool)
    verts = polygon.vertices
    n = len(verts)
    j = n - 1
    for i in range(n):
        x1, y1 = verts[j]
        x2, y2 = verts[i]
        crosses = (y1 <= gy) != (y2 <= gy)
        if y1 != y2:
            xint = x1 + (gy - y1) * (x2 - x1) / (y2 - y1)
            inside ^= crosses & (gx < xint)
        j = i
    return inside


def polygons_from_geojson(source) -> list[BuildingPolygon]:
    """Parse a GeoJSON FeatureCollection of pixel-space Polygons.

    Only the exterior ring is accepted; interior rings (holes) are rejected.
    Degenerate zero-area rings are skipped.
    """
    if isinstance(source, (str, Path)):
        obj = json.loads(Path(source).read_text())
    else:
        obj = source
    if obj.get("type") != "FeatureCollection":
        raise ValueError(f"expected a FeatureCollection, got {obj.get('type')!r}")
    polygons = []
    for feature in obj.get("features", []):
        geometry = feature.get("geometry") or {}
        if geometry.get("type") != "Polygon":
            raise ValueError(f"unsupported geometry type {geometry.get('type')!r}")
        rings = geometry.get("coordinates", [])
        if len(rings) > 1:
            raise ValueError("polygons with interior rings (holes) are not supported")
        if not rings:
            continue
        ring = np.asarray(rings[0], dtype=np.float64)
        if len(ring) >= 2 and np.array_equal(ring[0], ring[-1]):
            ring = ring[:-1]
        if len(ring) < 3 or shoelace_area(ring) <= 0.0:
            continue
        polygons.append(BuildingPolygon(vertices=ring))
    return polygons


def _footprint_boundary_inside(polygon: BuildingPolygon, row: int, col: int, h: int, w: int) -> bool:
    verts = polygon.vertices
    top, bottom = row, row + h - 1
    left, right = col, col + w - 1
    for c in range(left, right + 1):
        if not point_in_polygon(c + 0.5, top + 0.5, verts):
            return False
        if not point_in_polygon(c + 0.5, bottom + 0.5, verts):
            return False
    for r in range(top + 1, bottom):
        if not point_in_polygon(left + 0.5, r + 0.5, verts):
            return False
        if not point_in_polygon(right + 0.5, r + 0.5, verts):
            return False
    return True


def sample_placement(
    polygon: BuildingPolygon, cfg: PlacementConfig, seed
) -> tuple[int, int] | None:
    """Rejection-sample a (row, col) top-left placement fully inside the polygon.

    For a simple polygon, a rectangle whose boundary pixels are all inside is
    entirely inside, so corner + boundary-pixel tests suffice. Returns None
    (no-fit) when the coverage cap is violated or attempts are exhausted.
    """
    patch_area = cfg.patch_height * cfg.patch_width
    if patch_area > cfg.max_coverage * polygon.area:
        return None
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    min_x, min_y, max_x, max_y = polygon.bounds()
    row_lo, row_hi = int(np.floor(min_y)), int(np.ceil(max_y)) - cfg.patch_height
    col_lo, col_hi = int(np.floor(min_x)), int(np.ceil(max_x)) - cfg.patch_width
    if row_hi < row_lo or col_hi < col_lo:
        return None
    for _ in range(cfg.max_attempts):
        row = int(rng.integers(row_lo, row_hi + 1))
        col = int(rng.integers(col_lo, col_hi + 1))
        if _footprint_boundary_inside(polygon, row, col, cfg.patch_height, cfg.patch_width):
            return row, col
    return None


def is_water(tile: ImageTile, seg_mask: np.ndarray | None, cfg: WaterFilterConfig = WaterFilterConfig()) -> bool:
    """Water if the mask fraction exceeds the ratio, or if all four corner
    windows are edge-free (flat open water gives featureless corners)."""
    if seg_mask is not None:
        seg_mask = np.asarray(seg_mask)
        if seg_mask.shape[:2] != (tile.height, tile.width):
            raise ValueError("segmentation mask does not match tile dimensions")
        if float((seg_mask > 0).mean()) > cfg.area_ratio:
            return True
    gray = to_grayscale(tile.pixels)
    gx = correlate_taps(gray, SOBEL_X)
    gy = correlate_taps(gray, SOBEL_Y)
    edge = np.sqrt(gx * gx + gy * gy) > cfg.edge_magnitude
    k = cfg.corner_window
    corners = [edge[:k, :k], edge[:k, -k:], edge[-k:, :k], edge[-k:, -k:]]
    return all(float(c.mean()) < cfg.corner_density for c in corners)


@dataclass
class PlacementResult:
    tile: ImageTile | None
    skipped: str | None = None
    position: tuple[int, int] | None = None
    polygon_index: int | None = None

    @property
    def placed(self) -> bool:
        return self.tile is not None


def place_patch(
    tile: ImageTile,
    patch: np.ndarray,
    polygons: list[BuildingPolygon] | None,
    blend_cfg: BlendConfig,
    placement_cfg: PlacementConfig,
    mode: str,
    seed,
    water_cfg: WaterFilterConfig | None = None,
) -> PlacementResult:
    """Blend ``patch`` onto ``tile`` under the placement protocol.

    on_building: uniformly pick a polygon, sample a contained placement.
    off_building: uniform position fully inside the tile; tile label must be
    no_building. Water tiles are always skipped. Skips are signals, not
    errors; the reason lands in the poisoning manifest.
    """
    if mode not in ("on_building", "off_building"):
        raise ValueError(f"unknown placement mode '{mode}'")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if is_water(tile, tile.water_mask, water_cfg or WaterFilterConfig()):
        return PlacementResult(None, skipped="water")
    if mode == "off_building":
        if tile.label != LABEL_NO_BUILDING:
            return PlacementResult(None, skipped="label_mismatch")
        row_hi = tile.height - placement_cfg.patch_height
        col_hi = tile.width - placement_cfg.patch_width
        if row_hi < 0 or col_hi < 0:
            return PlacementResult(None, skipped="no_fit")
        row = int(rng.integers(0, row_hi + 1))
        col = int(rng.integers(0, col_hi + 1))
        return PlacementResult(blend(tile, patch, (row, col), blend_cfg), position=(row, col))
    if not polygons:
        return PlacementResult(None, skipped="no_polygons")
    index = int(rng.integers(0, len(polygons)))
    position = sample_placement(polygons[index], placement_cfg, rng)
    if position is None:
        return PlacementResult(None, skipped="no_fit", polygon_index=index)
    row, col = position
    if row < 0 or col < 0 or row + placement_cfg.patch_height > tile.height or col + placement_cfg.patch_width > tile.width:
        return PlacementResult(None, skipped="no_fit", polygon_index=index)
    return PlacementResult(
        blend(tile, patch, position, blend_cfg), position=position, polygon_index=index
    )
