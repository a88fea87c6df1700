"""Tile corpora: synthetic generation, GeoJSON/PNG ingestion, IDX parsing.

The synthetic generator is the desk-scale stand-in for satellite imagery:
every building tile carries exact ground-truth polygons (the roof is painted
by rasterizing the polygon, so mask and pixels agree by construction) and
every water tile carries an exact mask.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageops import ImageTile, load_png, preprocess, save_png
from .placement import BuildingPolygon, polygons_from_geojson, rasterize_polygon

__all__ = [
    "Palette",
    "PALETTES",
    "SynthConfig",
    "TileCorpus",
    "IdxFormatError",
    "synth_corpus",
    "split",
    "extract_labels",
    "load_idx",
    "write_idx",
    "save_corpus",
    "load_corpus",
    "corpus_arrays",
]


@dataclass(frozen=True)
class Palette:
    """Background color/texture family for one synthetic candidate region."""

    name: str
    base_low: tuple[float, float, float]
    base_high: tuple[float, float, float]
    texture: float
    roof_low: float
    roof_high: float


PALETTES = {
    "verdant": Palette("verdant", (0.10, 0.35, 0.10), (0.20, 0.50, 0.20), 0.060, 0.55, 0.80),
    "urban": Palette("urban", (0.35, 0.35, 0.40), (0.45, 0.45, 0.52), 0.040, 0.65, 0.92),
    "desert": Palette("desert", (0.55, 0.45, 0.25), (0.70, 0.60, 0.40), 0.050, 0.12, 0.40),
}


@dataclass(frozen=True)
class SynthConfig:
    count: int = 200
    tile_size: int = 64
    building_probability: float = 0.5
    building_count_range: tuple[int, int] = (1, 3)
    rect_size_range: tuple[int, int] | None = None  # default scales with tile size
    palette: str = "urban"
    water_probability: float = 0.0
    seed: int = 0

    def rect_range(self) -> tuple[int, int]:
        if self.rect_size_range is not None:
            return self.rect_size_range
        return max(6, self.tile_size // 6), max(8, self.tile_size // 3)


@dataclass
class TileCorpus:
    tiles: list[ImageTile]
    train_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    test_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    provenance: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.train_indices.size == 0 and self.test_indices.size == 0:
            self.train_indices = np.arange(len(self.tiles))

    def labels(self) -> np.ndarray:
        return np.array([t.label for t in self.tiles], dtype=int)

    def train_tiles(self) -> list[ImageTile]:
        return [self.tiles[i] for i in self.train_indices]

    def test_tiles(self) -> list[ImageTile]:
        return [self.tiles[i] for i in self.test_indices]


def corpus_arrays(tiles: list[ImageTile], size: int | None = None, normalize: bool = False):
    """Stack tiles into (N, C, H, W) float arrays plus an int label vector."""
    if not tiles:
        channels = 3
        s = size or 0
        return np.zeros((0, channels, s, s)), np.zeros(0, dtype=int)
    target = size or tiles[0].height
    images = np.stack([preprocess(t, size=target, normalize=normalize) for t in tiles])
    labels = np.array([t.label for t in tiles], dtype=int)
    return images, labels


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

WATER_COLOR = np.array([0.08, 0.18, 0.42])


def _synth_tile(cfg: SynthConfig, index: int) -> ImageTile:
    rng = np.random.default_rng([cfg.seed, index])
    palette = PALETTES[cfg.palette] if isinstance(cfg.palette, str) else cfg.palette
    size = cfg.tile_size
    geo_id = f"{palette.name}-{cfg.seed}-{index:05d}"

    if rng.random() < cfg.water_probability:
        shade = WATER_COLOR + rng.uniform(-0.02, 0.02, size=3)
        pixels = np.clip(shade[None, None, :] + rng.normal(0, 0.004, (size, size, 3)), 0, 1)
        return ImageTile(
            pixels=pixels, label=0, water_mask=np.ones((size, size)), geo_id=geo_id
        )

    base = rng.uniform(palette.base_low, palette.base_high)
    pixels = np.clip(base[None, None, :] + rng.normal(0, palette.texture, (size, size, 3)), 0, 1)

    polygons: list[BuildingPolygon] = []
    if rng.random() < cfg.building_probability:
        lo, hi = cfg.building_count_range
        for _ in range(int(rng.integers(lo, hi + 1))):
            poly = _sample_building(rng, size, cfg.rect_range())
            if poly is None:
                continue
            mask = rasterize_polygon(poly, size, size)
            if not mask.any():
                continue
            roof = rng.uniform(palette.roof_low, palette.roof_high)
            color = np.clip(roof + rng.uniform(-0.03, 0.03, size=3), 0, 1)
            noise = rng.normal(0, 0.02, (size, size, 3))
            painted = np.clip(color[None, None, :] + noise, 0, 1)
            pixels = np.where(mask[:, :, None], painted, pixels)
            polygons.append(poly)

    label = 1 if polygons else 0
    return ImageTile(
        pixels=pixels, label=label, polygons=polygons or None, geo_id=geo_id
    )


def _sample_building(rng: np.random.Generator, size: int, rect_range) -> BuildingPolygon | None:
    lo, hi = rect_range
    w = float(rng.uniform(lo, hi))
    h = float(rng.uniform(lo, hi))
    angle = float(rng.uniform(0, np.pi)) if rng.random() < 0.5 else 0.0
    half_diag = 0.5 * np.hypot(w, h)
    margin = half_diag + 1.0
    if 2 * margin >= size:
        return None
    cx = float(rng.uniform(margin, size - margin))
    cy = float(rng.uniform(margin, size - margin))
    c, s = np.cos(angle), np.sin(angle)
    corners = np.array([[-w / 2, -h / 2], [w / 2, -h / 2], [w / 2, h / 2], [-w / 2, h / 2]])
    rotated = corners @ np.array([[c, -s], [s, c]]).T + [cx, cy]
    return BuildingPolygon(vertices=rotated)


def synth_corpus(cfg: SynthConfig, test_fraction: float = 0.25) -> TileCorpus:
    tiles = [_synth_tile(cfg, i) for i in range(cfg.count)]
    corpus = TileCorpus(tiles=tiles, provenance=f"synth:{cfg.palette}:{cfg.seed}")
    return split(corpus, fraction=test_fraction, seed=cfg.seed)


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


def split(corpus: TileCorpus, fraction: float = 0.25, seed: int = 0) -> TileCorpus:
    """Stratified held-out split: seeded shuffle, per-class largest-remainder
    allocation so the total test count is exactly round(fraction * N)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    labels = corpus.labels()
    classes = sorted(set(labels.tolist()))
    for cls in classes:
        if int((labels == cls).sum()) < 2:
            raise ValueError(f"class {cls} has fewer than 2 tiles")
    rng = np.random.default_rng([seed, len(labels), 0x5B])
    target_total = int(round(fraction * len(labels)))
    shares = {cls: fraction * int((labels == cls).sum()) for cls in classes}
    counts = {cls: int(np.floor(s)) for cls, s in shares.items()}
    leftover = target_total - sum(counts.values())
    for cls in sorted(classes, key=lambda c: (-(shares[c] - np.floor(shares[c])), c)):
        if leftover <= 0:
            break
        counts[cls] += 1
        leftover -= 1
    test_idx: list[int] = []
    for cls in classes:
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(len(members))]
        test_idx.extend(members[: counts[cls]].tolist())
    test = np.array(sorted(test_idx), dtype=int)
    train = np.array(sorted(set(range(len(labels))) - set(test_idx)), dtype=int)
    return TileCorpus(
        tiles=corpus.tiles,
        train_indices=train,
        test_indices=test,
        provenance=corpus.provenance,
        meta=dict(corpus.meta),
    )


# ---------------------------------------------------------------------------
# Directory ingestion (tiles/*.png + labels/*.geojson + optional water/*.png)
# ---------------------------------------------------------------------------


def extract_labels(geojson_dir, tiles_dir, water_dir=None) -> TileCorpus:
    """Pair tile PNGs with GeoJSON building polygons by filename stem.

    A tile is labeled building iff its feature collection holds at least one
    positive-area polygon intersecting the tile. Orphan tiles (no matching
    GeoJSON) are skipped with a warning and counted in corpus meta.
    """
    geojson_dir, tiles_dir = Path(geojson_dir), Path(tiles_dir)
    tiles: list[ImageTile] = []
    orphans = 0
    for tile_path in sorted(tiles_dir.glob("*.png")):
        label_path = geojson_dir / f"{tile_path.stem}.geojson"
        if not label_path.exists():
            warnings.warn(f"no GeoJSON for tile {tile_path.name}; skipping")
            orphans += 1
            continue
        pixels, bit_depth = load_png(tile_path)
        polygons = polygons_from_geojson(label_path)
        h, w = pixels.shape[:2]
        polygons = [p for p in polygons if _intersects_tile(p, h, w)]
        water_mask = None
        if water_dir is not None:
            mask_path = Path(water_dir) / tile_path.name
            if mask_path.exists():
                mask_pixels, _ = load_png(mask_path)
                water_mask = (mask_pixels[:, :, 0] > 0).astype(np.float64)
        tiles.append(
            ImageTile(
                pixels=pixels,
                label=1 if polygons else 0,
                polygons=polygons or None,
                water_mask=water_mask,
                bit_depth=bit_depth,
                geo_id=tile_path.stem,
            )
        )
    return TileCorpus(tiles=tiles, provenance=f"dir:{tiles_dir}", meta={"orphan_tiles": orphans})


def _intersects_tile(polygon: BuildingPolygon, height: int, width: int) -> bool:
    min_x, min_y, max_x, max_y = polygon.bounds()
    return max_x > 0 and max_y > 0 and min_x < width and min_y < height


# ---------------------------------------------------------------------------
# IDX (classic digit-dataset byte format)
# ---------------------------------------------------------------------------

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


def _read_exact(blob: bytes, offset: int, count: int, path) -> bytes:
    if offset + count > len(blob):
        raise IdxFormatError(
            f"{path}: truncated at offset {offset} (needed {count} bytes, have {len(blob) - offset})"
        )
    return blob[offset : offset + count]


def load_idx(images_path, labels_path, parity_relabel: bool = False) -> TileCorpus:
    """Parse big-endian IDX image/label files into 28x28 grayscale tiles.

    ``parity_relabel`` maps digit labels to digit parity (odd = 1) for binary
    experiments.
    """
    images_blob = Path(images_path).read_bytes()
    labels_blob = Path(labels_path).read_bytes()
    magic, n_images, rows, cols = struct.unpack(">IIII", _read_exact(images_blob, 0, 16, images_path))
    if magic != IDX_IMAGES_MAGIC:
        raise IdxFormatError(f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    lmagic, n_labels = struct.unpack(">II", _read_exact(labels_blob, 0, 8, labels_path))
    if lmagic != IDX_LABELS_MAGIC:
        raise IdxFormatError(f"{labels_path}: bad magic 0x{lmagic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if n_images != n_labels:
        raise IdxFormatError(f"image count {n_images} != label count {n_labels}")
    payload = _read_exact(images_blob, 16, n_images * rows * cols, images_path)
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(n_images, rows, cols)
    raw_labels = np.frombuffer(_read_exact(labels_blob, 8, n_labels, labels_path), dtype=np.uint8)
    labels = raw_labels % 2 if parity_relabel else raw_labels
    tiles = [
        ImageTile(
            pixels=pixels[i].astype(np.float64)[:, :, None] / 255.0,
            label=int(labels[i]),
            geo_id=f"idx-{i:05d}",
        )
        for i in range(n_images)
    ]
    return TileCorpus(tiles=tiles, provenance=f"idx:{images_path}")


def write_idx(images_path, labels_path, tiles: list[ImageTile]) -> None:
    rows = tiles[0].height if tiles else 28
    cols = tiles[0].width if tiles else 28
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, len(tiles), rows, cols))
        for tile in tiles:
            quant = np.rint(tile.pixels[:, :, 0] * 255.0).astype(np.uint8)
            fh.write(quant.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(tiles)))
        fh.write(bytes(int(t.label) & 0xFF for t in tiles))


# ---------------------------------------------------------------------------
# Corpus directory round-trip with manifest
# ---------------------------------------------------------------------------


def save_corpus(corpus: TileCorpus, out_dir) -> Path:
    """Write tiles/masks/polygons plus a manifest with per-file checksums."""
    out_dir = Path(out_dir)
    (out_dir / "tiles").mkdir(parents=True, exist_ok=True)
    entries = []
    test_set = set(corpus.test_indices.tolist())
    for i, tile in enumerate(corpus.tiles):
        name = f"{i:05d}.png"
        tile_path = out_dir / "tiles" / name
        save_png(tile_path, tile.pixels, bit_depth=tile.bit_depth)
        entry = {
            "id": tile.geo_id or f"{i:05d}",
            "file": f"tiles/{name}",
            "label": int(tile.label),
            "split": "test" if i in test_set else "train",
            "sha256": hashlib.sha256(tile_path.read_bytes()).hexdigest(),
        }
        if tile.water_mask is not None:
            (out_dir / "water").mkdir(exist_ok=True)
            save_png(out_dir / "water" / name, tile.water_mask.astype(np.float64))
            entry["water_mask"] = f"water/{name}"
        if tile.polygons:
            (out_dir / "labels").mkdir(exist_ok=True)
            collection = {
                "type": "FeatureCollection",
                "features": [
                    {
                        "type": "Feature",
                        "geometry": {
                            "type": "Polygon",
                            "coordinates": [
                                [[float(x), float(y)] for x, y in p.vertices]
                                + [[float(p.vertices[0][0]), float(p.vertices[0][1])]]
                            ],
                        },
                        "properties": {},
                    }
                    for p in tile.polygons
                ],
            }
            (out_dir / "labels" / f"{i:05d}.geojson").write_text(json.dumps(collection))
            entry["polygons"] = f"labels/{i:05d}.geojson"
        entries.append(entry)
    manifest = {"provenance": corpus.provenance, "tiles": entries, "meta": corpus.meta}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out_dir / "manifest.json"


def load_corpus(corpus_dir) -> TileCorpus:
    corpus_dir = Path(corpus_dir)
    manifest = json.loads((corpus_dir / "manifest.json").read_text())
    tiles = []
    train_idx, test_idx = [], []
    for i, entry in enumerate(manifest["tiles"]):
        pixels, bit_depth = load_png(corpus_dir / entry["file"])
        water_mask = None
        if "water_mask" in entry:
            mask_pixels, _ = load_png(corpus_dir / entry["water_mask"])
            water_mask = (mask_pixels[:, :, 0] > 0).astype(np.float64)
        polygons = None
        if "polygons" in entry:
            polygons = polygons_from_geojson(corpus_dir / entry["polygons"]) or None
        tiles.append(
            ImageTile(
                pixels=pixels,
                label=entry["label"],
                polygons=polygons,
                water_mask=water_mask,
                bit_depth=bit_depth,
                geo_id=entry["id"],
            )
        )
        (test_idx if entry["split"] == "test" else train_idx).append(i)
    return TileCorpus(
        tiles=tiles,
        train_indices=np.array(train_idx, dtype=int),
        test_indices=np.array(test_idx, dtype=int),
        provenance=manifest.get("provenance", ""),
        meta=manifest.get("meta", {}),
    )
