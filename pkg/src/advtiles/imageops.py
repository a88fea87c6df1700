"""Deterministic pixel math: Canny edges, patch blending, resize, normalization.

The Canny stages accumulate filter taps in a fixed row-major order so the
pipeline is bitwise reproducible against a straight-line reference.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "ImageTile",
    "BlendConfig",
    "CannyConfig",
    "IMAGENET_MEAN",
    "IMAGENET_STD",
    "GRAY_MEAN",
    "GRAY_STD",
    "canny",
    "blend",
    "preprocess",
    "denormalize",
    "resize_bilinear",
    "to_float",
    "save_png",
    "load_png",
]

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])
GRAY_MEAN = np.array([0.1307])
GRAY_STD = np.array([0.3081])

LABEL_NO_BUILDING = 0
LABEL_BUILDING = 1


@dataclass
class ImageTile:
    """H x W x C pixels in [0, 1] plus label, polygons, and water metadata."""

    pixels: np.ndarray
    label: int | None = None
    polygons: list | None = None
    water_mask: np.ndarray | None = None
    bit_depth: int = 8
    geo_id: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[:, :, None]
        if self.pixels.ndim != 3 or self.pixels.shape[2] not in (1, 3):
            raise ValueError(f"tile pixels must be HxWx{{1,3}}, got {self.pixels.shape}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("tile pixels must lie in [0, 1]")
        if self.bit_depth not in (8, 16):
            raise ValueError("bit depth must be 8 or 16")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def replace_pixels(self, pixels: np.ndarray) -> "ImageTile":
        return ImageTile(
            pixels=pixels,
            label=self.label,
            polygons=self.polygons,
            water_mask=self.water_mask,
            bit_depth=self.bit_depth,
            geo_id=self.geo_id,
        )


@dataclass(frozen=True)
class BlendConfig:
    mode: str = "direct"  # direct | alpha | soft_light
    alpha: float | None = None

    def __post_init__(self):
        if self.mode not in ("direct", "alpha", "soft_light"):
            raise ValueError(f"unknown blend mode '{self.mode}'")
        if self.mode == "alpha":
            if self.alpha is None or not 0.0 <= self.alpha <= 1.0:
                raise ValueError("alpha mode requires alpha in [0, 1]")
        elif self.alpha is not None:
            raise ValueError(f"alpha is only valid for alpha mode, not '{self.mode}'")


@dataclass(frozen=True)
class CannyConfig:
    sigma: float = 1.4
    low: float = 0.1
    high: float = 0.3

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        # low == high == 1.0 is the documented information-free degenerate case
        if not 0.0 < self.low <= self.high <= 1.0:
            raise ValueError("thresholds must satisfy 0 < low <= high <= 1")


# ---------------------------------------------------------------------------
# Canny edge transform
# ---------------------------------------------------------------------------

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = np.array([[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]])

# per quantized direction: the strictly-compared neighbor, then the ties-allowed one
NMS_NEIGHBORS = {
    0: ((0, -1), (0, 1)),
    1: ((-1, 1), (1, -1)),
    2: ((-1, 0), (1, 0)),
    3: ((-1, -1), (1, 1)),
}


def gaussian_kernel5(sigma: float) -> np.ndarray:
    grid = np.arange(5) - 2.0
    gy, gx = np.meshgrid(grid, grid, indexing="ij")
    k = np.exp(-(gx**2 + gy**2) / (2.0 * sigma**2))
    return k / k.sum()


def correlate_taps(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Reflect-padded correlation, taps accumulated in row-major order."""
    r = kernel.shape[0] // 2
    padded = np.pad(image, r, mode="reflect")
    h, w = image.shape
    acc = np.zeros((h, w))
    for u in range(kernel.shape[0]):
        for v in range(kernel.shape[1]):
            acc += kernel[u, v] * padded[u : u + h, v : v + w]
    return acc


def to_grayscale(pixels: np.ndarray) -> np.ndarray:
    if pixels.shape[2] == 1:
        return pixels[:, :, 0].copy()
    return 0.299 * pixels[:, :, 0] + 0.587 * pixels[:, :, 1] + 0.114 * pixels[:, :, 2]


def direction_bins(theta: np.ndarray) -> np.ndarray:
    angle = np.degrees(theta) % 180.0
    return (np.floor((angle + 22.5) / 45.0) % 4).astype(int)


def canny(tile: ImageTile, cfg: CannyConfig = CannyConfig()) -> ImageTile:
    """Binary edge map via blur, Sobel, NMS, double threshold, hysteresis.

    Output pixels are {0, 1}, replicated to the input channel count. A
    constant image yields an all-zero map.
    """
    gray = to_grayscale(tile.pixels)
    blurred = correlate_taps(gray, gaussian_kernel5(cfg.sigma))
    gx = correlate_taps(blurred, SOBEL_X)
    gy = correlate_taps(blurred, SOBEL_Y)
    mag = np.sqrt(gx * gx + gy * gy)
    peak = mag.max()
    h, w = gray.shape
    edges = np.zeros((h, w))
    if peak > 0.0:
        bins = direction_bins(np.arctan2(gy, gx))
        nms = np.zeros((h, w))
        for b, ((du1, dv1), (du2, dv2)) in NMS_NEIGHBORS.items():
            sel = np.zeros((h, w), dtype=bool)
            inner = bins[1 : h - 1, 1 : w - 1] == b
            center = mag[1 : h - 1, 1 : w - 1]
            prev = mag[1 + du1 : h - 1 + du1, 1 + dv1 : w - 1 + dv1]
            nxt = mag[1 + du2 : h - 1 + du2, 1 + dv2 : w - 1 + dv2]
            sel[1 : h - 1, 1 : w - 1] = inner & (center > prev) & (center >= nxt)
            nms[sel] = mag[sel]
        strong = nms > cfg.high * peak
        weak = nms > cfg.low * peak
        # hysteresis: grow strong seeds through weak pixels, 8-connected
        edges_bool = strong.copy()
        while True:
            grown = _dilate8(edges_bool) & weak
            merged = edges_bool | grown
            if merged.sum() == edges_bool.sum():
                break
            edges_bool = merged
        edges = edges_bool.astype(np.float64)
    out = np.repeat(edges[:, :, None], tile.channels, axis=2)
    return tile.replace_pixels(out)


def _dilate8(mask: np.ndarray) -> np.ndarray:
    padded = np.pad(mask, 1)
    out = np.zeros_like(mask)
    h, w = mask.shape
    for du in (0, 1, 2):
        for dv in (0, 1, 2):
            out |= padded[du : du + h, dv : dv + w]
    return out


# ---------------------------------------------------------------------------
# Blending
# ---------------------------------------------------------------------------


def blend(base: ImageTile, patch: np.ndarray, position: tuple[int, int], cfg: BlendConfig) -> ImageTile:
    """Composite ``patch`` onto ``base`` at (row, col); only the covered
    rectangle changes.

    direct: out = p; alpha: out = (1-a) b + a p; soft_light (Pegtop):
    out = (1-2p) b^2 + 2p b, which maps [0,1]x[0,1] into [0,1] with 0.5 as
    its neutral element.
    """
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim == 2:
        patch = patch[:, :, None]
    row, col = position
    ph, pw = patch.shape[:2]
    if row < 0 or col < 0 or row + ph > base.height or col + pw > base.width:
        raise ValueError(
            f"patch {ph}x{pw} at ({row}, {col}) exceeds base {base.height}x{base.width}"
        )
    if patch.shape[2] == 1 and base.channels == 3:
        patch = np.repeat(patch, 3, axis=2)
    if patch.shape[2] != base.channels:
        raise ValueError(f"patch has {patch.shape[2]} channels, base has {base.channels}")

    out = base.pixels.copy()
    region = out[row : row + ph, col : col + pw]
    if cfg.mode == "direct":
        blended = patch
    elif cfg.mode == "alpha":
        blended = (1.0 - cfg.alpha) * region + cfg.alpha * patch
    else:
        blended = (1.0 - 2.0 * patch) * region**2 + 2.0 * patch * region
    out[row : row + ph, col : col + pw] = np.clip(blended, 0.0, 1.0)
    return base.replace_pixels(out)


# ---------------------------------------------------------------------------
# Resize / flip / normalize / bit depth
# ---------------------------------------------------------------------------


def resize_bilinear(pixels: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of (H, W, C) to (size, size, C), half-pixel centers."""
    h, w, c = pixels.shape
    if h == size and w == size:
        return pixels.copy()

    def axis_coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    r0, r1, rf = axis_coords(h, size)
    c0, c1, cf = axis_coords(w, size)
    top = pixels[r0][:, c0] * (1 - cf[None, :, None]) + pixels[r0][:, c1] * cf[None, :, None]
    bot = pixels[r1][:, c0] * (1 - cf[None, :, None]) + pixels[r1][:, c1] * cf[None, :, None]
    return top * (1 - rf[:, None, None]) + bot * rf[:, None, None]


def preprocess(
    tile: ImageTile,
    size: int = 224,
    flip_rng: np.random.Generator | None = None,
    normalize: bool = False,
) -> np.ndarray:
    """Resize, optional seeded horizontal flip (probability 0.5), optional
    per-channel normalization. Returns a C x size x size array."""
    pixels = resize_bilinear(tile.pixels, size)
    if flip_rng is not None and flip_rng.random() < 0.5:
        pixels = pixels[:, ::-1, :].copy()
    chw = np.ascontiguousarray(pixels.transpose(2, 0, 1))
    if normalize:
        mean, std = _norm_constants(chw.shape[0])
        chw = (chw - mean[:, None, None]) / std[:, None, None]
    return chw


def denormalize(chw: np.ndarray) -> np.ndarray:
    mean, std = _norm_constants(chw.shape[0])
    return chw * std[:, None, None] + mean[:, None, None]


def _norm_constants(channels: int) -> tuple[np.ndarray, np.ndarray]:
    if channels == 3:
        return IMAGENET_MEAN, IMAGENET_STD
    return GRAY_MEAN, GRAY_STD


def to_float(raw: np.ndarray, bit_depth: int) -> ImageTile:
    """Integer image to [0, 1] pixels: raw / (2^bit_depth - 1)."""
    raw = np.asarray(raw)
    if bit_depth not in (8, 16):
        raise ValueError("bit depth must be 8 or 16")
    if raw.dtype.kind not in "ui":
        raise ValueError(f"raw image must be integer, got {raw.dtype}")
    limit = 2**bit_depth
    if raw.size and (raw.min() < 0 or raw.max() >= limit):
        raise ValueError(f"raw values out of range for {bit_depth}-bit data")
    return ImageTile(pixels=raw.astype(np.float64) / (limit - 1), bit_depth=bit_depth)


# ---------------------------------------------------------------------------
# PNG I/O (8/16-bit grayscale and RGB, non-interlaced)
# ---------------------------------------------------------------------------
# Self-contained codec: common libraries silently truncate 16-bit RGB PNGs
# to 8 bits, which would break 16-bit ingestion fidelity.


def _png_chunk(tag: bytes, data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data))


def save_png(path, pixels: np.ndarray, bit_depth: int = 8) -> None:
    """Write [0, 1] float pixels (H, W) or (H, W, C) as a PNG."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    h, w, c = pixels.shape
    if c not in (1, 3):
        raise ValueError("PNG writer supports 1 or 3 channels")
    if bit_depth not in (8, 16):
        raise ValueError("bit depth must be 8 or 16")
    peak = 2**bit_depth - 1
    quant = np.clip(np.rint(pixels * peak), 0, peak)
    arr = quant.astype(">u1" if bit_depth == 8 else ">u2")
    color_type = 0 if c == 1 else 2
    raw = b"".join(b"\x00" + arr[i].tobytes() for i in range(h))
    blob = (
        b"\x89PNG\r\n\x1a\n"
        + _png_chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, bit_depth, color_type, 0, 0, 0))
        + _png_chunk(b"IDAT", zlib.compress(raw, 6))
        + _png_chunk(b"IEND", b"")
    )
    Path(path).write_bytes(blob)


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def load_png(path) -> tuple[np.ndarray, int]:
    """Read a PNG into ([0, 1] float (H, W, C), bit depth)."""
    blob = Path(path).read_bytes()
    if blob[:8] != b"\x89PNG\r\n\x1a\n":
        raise ValueError(f"not a PNG file: {path}")
    pos = 8
    header = None
    idat = bytearray()
    while pos < len(blob):
        (length,) = struct.unpack(">I", blob[pos : pos + 4])
        tag = blob[pos + 4 : pos + 8]
        data = blob[pos + 8 : pos + 8 + length]
        pos += 12 + length
        if tag == b"IHDR":
            header = struct.unpack(">IIBBBBB", data)
        elif tag == b"IDAT":
            idat.extend(data)
        elif tag == b"IEND":
            break
    if header is None:
        raise ValueError(f"PNG missing IHDR: {path}")
    w, h, bit_depth, color_type, compression, filt, interlace = header
    if bit_depth not in (8, 16) or color_type not in (0, 2) or interlace != 0:
        raise ValueError(
            f"unsupported PNG (depth={bit_depth}, color={color_type}, interlace={interlace})"
        )
    channels = 1 if color_type == 0 else 3
    bpp = channels * (bit_depth // 8)
    stride = w * bpp
    raw = zlib.decompress(bytes(idat))
    if len(raw) != h * (stride + 1):
        raise ValueError(f"corrupt PNG payload in {path}")
    out = np.zeros((h, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.uint8)
    for row in range(h):
        ftype = raw[row * (stride + 1)]
        line = np.frombuffer(raw, dtype=np.uint8, count=stride, offset=row * (stride + 1) + 1).copy()
        if ftype == 0:
            pass
        elif ftype == 1:
            for i in range(bpp, stride):
                line[i] = (line[i] + line[i - bpp]) & 0xFF
        elif ftype == 2:
            line = (line.astype(int) + prev).astype(np.uint8)
        elif ftype == 3:
            for i in range(stride):
                left = int(line[i - bpp]) if i >= bpp else 0
                line[i] = (int(line[i]) + (left + int(prev[i])) // 2) & 0xFF
        elif ftype == 4:
            for i in range(stride):
                left = int(line[i - bpp]) if i >= bpp else 0
                upleft = int(prev[i - bpp]) if i >= bpp else 0
                line[i] = (int(line[i]) + _paeth(left, int(prev[i]), upleft)) & 0xFF
        else:
            raise ValueError(f"unknown PNG filter type {ftype} in {path}")
        out[row] = line
        prev = line
    if bit_depth == 8:
        values = out.reshape(h, w, channels).astype(np.float64)
    else:
        values = out.reshape(h, w * channels, 2)
        values = (values[:, :, 0].astype(np.float64) * 256 + values[:, :, 1]).reshape(h, w, channels)
    return values / (2**bit_depth - 1), bit_depth
