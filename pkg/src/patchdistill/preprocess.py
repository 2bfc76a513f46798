"""Histogram equalisation, exact non-overlapping patch tiling and thumbnails."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import kernels
from .errors import ConfigError, GeometryError

MODES = ("none", "regular_he", "clahe")


@dataclass(frozen=True)
class PreprocessConfig:
    mode: str = "clahe"
    clip_limit: float = 2.0
    tile_grid: tuple[int, int] = (8, 8)
    thumbnail_size: int = 64

    def __post_init__(self):
        object.__setattr__(self, "tile_grid", tuple(int(v) for v in self.tile_grid))
        problems = []
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.clip_limit > 0:
            problems.append(f"clip_limit must be > 0, got {self.clip_limit}")
        if len(self.tile_grid) != 2 or min(self.tile_grid) < 1:
            problems.append(f"tile_grid must be two integers >= 1, got {self.tile_grid}")
        if self.thumbnail_size < 1:
            problems.append(f"thumbnail_size must be >= 1, got {self.thumbnail_size}")
        if problems:
            raise ConfigError(problems)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:12]


@dataclass(frozen=True)
class PatchGrid:
    """Exact tiling of an image into ``rows x cols`` square patches."""

    patch_size: int
    rows: int
    cols: int

    @property
    def m(self) -> int:
        return self.rows * self.cols

    @property
    def height(self) -> int:
        return self.rows * self.patch_size

    @property
    def width(self) -> int:
        return self.cols * self.patch_size

    @classmethod
    def for_image(cls, height: int, width: int, patch_size: int) -> "PatchGrid":
        if patch_size < 1:
            raise GeometryError(f"patch size must be positive, got {patch_size}")
        if height % patch_size or width % patch_size or height == 0 or width == 0:
            raise GeometryError(
                f"{width}x{height} image does not tile exactly into {patch_size}px patches"
            )
        return cls(patch_size, height // patch_size, width // patch_size)

    def position(self, t: int) -> tuple[int, int]:
        """Row-major (row, col) of patch index ``t``."""
        return divmod(t, self.cols)


@dataclass
class PatchSet:
    image_id: str
    patches: np.ndarray  # (m, S, S) or (m, S, S, C)
    image_label: int
    working_labels: np.ndarray | None = None
    scores: np.ndarray | None = None
    grid: PatchGrid | None = field(default=None, repr=False)

    @property
    def m(self) -> int:
        return int(self.patches.shape[0])


# --------------------------------------------------------------------------
# Equalisation
# --------------------------------------------------------------------------


def _luminance(image: np.ndarray) -> np.ndarray:
    rgb = image[..., :3].astype(np.float64)
    lum = rgb @ np.array([0.299, 0.587, 0.114])
    return np.clip(np.rint(lum), 0, 255).astype(np.uint8)


def histogram_equalize(gray: np.ndarray) -> np.ndarray:
    """Global equalisation. The lowest occupied level maps to 0."""
    hist = np.bincount(gray.ravel(), minlength=256)
    first = int(np.flatnonzero(hist)[0])
    total = gray.size
    if hist[first] == total:
        return np.full_like(gray, first)
    scale = np.float32(255.0) / np.float32(total - hist[first])
    cdf = np.cumsum(hist).astype(np.int64) - hist[first]
    lut = np.clip(np.rint(cdf.astype(np.float32) * scale), 0, 255).astype(np.uint8)
    lut[:first] = 0
    return lut[gray]


def clahe(gray: np.ndarray, clip_limit: float = 2.0, tile_grid: tuple[int, int] = (8, 8)) -> np.ndarray:
    """Contrast limited adaptive histogram equalisation of an 8-bit image.

    ``tile_grid`` is ``(tiles_x, tiles_y)``. The clip limit is relative: a bin
    is capped at ``clip_limit * tile_area / 256`` counts (at least 1) and the
    excess is spread evenly over all bins. Each pixel's output blends the
    mappings of the four nearest tile centres bilinearly. When the image does
    not split evenly, tiles are measured on a reflect-padded copy.
    """
    tiles_x, tiles_y = tile_grid
    h, w = gray.shape
    if h % tiles_y or w % tiles_x:
        padded = np.pad(gray, ((0, tiles_y - h % tiles_y), (0, tiles_x - w % tiles_x)), mode="reflect")
    else:
        padded = gray
    padded = np.ascontiguousarray(padded)
    tile_h = padded.shape[0] // tiles_y
    tile_w = padded.shape[1] // tiles_x
    clip_count = max(int(clip_limit * tile_h * tile_w / 256), 1)
    luts = kernels.clahe_luts(padded, tiles_y, tiles_x, clip_count)
    return kernels.clahe_interpolate(np.ascontiguousarray(gray), luts, tile_h, tile_w)


def equalize(image: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    if config.mode == "none":
        return image.copy()
    if image.ndim == 3:
        lum = _luminance(image)
        eq = equalize(lum, config).astype(np.float64)
        gain = eq / np.maximum(lum.astype(np.float64), 1.0)
        out = image[..., :3].astype(np.float64) * gain[..., None]
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    if config.mode == "regular_he":
        return histogram_equalize(image)
    return clahe(image, config.clip_limit, config.tile_grid)


def cached_equalize(image: np.ndarray, config: PreprocessConfig, source: Path | None = None) -> np.ndarray:
    """``equalize`` with an optional PNG cache next to ``source``.

    The cache file is ``<stem>.<config digest>.clahe.png``.
    """
    if source is None or config.mode == "none":
        return equalize(image, config)
    source = Path(source)
    stem = source.name[: -len(".png")] if source.name.endswith(".png") else source.stem
    cache = source.with_name(f"{stem}.{config.digest()}.clahe.png")
    if cache.exists():
        return np.asarray(Image.open(cache))
    out = equalize(image, config)
    Image.fromarray(out).save(cache)
    return out


# --------------------------------------------------------------------------
# Tiling
# --------------------------------------------------------------------------


def center_crop_to_tiling(image: np.ndarray, patch_size: int) -> np.ndarray:
    h, w = image.shape[:2]
    nh, nw = (h // patch_size) * patch_size, (w // patch_size) * patch_size
    if nh == 0 or nw == 0:
        raise GeometryError(f"{w}x{h} image is smaller than one {patch_size}px patch")
    top, left = (h - nh) // 2, (w - nw) // 2
    return image[top : top + nh, left : left + nw]


def partition(image: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Split ``image`` into ``grid.m`` patches, row-major."""
    h, w = image.shape[:2]
    if (h, w) != (grid.height, grid.width):
        raise GeometryError(f"image is {w}x{h} but grid covers {grid.width}x{grid.height}")
    s = grid.patch_size
    tail = image.shape[2:]
    blocks = image.reshape(grid.rows, s, grid.cols, s, *tail).swapaxes(1, 2)
    return np.ascontiguousarray(blocks.reshape(grid.m, s, s, *tail))


def reassemble(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    s = grid.patch_size
    tail = patches.shape[3:]
    blocks = patches.reshape(grid.rows, grid.cols, s, s, *tail).swapaxes(1, 2)
    return np.ascontiguousarray(blocks.reshape(grid.height, grid.width, *tail))


def make_patch_set(image_id: str, image: np.ndarray, label: int, patch_size: int) -> PatchSet:
    grid = PatchGrid.for_image(image.shape[0], image.shape[1], patch_size)
    return PatchSet(image_id, partition(image, grid), int(label), grid=grid)


def make_thumbnail(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear (antialiased) resize of the whole image onto a ``size x size`` square."""
    if size < 1:
        raise ConfigError([f"thumbnail size must be >= 1, got {size}"])
    if image.shape[0] == size and image.shape[1] == size:
        return image.copy()
    return np.asarray(Image.fromarray(image).resize((size, size), Image.BILINEAR))
