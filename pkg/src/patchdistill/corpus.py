"""Image data: a seeded synthetic pavement corpus with hidden defect masks,
a TSV manifest reader/writer for external data, and the pixel-noise
corruption used by the robustness sweep.

Synthetic images are rendered one at a time from ``(seed, index)`` so any
image can be regenerated in isolation and generation parallelises trivially.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DataError, GeometryError
from .preprocess import PatchGrid

log = logging.getLogger(__name__)

MANIFEST_HEADER = ("id", "path", "label", "split")
MANIFEST_NAME = "manifest.tsv"
SIDECAR_NAME = "corpus.json"
SPLITS = ("train", "test")
DEFECT_STYLES = ("crack", "pothole", "repair")


@dataclass
class ImageRecord:
    id: str
    path: Path | None
    label: int
    split: str
    source: str = "synthetic"
    pixels: np.ndarray | None = field(default=None, repr=False, compare=False)

    def load(self) -> np.ndarray:
        if self.pixels is None:
            if self.path is None:
                raise DataError(f"record {self.id!r} has neither pixels nor a path")
            self.pixels = np.asarray(Image.open(self.path))
        return self.pixels

    @property
    def mask_path(self) -> Path | None:
        if self.path is None:
            return None
        return self.path.with_name(f"{self.id}.mask.png")

    def load_mask(self) -> np.ndarray | None:
        """Binary defect mask, or ``None`` when the record has no mask file."""
        mp = self.mask_path
        if mp is None or not mp.exists():
            return None
        return (np.asarray(Image.open(mp)) > 0).astype(np.uint8)


@dataclass
class CorpusManifest:
    records: list[ImageRecord]
    seed: int | None = None
    params: dict = field(default_factory=dict)
    root: Path | None = None

    def split(self, name: str) -> list[ImageRecord]:
        return [r for r in self.records if r.split == name]

    def record_set(self) -> set[tuple[str, str, int, str]]:
        return {(r.id, str(r.path), r.label, r.split) for r in self.records}

    def write(self, root: Path) -> Path:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        lines = ["\t".join(MANIFEST_HEADER)]
        for r in self.records:
            rel = Path(r.path).relative_to(root) if r.path is not None else Path(f"{r.id}.png")
            lines.append(f"{r.id}\t{rel.as_posix()}\t{r.label}\t{r.split}")
        path = root / MANIFEST_NAME
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        sidecar = {"seed": self.seed, "params": self.params}
        (root / SIDECAR_NAME).write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")
        self.root = root
        return path


@dataclass(frozen=True)
class GenerationSpec:
    n_train_pos: int = 200
    n_train_neg: int = 200
    n_test_pos: int = 200
    n_test_neg: int = 200
    width: int = 256
    height: int = 192
    patch_size: int = 64
    style_mix: dict = field(default_factory=lambda: {"crack": 0.6, "pothole": 0.2, "repair": 0.2})
    seed: int = 0
    channels: int = 1
    lane_marking_prob: float = 0.3
    stain_rate: float = 0.8
    min_defect_pixels: int = 25
    max_defects: int = 2

    def validate(self) -> None:
        problems = []
        for name in ("n_train_pos", "n_train_neg", "n_test_pos", "n_test_neg"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if self.channels not in (1, 3):
            problems.append("channels must be 1 or 3")
        unknown = set(self.style_mix) - set(DEFECT_STYLES)
        if unknown:
            problems.append(f"unknown defect styles {sorted(unknown)}")
        if not self.style_mix or sum(self.style_mix.values()) <= 0:
            problems.append("style_mix needs at least one positive weight")
        if self.max_defects < 1:
            problems.append("max_defects must be >= 1")
        if problems:
            raise ConfigError(problems)
        PatchGrid.for_image(self.height, self.width, self.patch_size)

    def plan(self) -> list[tuple[str, int, str]]:
        """``(id, label, split)`` for every image, in generation-index order."""
        out = []
        for split, npos, nneg in (
            ("train", self.n_train_pos, self.n_train_neg),
            ("test", self.n_test_pos, self.n_test_neg),
        ):
            labels = [1] * npos + [0] * nneg
            order = np.random.default_rng([self.seed, 0x5EED, SPLITS.index(split)]).permutation(len(labels))
            for j, idx in enumerate(order):
                out.append((f"{split}_{j:05d}", labels[idx], split))
        return out


# --------------------------------------------------------------------------
# Rendering
# --------------------------------------------------------------------------


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    xn, yn = xx / w - 0.5, yy / h - 0.5
    img = np.full((h, w), rng.uniform(95, 150))
    # uneven illumination: tilted plane plus a broad bright or dark spot
    img += rng.uniform(-45, 45) * xn + rng.uniform(-45, 45) * yn
    cx, cy, spread = rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(0.25, 0.7)
    img += rng.uniform(-35, 35) * np.exp(-((xn - cx) ** 2 + (yn - cy) ** 2) / (2 * spread**2))
    img += gaussian_filter(rng.normal(0, 1, (h, w)), 1.2) * rng.uniform(10, 18)
    img += rng.normal(0, 4, (h, w))
    stones = rng.random((h, w)) < 0.003
    img[stones] += rng.choice([-22.0, 22.0], size=int(stones.sum()))
    return img


def _lane_marking(rng: np.random.Generator, img: np.ndarray) -> None:
    h, w = img.shape
    width = int(rng.integers(10, 19))
    wear = gaussian_filter(rng.random((h, w)), 2.0) > 0.42
    band = np.zeros((h, w), dtype=bool)
    if rng.random() < 0.75:
        x0 = int(rng.integers(0, w - width))
        band[:, x0 : x0 + width] = True
    else:
        y0 = int(rng.integers(0, h - width))
        band[y0 : y0 + width, :] = True
    img[band & wear] += rng.uniform(55, 85)


def _stain(rng: np.random.Generator, img: np.ndarray) -> None:
    """Soft dark blotch (oil, damp patch): a distractor, not a defect."""
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    cx, cy, sd = rng.uniform(0, w), rng.uniform(0, h), rng.uniform(8, 20)
    img -= rng.uniform(15, 30) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sd**2))


def _draw_crack(rng, draw: ImageDraw.ImageDraw, h: int, w: int) -> None:
    x, y = rng.uniform(0.1 * w, 0.9 * w), rng.uniform(0.1 * h, 0.9 * h)
    angle = rng.uniform(0, 2 * math.pi)
    pts = [(x, y)]
    for _ in range(int(rng.integers(5, 13))):
        angle += rng.normal(0, 0.45)
        step = rng.uniform(6, 14)
        x = float(np.clip(x + step * math.cos(angle), 0, w - 1))
        y = float(np.clip(y + step * math.sin(angle), 0, h - 1))
        pts.append((x, y))
    draw.line(pts, fill=255, width=int(rng.integers(1, 4)), joint="curve")
    if rng.random() < 0.3 and len(pts) > 3:
        bx, by = pts[len(pts) // 2]
        ba = angle + rng.choice([-1.0, 1.0]) * rng.uniform(0.6, 1.2)
        branch = [(bx, by)]
        for _ in range(int(rng.integers(2, 6))):
            ba += rng.normal(0, 0.4)
            bx = float(np.clip(bx + 8 * math.cos(ba), 0, w - 1))
            by = float(np.clip(by + 8 * math.sin(ba), 0, h - 1))
            branch.append((bx, by))
        draw.line(branch, fill=255, width=2)


def _draw_pothole(rng, draw: ImageDraw.ImageDraw, h: int, w: int) -> None:
    rx, ry = rng.uniform(5, 12), rng.uniform(5, 12)
    cx, cy = rng.uniform(rx, w - rx), rng.uniform(ry, h - ry)
    draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=255)


def _draw_repair(rng, draw: ImageDraw.ImageDraw, h: int, w: int) -> None:
    rw, rh = rng.uniform(24, 56), rng.uniform(24, 56)
    x0, y0 = rng.uniform(0, w - rw), rng.uniform(0, h - rh)
    draw.rectangle([x0, y0, x0 + rw, y0 + rh], fill=255)


_DRAWERS = {"crack": _draw_crack, "pothole": _draw_pothole, "repair": _draw_repair}
_DEPTH = {"crack": (25, 55), "pothole": (35, 65), "repair": (15, 30)}


def _add_defects(rng, img: np.ndarray, spec: GenerationSpec) -> np.ndarray:
    h, w = img.shape
    styles = sorted(spec.style_mix)
    weights = np.array([spec.style_mix[s] for s in styles], dtype=float)
    weights /= weights.sum()
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(1, spec.max_defects + 1))):
        style = styles[int(rng.choice(len(styles), p=weights))]
        layer = Image.new("L", (w, h), 0)
        _DRAWERS[style](rng, ImageDraw.Draw(layer), h, w)
        region = np.asarray(layer) > 0
        soft = gaussian_filter(region.astype(float), 0.6)
        depth = rng.uniform(*_DEPTH[style])
        if style == "repair":
            # resurfaced block: darker and smoother than the surrounding asphalt
            local = gaussian_filter(img, 3.0)
            img[region] = 0.7 * local[region] + 0.3 * img[region] - depth
        elif style == "pothole":
            img -= depth * soft * (0.8 + 0.4 * rng.random((h, w)))
        else:
            img -= depth * soft
        mask |= region
    return mask


def render_image(spec: GenerationSpec, index: int, label: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixels and binary defect mask for generation slot ``index``."""
    rng = np.random.default_rng([spec.seed, index])
    h, w = spec.height, spec.width
    grid = PatchGrid.for_image(h, w, spec.patch_size)
    for _ in range(50):
        img = _background(rng, h, w)
        if rng.random() < spec.lane_marking_prob:
            _lane_marking(rng, img)
        for _ in range(int(rng.poisson(spec.stain_rate))):
            _stain(rng, img)
        if not label:
            mask = np.zeros((h, w), dtype=np.uint8)
            break
        mask = _add_defects(rng, img, spec).astype(np.uint8)
        if oracle_patch_labels(mask, grid, spec.min_defect_pixels).any():
            break
    else:  # pragma: no cover
        raise DataError(f"could not place a patch-sized defect for slot {index}")
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    if spec.channels == 3:
        tint = np.array([1.0, 0.98, 0.94]) * rng.uniform(0.95, 1.05, size=3)
        pixels = np.clip(np.rint(pixels[..., None] * tint), 0, 255).astype(np.uint8)
    return pixels, mask


def generate_corpus(spec: GenerationSpec, out_dir: Path) -> CorpusManifest:
    """Render every image in ``spec`` to PNG under ``out_dir`` and write the manifest."""
    spec.validate()
    out_dir = Path(out_dir).resolve()
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for index, (image_id, label, split) in enumerate(spec.plan()):
        pixels, mask = render_image(spec, index, label)
        path = img_dir / f"{image_id}.png"
        Image.fromarray(pixels).save(path)
        Image.fromarray(mask * 255).save(img_dir / f"{image_id}.mask.png")
        records.append(ImageRecord(image_id, path, label, split, "synthetic", pixels))
    manifest = CorpusManifest(records, spec.seed, {"source": "synthetic", **asdict(spec)}, out_dir)
    manifest.write(out_dir)
    log.info("wrote %d images to %s", len(records), out_dir)
    return manifest


# --------------------------------------------------------------------------
# Ground truth, noise, manifest loading
# --------------------------------------------------------------------------


def oracle_patch_labels(mask: np.ndarray, grid: PatchGrid, min_defect_pixels: int = 25) -> np.ndarray:
    """1 for each patch holding at least ``min_defect_pixels`` defect pixels."""
    if mask.shape[:2] != (grid.height, grid.width):
        raise GeometryError(f"mask {mask.shape[:2]} does not match grid {grid.height}x{grid.width}")
    s = grid.patch_size
    counts = (mask > 0).reshape(grid.rows, s, grid.cols, s).sum(axis=(1, 3)).ravel()
    return (counts >= min_defect_pixels).astype(np.uint8)


def noise_positions(n_pixels: int, noise_ratio: float, rng: np.random.Generator) -> np.ndarray:
    count = int(math.floor(noise_ratio * n_pixels + 0.5))
    return rng.choice(n_pixels, size=count, replace=False)


def corrupt_with_noise(image, noise_ratio: float, sigma: float = 0.2, seed: int = 0):
    """Additive Gaussian noise on a random ``noise_ratio`` share of pixel positions.

    Accepts an ``ImageRecord`` (returns a new record) or a raw uint8 array.
    """
    if not 0.0 <= noise_ratio <= 1.0:
        raise ConfigError([f"noise ratio must lie in [0, 1], got {noise_ratio}"])
    if not sigma > 0:
        raise ConfigError([f"sigma must be > 0, got {sigma}"])
    if isinstance(image, ImageRecord):
        return replace(image, pixels=corrupt_with_noise(image.load(), noise_ratio, sigma, seed))
    pixels = np.asarray(image)
    h, w = pixels.shape[:2]
    rng = np.random.default_rng(seed)
    pos = noise_positions(h * w, noise_ratio, rng)
    out = pixels.copy()
    flat = out.reshape(h * w, -1)
    noisy = flat[pos].astype(np.float64) + rng.normal(0.0, sigma * 255.0, size=(pos.size, flat.shape[1]))
    flat[pos] = np.clip(np.rint(noisy), 0, 255).astype(pixels.dtype)
    return out


def load_manifest(path: Path, verify: bool = True) -> CorpusManifest:
    """Read a tab-separated manifest (or the directory holding ``manifest.tsv``)."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    root = path.parent
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or tuple(lines[0].split("\t")) != MANIFEST_HEADER:
        header = "\t".join(MANIFEST_HEADER)
        raise DataError(f"{path}: first line must be the header {header!r}")
    seed, params = None, {}
    sidecar = root / SIDECAR_NAME
    if sidecar.exists():
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        seed, params = meta.get("seed"), meta.get("params", {})
    source = params.get("source", "external")

    records, seen = [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        rid, rel, label, split = parts
        if rid in seen:
            raise DataError(f"{path}:{lineno}: duplicate id {rid!r}")
        seen.add(rid)
        if label not in ("0", "1"):
            raise DataError(f"{path}:{lineno}: label for {rid!r} must be 0 or 1, got {label!r}")
        if split not in SPLITS:
            raise DataError(f"{path}:{lineno}: split for {rid!r} must be one of {SPLITS}, got {split!r}")
        file = (root / rel).resolve() if not Path(rel).is_absolute() else Path(rel)
        if not file.exists():
            raise DataError(f"image file for {rid!r} is missing: {file}")
        if verify:
            try:
                with Image.open(file) as im:
                    im.verify()
            except Exception as exc:
                raise DataError(f"image file for {rid!r} does not decode: {exc}") from exc
        records.append(ImageRecord(rid, file, int(label), split, source))
    return CorpusManifest(records, seed, params, root)
