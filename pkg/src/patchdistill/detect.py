"""Image-level detection by max-pooling patch confidences, threshold
screening of image batches, and patch-level localisation overlays."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .errors import ContractError
from .plin import ModelState, score_patches
from .preprocess import PatchGrid, PreprocessConfig, center_crop_to_tiling, equalize, partition

LEGEND_HEIGHT = 14
TINT = np.array([255.0, 0.0, 0.0])
TINT_ALPHA = 0.45


@dataclass
class Detection:
    image_id: str
    image_score: float
    decision: int
    threshold: float
    patch_scores: np.ndarray
    patch_labels: np.ndarray
    grid: PatchGrid

    @classmethod
    def from_scores(cls, image_id: str, patch_scores, grid: PatchGrid, threshold: float) -> "Detection":
        s = np.asarray(patch_scores, dtype=np.float64)
        labels = (s > threshold).astype(np.uint8)
        top = float(s.max())
        return cls(image_id, top, int(top > threshold), threshold, s, labels, grid)


def prepare_patches(image: np.ndarray, preprocess: PreprocessConfig, patch_size: int,
                    resize_to_tile: bool = False) -> tuple[np.ndarray, PatchGrid]:
    if resize_to_tile:
        image = center_crop_to_tiling(image, patch_size)
    grid = PatchGrid.for_image(image.shape[0], image.shape[1], patch_size)
    return partition(equalize(image, preprocess), grid), grid


def detect_image(model: ModelState, image: np.ndarray, preprocess: PreprocessConfig, patch_size: int,
                 threshold: float = 0.5, image_id: str = "", resize_to_tile: bool = False) -> Detection:
    """Equalise, tile, score every patch; the image score is the patch maximum."""
    patches, grid = prepare_patches(image, preprocess, patch_size, resize_to_tile)
    return Detection.from_scores(image_id, score_patches(model, patches), grid, threshold)


def image_score_fn(model: ModelState, preprocess: PreprocessConfig, patch_size: int):
    """Callable mapping a raw image to its pooled score (used by the robustness sweep)."""
    return lambda img: detect_image(model, img, preprocess, patch_size).image_score


@dataclass
class ScreeningReport:
    threshold: float
    kept: list[tuple[str, float]]
    filtered: list[tuple[str, float]]
    true_labels: dict[str, int] = field(default_factory=dict)

    @property
    def kept_fraction(self) -> float:
        n = len(self.kept) + len(self.filtered)
        return len(self.kept) / n if n else 0.0

    def kept_ids(self) -> set[str]:
        return {i for i, _ in self.kept}

    def summary(self) -> dict:
        out = {"threshold": self.threshold, "kept": len(self.kept), "filtered": len(self.filtered),
               "kept_fraction": self.kept_fraction}
        if self.true_labels:
            kept = self.kept_ids()
            pos = [i for i, y in self.true_labels.items() if y == 1]
            neg = [i for i, y in self.true_labels.items() if y == 0]
            if pos:
                out["diseased_recall"] = sum(i in kept for i in pos) / len(pos)
            if neg:
                out["normal_filtered_fraction"] = sum(i not in kept for i in neg) / len(neg)
        return out

    def write(self, path: Path) -> None:
        rows = [(i, s, 1) for i, s in self.kept] + [(i, s, 0) for i, s in self.filtered]
        rows.sort(key=lambda r: r[0])
        lines = ["image_id\tscore\tdecision\ttrue_label"]
        for i, s, d in rows:
            y = self.true_labels.get(i, "")
            lines.append(f"{i}\t{s:.9g}\t{d}\t{y}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def screen_scores(ids, scores, threshold: float, true_labels=None) -> ScreeningReport:
    """Keep images scoring above ``threshold``; filter the rest."""
    if not 0 < threshold < 1:
        raise ContractError(f"screening threshold must lie in (0, 1), got {threshold}")
    kept, filtered = [], []
    for i, s in zip(ids, scores):
        (kept if s > threshold else filtered).append((i, float(s)))
    labels = {} if true_labels is None else dict(zip(ids, (int(y) for y in true_labels)))
    return ScreeningReport(threshold, kept, filtered, labels)


def screen_batch(model: ModelState, images, threshold: float, preprocess: PreprocessConfig,
                 patch_size: int, true_labels=None) -> ScreeningReport:
    """``images`` is an iterable of ``(image_id, pixels)`` pairs."""
    ids, scores = [], []
    for image_id, pixels in images:
        ids.append(image_id)
        scores.append(detect_image(model, pixels, preprocess, patch_size, threshold, image_id).image_score)
    return screen_scores(ids, scores, threshold, true_labels)


def _as_rgb(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        return np.repeat(image[..., None], 3, axis=2)
    return image[..., :3]


def render_overlay(detection: Detection, image: np.ndarray) -> np.ndarray:
    """RGB overlay: flagged patches tinted red with their score, plus a legend strip below."""
    grid = detection.grid
    if image.shape[:2] != (grid.height, grid.width):
        raise ContractError("image and detection grid disagree in size")
    rgb = _as_rgb(image).astype(np.float64)
    s = grid.patch_size
    for t in np.flatnonzero(detection.patch_labels):
        r, c = grid.position(int(t))
        block = rgb[r * s : (r + 1) * s, c * s : (c + 1) * s]
        block[:] = (1 - TINT_ALPHA) * block + TINT_ALPHA * TINT
    canvas = np.zeros((grid.height + LEGEND_HEIGHT, grid.width, 3), dtype=np.uint8)
    canvas[: grid.height] = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    out = Image.fromarray(canvas)
    draw = ImageDraw.Draw(out)
    for t in np.flatnonzero(detection.patch_labels):
        r, c = grid.position(int(t))
        draw.text((c * s + 2, r * s + 2), f"{detection.patch_scores[t]:.2f}", fill=(255, 255, 255))
    draw.rectangle([2, grid.height + 3, 10, grid.height + 11], fill=(255, 0, 0))
    draw.text((14, grid.height + 1),
              f"diseased patch (score > {detection.threshold:g}); image score {detection.image_score:.3f}",
              fill=(255, 255, 255))
    return np.asarray(out)


def write_score_map(path: Path, detection: Detection) -> None:
    lines = ["t\trow\tcol\tscore\tlabel"]
    for t, (score, label) in enumerate(zip(detection.patch_scores, detection.patch_labels)):
        r, c = detection.grid.position(t)
        lines.append(f"{t}\t{r}\t{c}\t{score:.9g}\t{int(label)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def export_localization(detection: Detection, image: np.ndarray, out_dir: Path) -> tuple[Path, Path]:
    """Write ``<id>.overlay.png`` and ``<id>.scores.tsv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = detection.image_id or "image"
    png = out_dir / f"{name}.overlay.png"
    tsv = out_dir / f"{name}.scores.tsv"
    Image.fromarray(render_overlay(detection, image)).save(png)
    write_score_map(tsv, detection)
    return png, tsv
