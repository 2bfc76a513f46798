"""Glue between the corpus, preprocessing, training and evaluation."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import ImageRecord, oracle_patch_labels
from .detect import image_score_fn
from .emipld import EmipldConfig, EmipldResult, TrainingSet, run_emipld, warm_start
from .metrics import EvalReport, auc, evaluate, robustness_sweep
from .plin import BackboneSpec, ModelState, OptimizerConfig, new_model, score_patches
from .preprocess import (PatchGrid, PreprocessConfig, cached_equalize, center_crop_to_tiling, equalize, make_thumbnail,
                         partition)

log = logging.getLogger(__name__)


def build_training_set(records: list[ImageRecord], preprocess: PreprocessConfig, patch_size: int,
                       min_defect_pixels: int = 25, resize_to_tile: bool = False,
                       cache: bool = False) -> TrainingSet:
    """Equalise every image, then tile it and make its thumbnail (in that order).

    With ``cache`` set, equalised images are stored as PNGs beside their
    sources, keyed by the preprocessing digest, and reused on later calls.
    """
    ids, labels, patches, thumbs, oracle = [], [], [], [], []
    have_masks = True
    for rec in records:
        img = rec.load()
        if resize_to_tile:
            img = center_crop_to_tiling(img, patch_size)
        grid = PatchGrid.for_image(img.shape[0], img.shape[1], patch_size)
        if cache and not resize_to_tile and rec.path is not None:
            eq = cached_equalize(img, preprocess, rec.path)
        else:
            eq = equalize(img, preprocess)
        ids.append(rec.id)
        labels.append(rec.label)
        patches.append(partition(eq, grid))
        thumbs.append(make_thumbnail(eq, preprocess.thumbnail_size))
        mask = rec.load_mask() if have_masks else None
        if mask is None:
            have_masks = False
        else:
            if resize_to_tile:
                mask = center_crop_to_tiling(mask, patch_size)
            oracle.append(oracle_patch_labels(mask, grid, min_defect_pixels))
    return TrainingSet(
        ids,
        np.asarray(labels, dtype=np.uint8),
        np.stack(patches),
        np.stack(thumbs),
        np.stack(oracle) if have_masks and oracle else None,
    )


def corpus_digest(records: list[ImageRecord]) -> str:
    h = hashlib.sha256()
    for rec in sorted(records, key=lambda r: r.id):
        h.update(f"{rec.id}\t{rec.label}\t{rec.split}\n".encode())
        if rec.path is not None and Path(rec.path).exists():
            h.update(Path(rec.path).read_bytes())
        else:
            h.update(rec.load().tobytes())
    return h.hexdigest()


def patch_score_matrix(model: ModelState, data: TrainingSet) -> np.ndarray:
    return score_patches(model, data.flat_patches()).reshape(data.n, data.m)


def evaluate_patch_model(model: ModelState, data: TrainingSet, threshold: float = 0.5,
                         recall_targets=(0.9, 0.95)) -> tuple[EvalReport, np.ndarray]:
    """Image-level report from max-pooled patch scores; also returns the patch score matrix."""
    scores = patch_score_matrix(model, data)
    return evaluate(scores.max(axis=1), data.labels, threshold, recall_targets), scores


def evaluate_thumbnail_model(model: ModelState, data: TrainingSet, threshold: float = 0.5,
                             recall_targets=(0.9, 0.95)) -> EvalReport:
    """Whole-image baseline: one score per image from its thumbnail."""
    return evaluate(score_patches(model, data.thumbnails), data.labels, threshold, recall_targets)


def patch_level_auc(patch_scores: np.ndarray, oracle: np.ndarray) -> float:
    return auc(np.asarray(patch_scores).ravel(), np.asarray(oracle).ravel())


def broadcast_patch_auc(image_labels: np.ndarray, oracle: np.ndarray) -> float:
    """Patch-level AUC of the initial labels (image label copied to every patch)."""
    m = oracle.shape[1]
    return auc(np.repeat(np.asarray(image_labels, dtype=float)[:, None], m, axis=1).ravel(), oracle.ravel())


def train_baseline(data: TrainingSet, backbone: BackboneSpec, optimizer: OptimizerConfig,
                   epochs: int, seed: int = 0) -> ModelState:
    """The thumbnail warm-start model on its own (the whole-image baseline)."""
    model = new_model(backbone, seed)
    return warm_start(model, data.thumbnails, data.labels, optimizer, epochs, seed=seed)


def robustness(model: ModelState, records: list[ImageRecord], preprocess: PreprocessConfig, patch_size: int,
               noise_ratios=(0.0, 0.1, 0.2, 0.3), sigma: float = 0.2, seed: int = 0) -> dict[float, float]:
    """Noise-ratio sweep through the full detection path (corrupt, equalise, tile, score, pool)."""
    images = [r.load() for r in records]
    labels = [r.label for r in records]
    return robustness_sweep(image_score_fn(model, preprocess, patch_size), images, labels,
                            noise_ratios, sigma, seed)


@dataclass
class ExperimentResult:
    result: EmipldResult
    report: EvalReport
    patch_scores: np.ndarray
    patch_auc: float | None
    broadcast_auc: float | None


def run_experiment(train: TrainingSet, test: TrainingSet, config: EmipldConfig, backbone: BackboneSpec,
                   optimizer: OptimizerConfig, run_dir: Path | None = None, model: ModelState | None = None,
                   run_meta: dict | None = None, threshold: float = 0.5) -> ExperimentResult:
    res = run_emipld(train, config, backbone, optimizer, run_dir=run_dir, model=model, run_meta=run_meta)
    report, scores = evaluate_patch_model(res.model, test, threshold)
    p_auc = b_auc = None
    if test.oracle is not None and test.oracle.min() != test.oracle.max():
        p_auc = patch_level_auc(scores, test.oracle)
        b_auc = broadcast_patch_auc(test.labels, test.oracle)
    return ExperimentResult(res, report, scores, p_auc, b_auc)
