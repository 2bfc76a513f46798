"""Weakly supervised pavement distress detection.

A small CNN scores image patches. It is trained from image-level labels only:
patch labels start as copies of the image label and are refined by
alternating training and rank-aware relabeling. Images are flagged by their
highest patch score.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .corpus import CorpusManifest, GenerationSpec, ImageRecord, generate_corpus, load_manifest
from .detect import Detection, ScreeningReport, detect_image, screen_batch, screen_scores
from .emipld import EmipldConfig, EmipldResult, TrainingSet, run_emipld
from .errors import CheckpointError, ConfigError, ContractError, DataError, GeometryError, TrainingError
from .metrics import EvalReport, auc, evaluate, precision_at_recall
from .plin import BackboneSpec, ModelState, OptimizerConfig, load_checkpoint, save_checkpoint, score_patches
from .preprocess import PatchGrid, PreprocessConfig, clahe, equalize, partition

__all__ = [
    "BackboneSpec", "CheckpointError", "ConfigError", "ContractError", "CorpusManifest", "DataError",
    "Detection", "EmipldConfig", "EmipldResult", "EvalReport", "GenerationSpec", "GeometryError",
    "ImageRecord", "ModelState", "OptimizerConfig", "PatchGrid", "PreprocessConfig", "ScreeningReport",
    "TrainingError", "TrainingSet", "auc", "clahe", "detect_image", "equalize", "evaluate",
    "generate_corpus", "load_checkpoint", "load_manifest", "partition", "precision_at_recall",
    "run_emipld", "save_checkpoint", "score_patches", "screen_batch", "screen_scores",
]
