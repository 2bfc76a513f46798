"""EM-style patch label distillation.

Patches start with their image's label. Each round trains the patch scorer on
the current labels (M-step), re-scores every training patch and relabels the
patches of diseased images with the rank-aware threshold rule (E-step), then
refreshes the global diseased-patch ratio ``s``. Patches of normal images
stay 0 throughout. The loop stops when no label changes or at the cap.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError, TrainingError
from .metrics import auc
from .plin import BackboneSpec, ModelState, OptimizerConfig, fit, new_model, save_checkpoint, score_patches

log = logging.getLogger(__name__)

LOSS_MODES = ("pkbce", "plain_bce")
CONVERGENCE = ("exact_zero", "min_change_fraction")


@dataclass(frozen=True)
class EmipldConfig:
    r: float = 0.45
    s0: float = 0.5
    max_iterations: int = 10
    warm_start: bool = True
    warm_start_epochs: int = 12
    loss_mode: str = "pkbce"
    irat_enabled: bool = True
    convergence: str = "exact_zero"
    min_change_fraction: float = 0.0
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        problems = []
        if not 0 < self.r <= 1:
            problems.append(f"r must lie in (0, 1], got {self.r}")
        if not 0 < self.s0 <= 1:
            problems.append(f"s0 must lie in (0, 1], got {self.s0}")
        if self.max_iterations < 1:
            problems.append(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.loss_mode not in LOSS_MODES:
            problems.append(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.convergence not in CONVERGENCE:
            problems.append(f"convergence must be one of {CONVERGENCE}, got {self.convergence!r}")
        if not 0 <= self.min_change_fraction < 1:
            problems.append("min_change_fraction must lie in [0, 1)")
        if not 0 <= self.val_fraction < 1:
            problems.append("val_fraction must lie in [0, 1)")
        if self.warm_start_epochs < 0:
            problems.append("warm_start_epochs must be >= 0")
        if problems:
            raise ConfigError(problems)


@dataclass
class TrainingSet:
    """Preprocessed training images as dense arrays.

    ``patches`` is ``(n, m, S, S)`` (or ``(..., C)``), ``thumbnails`` is
    ``(n, T, T)``; ``oracle`` optionally holds hidden per-patch truth for
    diagnostics only, never for training.
    """

    ids: list[str]
    labels: np.ndarray
    patches: np.ndarray
    thumbnails: np.ndarray | None = None
    oracle: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def m(self) -> int:
        return int(self.patches.shape[1])

    def flat_patches(self) -> np.ndarray:
        return self.patches.reshape(self.n * self.m, *self.patches.shape[2:])

    def subset(self, idx) -> "TrainingSet":
        idx = np.asarray(idx, dtype=int)
        pick = lambda a: None if a is None else a[idx]
        return TrainingSet([self.ids[i] for i in idx], self.labels[idx], self.patches[idx],
                           pick(self.thumbnails), pick(self.oracle))


@dataclass
class TrainState:
    iteration: int
    s_prev: float
    ids: list[str]
    image_labels: np.ndarray
    labels: np.ndarray
    prev_scores: np.ndarray | None = None
    change_count: int = 0
    model_ref: str | None = None

    @property
    def total_patches(self) -> int:
        return int(self.labels.size)

    def label_store(self) -> dict[str, np.ndarray]:
        return dict(zip(self.ids, self.labels))


@dataclass
class EmipldResult:
    model: ModelState
    state: TrainState
    history: list[dict]
    snapshots: list[np.ndarray] = field(default_factory=list, repr=False)
    converged: bool = False


# --------------------------------------------------------------------------
# Pieces
# --------------------------------------------------------------------------


def top_k(r: float, m: int) -> int:
    """Patches per image that the rank rule always keeps: ``max(1, floor(r*m))``."""
    return max(1, int(math.floor(r * m + 1e-9)))


def init_labels(ids, image_labels, m: int, s0: float = 0.5) -> TrainState:
    image_labels = np.asarray(image_labels, dtype=np.uint8)
    if len(ids) == 0:
        raise ContractError("training split is empty")
    if len(ids) != len(image_labels):
        raise ContractError("ids and image labels differ in length")
    labels = np.repeat(image_labels[:, None], m, axis=1).astype(np.uint8)
    return TrainState(0, float(s0), list(ids), image_labels, labels)


def diseased_ratio(labels: np.ndarray) -> float:
    """Share of all training patches labelled 1, floored at one patch."""
    total = labels.size
    return max(float(labels.sum()) / total, 1.0 / total)


def pkbce_loss(g_now, labels, g_prev, s_prev: float) -> float:
    """Cross-entropy with each item weighted by ``g_prev / s_prev``."""
    g_now, labels, g_prev = (np.asarray(a, dtype=np.float64) for a in (g_now, labels, g_prev))
    if not s_prev > 0:
        raise ContractError(f"s_prev must be > 0, got {s_prev}")
    if not (g_now.shape == labels.shape == g_prev.shape) or g_now.size == 0:
        raise ContractError("g_now, labels and g_prev must be non-empty and the same length")
    w = g_prev / s_prev
    ll = labels * np.log(g_now) + (1.0 - labels) * np.log1p(-g_now)
    return float(-np.mean(w * ll))


def pkbce_grad(g_now, labels, g_prev, s_prev: float) -> np.ndarray:
    """d pkbce_loss / d g_now."""
    g_now, labels, g_prev = (np.asarray(a, dtype=np.float64) for a in (g_now, labels, g_prev))
    w = g_prev / s_prev
    return -(w / g_now.size) * (labels / g_now - (1.0 - labels) / (1.0 - g_now))


def irat_update(scores, image_label: int, s_prev: float, r: float) -> np.ndarray:
    """New working labels for the patches of one diseased image.

    A patch becomes 1 when its score beats ``s_prev`` or when it is among the
    image's ``top_k(r, m)`` highest scores (ties go to the lower index).
    """
    if int(image_label) != 1:
        raise ContractError("only patches of diseased images are relabelled; normal patches stay 0")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise ContractError("expected a non-empty 1-D score vector")
    return kernels.irat_labels(scores[None, :], float(s_prev), top_k(r, scores.size))[0]


def relabel(scores: np.ndarray, image_labels: np.ndarray, s_prev: float, r: float) -> np.ndarray:
    """Batch form of ``irat_update``; rows of normal images come back all 0."""
    n, m = scores.shape
    out = np.zeros((n, m), dtype=np.uint8)
    pos = np.flatnonzero(image_labels == 1)
    if pos.size:
        out[pos] = kernels.irat_labels(np.ascontiguousarray(scores[pos], dtype=np.float64),
                                       float(s_prev), top_k(r, m))
    return out


def e_step(state: TrainState, scores: np.ndarray, config: EmipldConfig) -> TrainState:
    """Relabel from a fresh ``(n, m)`` score matrix and refresh the ratio.

    The score matrix comes from the model trained in the preceding M-step;
    ``score_training_set`` produces it.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != state.labels.shape:
        raise ContractError(f"score matrix {scores.shape} does not match labels {state.labels.shape}")
    if config.irat_enabled:
        new = relabel(scores, state.image_labels, state.s_prev, config.r)
    else:
        new = state.labels.copy()
    new[state.image_labels == 0] = 0
    change = int(np.abs(new.astype(np.int64) - state.labels).sum())
    return replace(
        state,
        s_prev=diseased_ratio(new),
        labels=new,
        prev_scores=scores,
        change_count=change,
    )


def score_training_set(model: ModelState, data: TrainingSet) -> np.ndarray:
    return score_patches(model, data.flat_patches()).reshape(data.n, data.m)


def mstep_weights(state: TrainState, config: EmipldConfig) -> np.ndarray:
    if config.loss_mode == "plain_bce" or state.prev_scores is None:
        return np.ones(state.labels.shape, dtype=np.float64)
    return state.prev_scores / state.s_prev


def warm_start(model: ModelState, thumbnails: np.ndarray, labels, optimizer: OptimizerConfig,
               epochs: int, seed: int = 0, enabled: bool = True) -> ModelState:
    """Fine-tune on whole-image thumbnails with image labels and plain cross-entropy."""
    if not enabled or epochs == 0:
        return model
    labels = np.asarray(labels)
    cfg = replace(optimizer, epochs=epochs)
    loss = fit(model, thumbnails, labels, np.ones(len(labels)), cfg, seed=seed)
    model.source = "warm_start"
    log.info("warm start: %d thumbnails, %d epochs, final loss %.4f", len(labels), epochs, loss)
    return model


def image_scores(model: ModelState, data: TrainingSet) -> np.ndarray:
    return score_training_set(model, data).max(axis=1)


def _safe_auc(scores, labels):
    labels = np.asarray(labels)
    if labels.min() == labels.max():
        return None
    return auc(scores, labels)


def split_validation(data: TrainingSet, fraction: float, seed: int) -> tuple[TrainingSet, TrainingSet | None]:
    """Hold out a label-stratified ``fraction`` of images for per-iteration AUC."""
    if fraction <= 0:
        return data, None
    rng = np.random.default_rng([seed, 0xA11])
    val_idx = []
    for cls in (0, 1):
        idx = np.flatnonzero(data.labels == cls)
        k = int(round(fraction * idx.size))
        val_idx.extend(rng.permutation(idx)[:k].tolist())
    if not val_idx:
        return data, None
    val_mask = np.zeros(data.n, dtype=bool)
    val_mask[val_idx] = True
    return data.subset(np.flatnonzero(~val_mask)), data.subset(np.flatnonzero(val_mask))


# --------------------------------------------------------------------------
# Persistence of label snapshots
# --------------------------------------------------------------------------


def write_label_snapshot(path: Path, state: TrainState) -> None:
    lines = ["image_id\tt\tlabel\tscore"]
    scores = state.prev_scores
    for i, image_id in enumerate(state.ids):
        for t in range(state.labels.shape[1]):
            s = "nan" if scores is None else f"{scores[i, t]:.9g}"
            lines.append(f"{image_id}\t{t}\t{int(state.labels[i, t])}\t{s}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_label_snapshot(path: Path) -> dict[str, dict[int, tuple[int, float]]]:
    out: dict[str, dict[int, tuple[int, float]]] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
        image_id, t, label, score = line.split("\t")
        out.setdefault(image_id, {})[int(t)] = (int(label), float(score))
    return out


def _check_invariants(state: TrainState) -> None:
    normal = state.image_labels == 0
    if state.labels[normal].any():
        raise TrainingError("a patch of a normal image carries label 1")
    diseased = state.image_labels == 1
    if diseased.any() and not state.labels[diseased].any(axis=1).all():
        raise TrainingError("a diseased image lost all of its positive patches")


def _write_run_manifest(run_dir: Path, meta: dict, history: list[dict], status: str) -> None:
    doc = {**meta, "status": status, "iterations": history}
    (run_dir / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str),
                                           encoding="utf-8")


# --------------------------------------------------------------------------
# The loop
# --------------------------------------------------------------------------


def run_emipld(
    data: TrainingSet,
    config: EmipldConfig,
    backbone: BackboneSpec | None = None,
    optimizer: OptimizerConfig | None = None,
    run_dir: Path | None = None,
    model: ModelState | None = None,
    run_meta: dict | None = None,
) -> EmipldResult:
    """Warm start (optional), then alternate M- and E-steps until stable or capped.

    With ``run_dir`` set, writes ``ckpt_<j>.bin``, ``labels_<j>.tsv`` and a
    ``manifest.json`` that is refreshed after every iteration, so a crashed run
    still leaves its partial history behind.
    """
    backbone = backbone or BackboneSpec()
    optimizer = optimizer or OptimizerConfig()
    train, val = split_validation(data, config.val_fraction, config.seed)
    if model is None:
        model = new_model(backbone, config.seed)
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
    meta = dict(run_meta or {})
    meta.setdefault("emipld", asdict(config))
    meta["train_images"] = train.n
    meta["val_images"] = 0 if val is None else val.n
    history: list[dict] = []

    state = init_labels(train.ids, train.labels, train.m, config.s0)
    snapshots = [state.labels.copy()]
    if run_dir is not None:
        write_label_snapshot(run_dir / "labels_0.tsv", state)

    try:
        if config.warm_start:
            if train.thumbnails is None:
                raise ContractError("warm start needs thumbnails in the training set")
            warm_start(model, train.thumbnails, train.labels, optimizer, config.warm_start_epochs,
                       seed=config.seed)
        if val is not None and config.warm_start:
            meta["warm_start_val_auc"] = _safe_auc(image_scores(model, val), val.labels)

        flat = train.flat_patches()
        converged = False
        for j in range(1, config.max_iterations + 1):
            t0 = time.perf_counter()
            weights = mstep_weights(state, config)
            loss = fit(model, flat, state.labels.ravel(), weights.ravel(), optimizer,
                       seed=config.seed * 1000 + j)
            model.source = f"emipld-{j}"
            scores = score_training_set(model, train)
            state = e_step(state, scores, config)
            state.iteration = j
            _check_invariants(state)
            snapshots.append(state.labels.copy())

            rec = {
                "iteration": j,
                "loss": loss,
                "loss_mode": "plain_bce" if np.all(weights == 1.0) else "pkbce",
                "s": state.s_prev,
                "change_count": state.change_count,
                "positive_patches": int(state.labels.sum()),
                "val_auc": None if val is None else _safe_auc(image_scores(model, val), val.labels),
                "seconds": round(time.perf_counter() - t0, 2),
            }
            if train.oracle is not None:
                pos = train.labels == 1
                rec["oracle_label_accuracy"] = float((state.labels[pos] == train.oracle[pos]).mean())
            if run_dir is not None:
                ckpt = save_checkpoint(model, run_dir / f"ckpt_{j}.bin", checkpoint_id=f"ckpt_{j}")
                state.model_ref = str(ckpt)
                rec["checkpoint"] = ckpt.name
                write_label_snapshot(run_dir / f"labels_{j}.tsv", state)
            history.append(rec)
            log.info("iteration %d: loss %.4f s %.4f changed %d val_auc %s", j, loss, state.s_prev,
                     state.change_count, rec["val_auc"])
            if run_dir is not None:
                _write_run_manifest(run_dir, meta, history, "running")

            limit = config.min_change_fraction * state.total_patches if config.convergence == "min_change_fraction" else 0
            if state.change_count <= limit:
                converged = True
                break
    except Exception:
        if run_dir is not None:
            _write_run_manifest(run_dir, meta, history, "failed")
        raise

    if run_dir is not None:
        save_checkpoint(model, run_dir / "final.bin", checkpoint_id="final")
        meta["final_checkpoint"] = "final.bin"
        meta["converged"] = converged
        _write_run_manifest(run_dir, meta, history, "finished")
    return EmipldResult(model, state, history, snapshots, converged)
