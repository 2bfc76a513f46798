"""Binary classification metrics for image-level detection.

Positives are diseased images. An item is predicted positive when its score
is strictly greater than the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ContractError


@dataclass(frozen=True)
class PRPoint:
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    tn: int
    precision_defined: bool = True


@dataclass
class EvalReport:
    n_pos: int
    n_neg: int
    auc: float
    threshold: float
    counts: PRPoint
    pr_curve: list[tuple[float, float, float]] = field(default_factory=list, repr=False)
    p_at_r: dict[float, tuple[float, float]] = field(default_factory=dict)
    robustness: dict[float, float] = field(default_factory=dict)

    def records(self) -> list[tuple[str, float, str]]:
        rows = [
            ("auc", self.auc, ""),
            ("precision", self.counts.precision, f"threshold={self.threshold}"),
            ("recall", self.counts.recall, f"threshold={self.threshold}"),
        ]
        for target, (p, thr) in sorted(self.p_at_r.items()):
            rows.append(("p_at_r", p, f"recall={target};threshold={thr:.9g}"))
        for rho, a in sorted(self.robustness.items()):
            rows.append(("robust_auc", a, f"noise_ratio={rho}"))
        return rows

    def to_text(self) -> str:
        c = self.counts
        lines = [
            f"images: {self.n_pos} diseased, {self.n_neg} normal",
            f"AUC: {self.auc:.4f}",
            f"threshold {self.threshold}: P={c.precision:.4f} R={c.recall:.4f} "
            f"(TP={c.tp} FP={c.fp} FN={c.fn} TN={c.tn})",
        ]
        for target, (p, thr) in sorted(self.p_at_r.items()):
            lines.append(f"P@R={target:.0%}: {p:.4f} (threshold {thr:.6g})")
        for rho, a in sorted(self.robustness.items()):
            lines.append(f"noise ratio {rho:.2f}: AUC {a:.4f}")
        return "\n".join(lines) + "\n"


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ContractError("scores and labels must be 1-D and the same length")
    if scores.size == 0:
        raise ContractError("empty score list")
    if not np.isin(labels, (0, 1)).all():
        raise ContractError("labels must be 0 or 1")
    return scores, labels


def precision_recall(scores, labels, threshold: float) -> PRPoint:
    """Precision and recall at ``threshold``.

    With no predicted positives precision is reported as 1.0 and flagged
    undefined.
    """
    scores, labels = _check(scores, labels)
    pred = scores > threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    tn = int(np.sum(~pred & (labels == 0)))
    defined = tp + fp > 0
    precision = tp / (tp + fp) if defined else 1.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return PRPoint(precision, recall, tp, fp, fn, tn, defined)


def auc(scores, labels) -> float:
    """ROC AUC from the positive rank sum, midranks for ties."""
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUC needs at least one positive and one negative")
    ranks = kernels.midranks(np.ascontiguousarray(scores))
    s_pos = float(ranks[labels == 1].sum())
    return (s_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _operating_points(scores, labels):
    """Cumulative TP/FP for cuts at each distinct score, highest first.

    Cut ``c`` predicts positive for ``score >= c``; the equivalent strict
    threshold is the float just below ``c``.
    """
    order = np.argsort(-scores, kind="mergesort")
    s, l = scores[order], labels[order]
    last = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(l)[last]
    fp = np.cumsum(1 - l)[last]
    cuts = s[last]
    return cuts, tp, fp


def pr_curve(scores, labels) -> list[tuple[float, float, float]]:
    """``(recall, precision, threshold)`` for every distinct operating point."""
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ContractError("PR curve needs at least one positive")
    cuts, tp, fp = _operating_points(scores, labels)
    thr = np.nextafter(cuts, -np.inf)
    return [(float(t / n_pos), float(t / (t + f)), float(c)) for t, f, c in zip(tp, fp, thr)]


def precision_at_recall(scores, labels, target: float) -> tuple[float, float]:
    """Precision at the largest threshold whose recall reaches ``target``.

    Returns ``(precision, threshold)``.
    """
    if not 0 < target <= 1:
        raise ContractError(f"target recall must lie in (0, 1], got {target}")
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ContractError("precision at recall needs at least one positive")
    cuts, tp, fp = _operating_points(scores, labels)
    ok = np.flatnonzero(tp >= target * n_pos - 1e-12)
    i = int(ok[0])
    return float(tp[i] / (tp[i] + fp[i])), float(np.nextafter(cuts[i], -np.inf))


def evaluate(scores, labels, threshold: float = 0.5, recall_targets=(0.9, 0.95)) -> EvalReport:
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    return EvalReport(
        n_pos=n_pos,
        n_neg=int(labels.size - n_pos),
        auc=auc(scores, labels),
        threshold=threshold,
        counts=precision_recall(scores, labels, threshold),
        pr_curve=pr_curve(scores, labels),
        p_at_r={float(t): precision_at_recall(scores, labels, t) for t in recall_targets},
    )


def robustness_sweep(score_fn, images, labels, noise_ratios=(0.0, 0.1, 0.2, 0.3), sigma: float = 0.2,
                     seed: int = 0) -> dict[float, float]:
    """Image-level AUC after corrupting every image at each noise ratio.

    ``score_fn`` maps one raw image to its image score (the detector's full
    preprocessing and pooling path). Image ``i`` at ratio ``rho`` is corrupted
    with seed ``(seed, i)`` so reruns reproduce exactly.
    """
    from .corpus import corrupt_with_noise

    labels = np.asarray(labels)
    out = {}
    for rho in noise_ratios:
        scores = [
            score_fn(corrupt_with_noise(img, rho, sigma, seed=(seed, i)))
            for i, img in enumerate(images)
        ]
        out[float(rho)] = auc(np.asarray(scores), labels)
    return out


def write_records(path: Path, rows) -> None:
    lines = ["metric\tvalue\tparams"] + [f"{m}\t{v:.9g}\t{p}" for m, v, p in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_pr_table(path: Path, curve) -> None:
    lines = ["recall\tprecision\tthreshold"] + [f"{r:.9g}\t{p:.9g}\t{t:.9g}" for r, p, t in curve]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def plot_pr_curve(path: Path, curves: dict[str, list]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for name, curve in curves.items():
        r = [c[0] for c in curve]
        p = [c[1] for c in curve]
        ax.step(r, p, where="post", label=name)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.01)
    ax.set_ylim(0, 1.01)
    ax.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
