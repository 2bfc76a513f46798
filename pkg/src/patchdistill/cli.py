"""Command-line entry point.

    patchdistill generate   --config run.yaml
    patchdistill train      --config run.yaml --seed 3
    patchdistill evaluate   --checkpoint runs/<id>/final.bin
    patchdistill screen     --checkpoint runs/<id>/final.bin --threshold 0.8
    patchdistill localize   --checkpoint runs/<id>/final.bin --image-ids test_00003,test_00010
    patchdistill robustness --checkpoint runs/<id>/final.bin
    patchdistill ablate     --config run.yaml --presets baseline_thumbnail,clahe,pkbce

Each command writes its outputs together with a ``manifest.json`` holding the
resolved configuration, so the directory alone is enough to repeat the run.
Commands that take a checkpoint reuse the configuration stored beside it
unless ``--config`` is given.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__
from ._accel import backend_name
from .config import ABLATION_ORDER, PRESETS, RunConfig, apply_overrides, config_from_dict, load_config
from .corpus import CorpusManifest, generate_corpus, load_manifest
from .detect import detect_image, export_localization, screen_scores
from .emipld import EmipldResult, TrainingSet, run_emipld
from .errors import ConfigError, ContractError, DataError, PatchDistillError
from .metrics import EvalReport, evaluate, plot_pr_curve, write_pr_table, write_records
from .pipeline import (
    broadcast_patch_auc,
    build_training_set,
    corpus_digest,
    patch_level_auc,
    patch_score_matrix,
    robustness,
    train_baseline,
)
from .plin import ModelState, load_checkpoint, save_checkpoint, score_patches

log = logging.getLogger("patchdistill")


# --------------------------------------------------------------------------
# Shared plumbing
# --------------------------------------------------------------------------


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _command_manifest(command: str, cfg: RunConfig, **extra) -> dict:
    return {
        "command": command,
        "argv": sys.argv[1:],
        "package_version": __version__,
        "kernel_backend": backend_name(),
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        **extra,
    }


def ensure_corpus(cfg: RunConfig) -> CorpusManifest:
    """Load the configured corpus, generating the synthetic one if it is absent or stale."""
    if cfg.corpus.manifest:
        return load_manifest(cfg.corpus.manifest)
    root = cfg.corpus_root
    sidecar = root / "corpus.json"
    if (root / "manifest.tsv").exists() and sidecar.exists():
        params = json.loads(sidecar.read_text(encoding="utf-8")).get("params", {})
        want = {"source": "synthetic", **asdict(cfg.corpus.generation)}
        if json.loads(json.dumps(params)) == json.loads(json.dumps(want)):
            return load_manifest(root)
        log.info("corpus at %s was generated with other settings; regenerating", root)
    return cmd_generate(cfg)


def _split_sets(cfg: RunConfig, manifest: CorpusManifest, splits=("train", "test")) -> list[TrainingSet]:
    out = []
    for split in splits:
        records = manifest.split(split)
        if not records:
            raise DataError(f"corpus at {cfg.corpus_root} has no '{split}' images")
        out.append(build_training_set(records, cfg.preprocess, cfg.patch_size,
                                      cfg.corpus.generation.min_defect_pixels, cfg.resize_to_tile,
                                      cache=cfg.preprocess_cache))
    return out


def _checkpoint_context(checkpoint: Path | None, cfg: RunConfig | None) -> tuple[ModelState, RunConfig, Path]:
    """Load a checkpoint and the config it was trained with (unless one was given)."""
    if checkpoint is None:
        raise ConfigError("this command needs --checkpoint PATH")
    checkpoint = Path(checkpoint)
    model = load_checkpoint(checkpoint)
    run_dir = checkpoint.parent
    if cfg is None:
        stored = run_dir / "manifest.json"
        if not stored.exists():
            raise ConfigError(f"no --config given and no manifest.json beside {checkpoint}")
        doc = json.loads(stored.read_text(encoding="utf-8"))
        if "config" not in doc:
            raise ConfigError(f"{stored} holds no config snapshot; pass --config")
        cfg = config_from_dict(doc["config"])
    return model, cfg, run_dir


def _scorer_for(model: ModelState, requested: str | None) -> str:
    if requested:
        return requested
    return "thumbnail" if model.source == "warm_start" else "patch"


def score_images(model: ModelState, data: TrainingSet, scorer: str):
    """Image scores plus the patch score matrix (``None`` for the thumbnail scorer)."""
    if scorer == "thumbnail":
        return score_patches(model, data.thumbnails), None
    mat = patch_score_matrix(model, data)
    return mat.max(axis=1), mat


def _report_files(out_dir: Path, report: EvalReport, name: str = "model") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.txt").write_text(report.to_text() + "\n", encoding="utf-8")
    write_records(out_dir / "metrics.tsv", report.records())
    write_pr_table(out_dir / "pr_curve.tsv", report.pr_curve)
    plot_pr_curve(out_dir / "pr_curve.png", {name: report.pr_curve})


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_generate(cfg: RunConfig) -> CorpusManifest:
    if cfg.corpus.manifest:
        raise ConfigError("corpus.manifest points at an external corpus; nothing to generate")
    manifest = generate_corpus(cfg.corpus.generation, cfg.corpus_root)
    _write_json(cfg.corpus_root / "generate.json", _command_manifest(
        "generate", cfg, corpus_sha256=corpus_digest(manifest.records), images=len(manifest.records)))
    return manifest


def cmd_train(cfg: RunConfig, prefix: str = "train") -> tuple[Path, EmipldResult]:
    manifest = ensure_corpus(cfg)
    (train,) = _split_sets(cfg, manifest, ("train",))
    run_dir = cfg.run_dir(prefix)
    if run_dir.exists():
        shutil.rmtree(run_dir)  # same config + seed -> same id; start clean so reruns are idempotent
    run_dir.mkdir(parents=True)
    cfg.dump(run_dir / "config.yaml")
    meta = _command_manifest("train", cfg, run_id=run_dir.name,
                             corpus_root=str(cfg.corpus_root),
                             corpus_sha256=corpus_digest(manifest.records))
    result = run_emipld(train, cfg.emipld, cfg.backbone, cfg.optimizer, run_dir=run_dir, run_meta=meta)
    log.info("run %s finished after %d iterations (converged=%s)", run_dir.name, len(result.history),
             result.converged)
    return run_dir, result


def cmd_evaluate(cfg: RunConfig | None, checkpoint: Path, scorer: str | None = None,
                 threshold: float | None = None) -> tuple[Path, EvalReport]:
    model, cfg, run_dir = _checkpoint_context(checkpoint, cfg)
    (test,) = _split_sets(cfg, ensure_corpus(cfg), ("test",))
    thr = cfg.evaluation.threshold if threshold is None else threshold
    kind = _scorer_for(model, scorer)
    extra = {}
    img_scores, mat = score_images(model, test, kind)
    report = evaluate(img_scores, test.labels, thr, cfg.evaluation.recall_targets)
    if mat is not None and test.oracle is not None and test.oracle.min() != test.oracle.max():
        extra["patch_auc_vs_oracle"] = patch_level_auc(mat, test.oracle)
        extra["broadcast_label_patch_auc"] = broadcast_patch_auc(test.labels, test.oracle)
    out_dir = run_dir / "evaluate"
    _report_files(out_dir, report, Path(checkpoint).stem)
    lines = ["image_id\tscore\tlabel"] + [f"{i}\t{s:.9g}\t{y}" for i, s, y in zip(test.ids, img_scores, test.labels)]
    (out_dir / "scores.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_json(out_dir / "manifest.json", _command_manifest(
        "evaluate", cfg, checkpoint=str(checkpoint), checkpoint_sha256=_file_sha256(checkpoint),
        scorer=kind, threshold=thr, auc=report.auc, p_at_r={str(k): v[0] for k, v in report.p_at_r.items()},
        **extra))
    print(report.to_text())
    for k, v in extra.items():
        print(f"{k}: {v:.4f}")
    return out_dir, report


def cmd_screen(cfg: RunConfig | None, checkpoint: Path, threshold: float | None = None, split: str = "test"):
    model, cfg, run_dir = _checkpoint_context(checkpoint, cfg)
    thresholds = cfg.evaluation.screen_thresholds if threshold is None else (threshold,)
    manifest = ensure_corpus(cfg)
    records = manifest.records if split == "all" else manifest.split(split)
    if not records:
        raise DataError(f"no images in split {split!r}")
    scores = [detect_image(model, r.load(), cfg.preprocess, cfg.patch_size,
                           resize_to_tile=cfg.resize_to_tile).image_score for r in records]
    ids, labels = [r.id for r in records], [r.label for r in records]
    out_dir = run_dir / "screen"
    out_dir.mkdir(parents=True, exist_ok=True)
    summaries = {}
    for thr in thresholds:
        rep = screen_scores(ids, scores, thr, labels)
        rep.write(out_dir / f"screening_{thr:g}.tsv")
        summaries[f"{thr:g}"] = rep.summary()
        s = rep.summary()
        print(f"threshold {thr:g}: kept {s['kept']}/{s['kept'] + s['filtered']}"
              + (f", diseased recall {s['diseased_recall']:.3f}" if "diseased_recall" in s else "")
              + (f", normal filtered {s['normal_filtered_fraction']:.3f}" if "normal_filtered_fraction" in s else ""))
    _write_json(out_dir / "manifest.json", _command_manifest(
        "screen", cfg, checkpoint=str(checkpoint), split=split, summaries=summaries))
    return summaries


def cmd_localize(cfg: RunConfig | None, checkpoint: Path, image_ids=None, threshold: float | None = None,
                 limit: int = 8) -> list[Path]:
    model, cfg, run_dir = _checkpoint_context(checkpoint, cfg)
    thr = cfg.evaluation.threshold if threshold is None else threshold
    manifest = ensure_corpus(cfg)
    by_id = {r.id: r for r in manifest.records}
    if image_ids:
        missing = [i for i in image_ids if i not in by_id]
        if missing:
            raise DataError(f"image ids not in the corpus: {', '.join(missing)}")
        chosen = [by_id[i] for i in image_ids]
    else:
        chosen = [r for r in manifest.split("test") if r.label == 1][:limit]
    out_dir = run_dir / "localize"
    written = []
    for rec in chosen:
        img = rec.load()
        det = detect_image(model, img, cfg.preprocess, cfg.patch_size, thr, rec.id, cfg.resize_to_tile)
        written.extend(export_localization(det, img, out_dir))
        print(f"{rec.id}: score {det.image_score:.4f} flagged patches {int(det.patch_labels.sum())}/{det.grid.m}")
    _write_json(out_dir / "manifest.json", _command_manifest(
        "localize", cfg, checkpoint=str(checkpoint), threshold=thr, image_ids=[r.id for r in chosen]))
    return written


def cmd_robustness(cfg: RunConfig | None, checkpoint: Path) -> dict[float, float]:
    model, cfg, run_dir = _checkpoint_context(checkpoint, cfg)
    records = ensure_corpus(cfg).split("test")
    if not records:
        raise DataError("robustness sweep needs test images")
    ev = cfg.evaluation
    table = robustness(model, records, cfg.preprocess, cfg.patch_size, ev.noise_ratios, ev.noise_sigma, cfg.seed)
    out_dir = run_dir / "robustness"
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["noise_ratio\tauc"] + [f"{rho:g}\t{a:.6f}" for rho, a in table.items()]
    (out_dir / "robustness.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_json(out_dir / "manifest.json", _command_manifest(
        "robustness", cfg, checkpoint=str(checkpoint), auc_by_ratio={f"{k:g}": v for k, v in table.items()}))
    for rho, a in table.items():
        print(f"rho={rho:g}\tAUC={a:.4f}")
    return table


def run_preset(cfg: RunConfig, name: str, out_dir: Path) -> dict:
    """Train and evaluate one ablation preset; returns its table row."""
    preset = PRESETS[name]
    pcfg = replace(preset.apply(cfg), out=str(out_dir), run_id=name)
    t0 = time.perf_counter()
    if preset.scorer == "thumbnail":
        train, test = _split_sets(pcfg, ensure_corpus(pcfg))
        model = train_baseline(train, pcfg.backbone, pcfg.optimizer, pcfg.emipld.warm_start_epochs, pcfg.seed)
        run_dir = pcfg.run_dir()
        if run_dir.exists():
            shutil.rmtree(run_dir)
        save_checkpoint(model, run_dir / "final.bin", checkpoint_id=name)
        _write_json(run_dir / "manifest.json", _command_manifest("ablate", pcfg, preset=name, status="finished"))
        iterations = 0
    else:
        run_dir, result = cmd_train(pcfg)
        (test,) = _split_sets(pcfg, ensure_corpus(pcfg), ("test",))
        model, iterations = result.model, len(result.history)
    scores, _ = score_images(model, test, preset.scorer)
    report = evaluate(scores, test.labels, pcfg.evaluation.threshold, pcfg.evaluation.recall_targets)
    _report_files(run_dir / "evaluate", report, name)
    row = {"preset": name, "description": preset.label, "auc": report.auc,
           **{f"p_at_r{int(round(k * 100))}": v[0] for k, v in report.p_at_r.items()},
           "precision": report.counts.precision, "recall": report.counts.recall,
           "iterations": iterations, "seconds": round(time.perf_counter() - t0, 1)}
    log.info("preset %s: AUC %.4f", name, report.auc)
    return row


def cmd_ablate(cfg: RunConfig, presets=ABLATION_ORDER) -> tuple[Path, list[dict]]:
    unknown = [p for p in presets if p not in PRESETS]
    if unknown:
        raise ConfigError([f"unknown preset {p!r} (choose from {', '.join(PRESETS)})" for p in unknown])
    out_dir = cfg.out_dir / "ablations" / f"seed{cfg.seed}-{cfg.digest()[:10]}"
    out_dir.mkdir(parents=True, exist_ok=True)
    # Every preset shares one corpus: the configured one, not a per-preset copy.
    shared = replace(cfg, corpus=replace(cfg.corpus, root=str(cfg.corpus_root)))
    rows = [run_preset(shared, name, out_dir) for name in presets]
    cols = list(rows[0])
    lines = ["\t".join(cols)] + ["\t".join(_fmt(r[c]) for c in cols) for r in rows]
    (out_dir / "ablation.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_json(out_dir / "manifest.json", _command_manifest("ablate", shared, presets=list(presets), rows=rows))
    print(format_table(rows))
    return out_dir, rows


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def format_table(rows: list[dict]) -> str:
    cols = [c for c in rows[0] if c != "description"]
    widths = {c: max(len(c), *(len(_fmt(r[c])) for r in rows)) for c in cols}
    out = ["  ".join(c.ljust(widths[c]) for c in cols)]
    out += ["  ".join(_fmt(r[c]).ljust(widths[c]) for c in cols) for r in rows]
    return "\n".join(out)


# --------------------------------------------------------------------------
# argparse
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--seed", type=int, help="global seed (corpus, splits, initialisation)")
    common.add_argument("--out", help="workspace root; corpus/ and runs/ live under it")
    common.add_argument("--run-id", help="name of the run directory (default: derived from config digest)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config value, e.g. --set emipld.max_iterations=3")
    common.add_argument("-v", "--verbose", action="store_true")

    ckpt = argparse.ArgumentParser(add_help=False)
    ckpt.add_argument("--checkpoint", type=Path, help="checkpoint written by train or ablate")

    parser = argparse.ArgumentParser(prog="patchdistill", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="render the synthetic corpus")
    sub.add_parser("train", parents=[common], help="warm start and run the label-distillation loop")
    p = sub.add_parser("evaluate", parents=[common, ckpt], help="AUC, P@R and PR curve on the test split")
    p.add_argument("--threshold", type=float)
    p.add_argument("--scorer", choices=("patch", "thumbnail"), help="default: inferred from the checkpoint")
    p = sub.add_parser("screen", parents=[common, ckpt], help="keep images scoring above a threshold")
    p.add_argument("--threshold", type=float, help="default: every evaluation.screen_thresholds value")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p = sub.add_parser("localize", parents=[common, ckpt], help="overlay PNGs and patch score maps")
    p.add_argument("--threshold", type=float)
    p.add_argument("--image-ids", help="comma-separated ids (default: first diseased test images)")
    p.add_argument("--limit", type=int, default=8)
    sub.add_parser("robustness", parents=[common, ckpt], help="AUC under increasing pixel noise")
    p = sub.add_parser("ablate", parents=[common], help="train and compare configuration presets")
    p.add_argument("--presets", default=",".join(ABLATION_ORDER),
                   help=f"comma-separated, from: {', '.join(PRESETS)}")
    return parser


def _config_from_args(args) -> RunConfig | None:
    """Resolve the run config: file (or the snapshot beside ``--checkpoint``), then ``--set``, then flags.

    Returns ``None`` for a checkpoint command with no config source at all, so
    the command itself reports the missing snapshot.
    """
    flags = {"seed": args.seed, "out": args.out, "run_id": args.run_id}
    checkpoint = getattr(args, "checkpoint", None)
    if checkpoint is not None and args.config is None:
        stored = Path(checkpoint).parent / "manifest.json"
        if not stored.exists():
            return None
        raw = json.loads(stored.read_text(encoding="utf-8")).get("config")
        if raw is None:
            return None
        raw = apply_overrides(raw, args.overrides)
        raw.update({k: v for k, v in flags.items() if v is not None})
        return config_from_dict(raw)
    return load_config(args.config, args.overrides, **flags)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config_from_args(args)
        if args.command == "generate":
            man = cmd_generate(cfg)
            print(f"wrote {len(man.records)} images to {cfg.corpus_root}")
        elif args.command == "train":
            run_dir, result = cmd_train(cfg)
            print(f"run directory: {run_dir}")
            print(f"iterations: {len(result.history)} converged: {result.converged}")
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.checkpoint, args.scorer, args.threshold)
        elif args.command == "screen":
            cmd_screen(cfg, args.checkpoint, args.threshold, args.split)
        elif args.command == "localize":
            ids = [i.strip() for i in args.image_ids.split(",") if i.strip()] if args.image_ids else None
            cmd_localize(cfg, args.checkpoint, ids, args.threshold, args.limit)
        elif args.command == "robustness":
            cmd_robustness(cfg, args.checkpoint)
        elif args.command == "ablate":
            cmd_ablate(cfg, [p.strip() for p in args.presets.split(",") if p.strip()])
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return exc.exit_code
    except ContractError as exc:
        print(f"invalid request: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    except PatchDistillError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
