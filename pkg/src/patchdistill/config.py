"""Run configuration: one YAML document with a section per module.

Every section maps onto the dataclass that the corresponding module already
validates, so this file mostly routes keys and gathers problems. Validation
never stops at the first bad field; ``ConfigError.problems`` lists them all.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .corpus import GenerationSpec
from .emipld import EmipldConfig
from .errors import ConfigError, PatchDistillError
from .plin import BackboneSpec, OptimizerConfig
from .preprocess import PreprocessConfig

SECTIONS = ("corpus", "preprocess", "backbone", "optimizer", "emipld", "evaluation")
TOP_LEVEL = ("seed", "out", "run_id", "patch_size", "resize_to_tile", "preprocess_cache")


@dataclass(frozen=True)
class CorpusSection:
    """Where the images come from. ``manifest`` points at an external corpus;
    otherwise a synthetic one is generated under ``root`` from ``generation``."""

    root: str | None = None
    manifest: str | None = None
    generation: GenerationSpec = field(default_factory=GenerationSpec)


@dataclass(frozen=True)
class EvaluationConfig:
    threshold: float = 0.5
    recall_targets: tuple[float, ...] = (0.9, 0.95)
    noise_ratios: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3)
    noise_sigma: float = 0.2
    screen_thresholds: tuple[float, ...] = (0.5, 0.8)

    def __post_init__(self):
        for name in ("recall_targets", "noise_ratios", "screen_thresholds"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        problems = []
        if not 0 < self.threshold < 1:
            problems.append(f"evaluation.threshold must lie in (0, 1), got {self.threshold}")
        if not self.recall_targets or any(not 0 < r <= 1 for r in self.recall_targets):
            problems.append("evaluation.recall_targets must be non-empty values in (0, 1]")
        if any(not 0 <= r <= 1 for r in self.noise_ratios):
            problems.append("evaluation.noise_ratios must lie in [0, 1]")
        if not self.noise_sigma > 0:
            problems.append("evaluation.noise_sigma must be > 0")
        if any(not 0 < t < 1 for t in self.screen_thresholds):
            problems.append("evaluation.screen_thresholds must lie in (0, 1)")
        if problems:
            raise ConfigError(problems)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "."
    run_id: str | None = None
    patch_size: int = 64
    resize_to_tile: bool = False
    preprocess_cache: bool = False
    corpus: CorpusSection = field(default_factory=CorpusSection)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    emipld: EmipldConfig = field(default_factory=EmipldConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    # -- derived locations -------------------------------------------------

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def corpus_root(self) -> Path:
        if self.corpus.manifest:
            m = Path(self.corpus.manifest)
            return m if m.is_dir() else m.parent
        return Path(self.corpus.root) if self.corpus.root else self.out_dir / "corpus"

    def resolved_run_id(self, prefix: str = "train") -> str:
        return self.run_id or f"{prefix}-seed{self.seed}-{self.digest()[:10]}"

    def run_dir(self, prefix: str = "train") -> Path:
        return self.out_dir / "runs" / self.resolved_run_id(prefix)

    # -- serialisation -----------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["corpus"] = {"root": self.corpus.root, "manifest": self.corpus.manifest,
                       **_without(asdict(self.corpus.generation), ("seed", "patch_size"))}
        d["emipld"] = _without(d["emipld"], ("seed",))
        return _plain(d)

    def digest(self) -> str:
        """Hash of everything that changes results (not where they are written)."""
        d = self.to_dict()
        for k in ("out", "run_id"):
            d.pop(k)
        d["corpus"].pop("root")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def dump(self, path: Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False), encoding="utf-8")


def _without(d: dict, keys) -> dict:
    return {k: v for k, v in d.items() if k not in keys}


def _plain(obj):
    """Tuples to lists, recursively, so the dict survives a YAML/JSON round trip unchanged."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def _build(cls, section: str, values: dict, problems: list, **forced):
    """Instantiate ``cls`` from ``values``; append problems instead of raising."""
    if not isinstance(values, dict):
        problems.append(f"{section}: expected a mapping, got {type(values).__name__}")
        return cls(**forced) if forced else cls()
    allowed = _field_names(cls) - set(forced)
    for key in sorted(set(values) - allowed):
        hint = " (set the top-level key instead)" if key in forced else ""
        problems.append(f"{section}.{key}: unknown field{hint}")
    kwargs = {k: v for k, v in values.items() if k in allowed}
    kwargs.update(forced)
    try:
        obj = cls(**kwargs)
        if hasattr(obj, "validate"):
            obj.validate()
        return obj
    except ConfigError as exc:
        problems.extend(f"{section}: {p}" for p in exc.problems)
    except (TypeError, ValueError) as exc:
        problems.append(f"{section}: {exc}")
    try:
        return cls(**forced) if forced else cls()
    except PatchDistillError:
        return None


def config_from_dict(raw: dict | None) -> RunConfig:
    """Validate a nested mapping into a ``RunConfig``. Raises ``ConfigError`` listing every problem."""
    raw = copy.deepcopy(raw or {})
    if not isinstance(raw, dict):
        raise ConfigError("config document must be a mapping")
    problems: list[str] = []
    for key in sorted(set(raw) - set(TOP_LEVEL) - set(SECTIONS)):
        problems.append(f"{key}: unknown top-level key")

    top = {k: raw[k] for k in TOP_LEVEL if k in raw}
    seed = top.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        problems.append(f"seed must be a non-negative integer, got {seed!r}")
        seed = 0
    patch = top.get("patch_size", 64)
    if not isinstance(patch, int) or patch < 1:
        problems.append(f"patch_size must be a positive integer, got {patch!r}")
        patch = 64
    for flag in ("resize_to_tile", "preprocess_cache"):
        if flag in top and not isinstance(top[flag], bool):
            problems.append(f"{flag} must be true or false")
    if "out" in top and not isinstance(top["out"], str):
        top["out"] = str(top["out"])

    corpus_raw = dict(raw.get("corpus") or {})
    root, manifest = corpus_raw.pop("root", None), corpus_raw.pop("manifest", None)
    gen = _build(GenerationSpec, "corpus", corpus_raw, problems, seed=seed, patch_size=patch)
    pre_raw = dict(raw.get("preprocess") or {})
    if "tile_grid" in pre_raw and isinstance(pre_raw["tile_grid"], list):
        pre_raw["tile_grid"] = tuple(pre_raw["tile_grid"])
    pre = _build(PreprocessConfig, "preprocess", pre_raw, problems)
    bb = _build(BackboneSpec, "backbone", raw.get("backbone") or {}, problems)
    opt = _build(OptimizerConfig, "optimizer", raw.get("optimizer") or {}, problems)
    em = _build(EmipldConfig, "emipld", raw.get("emipld") or {}, problems, seed=seed)
    ev = _build(EvaluationConfig, "evaluation", raw.get("evaluation") or {}, problems)

    # Cross-section consistency: the network sees patches and thumbnails at one size.
    if bb is not None and bb.input_size != patch:
        problems.append(f"backbone.input_size ({bb.input_size}) must equal patch_size ({patch})")
    if pre is not None and bb is not None and pre.thumbnail_size != bb.input_size:
        problems.append(f"preprocess.thumbnail_size ({pre.thumbnail_size}) must equal "
                        f"backbone.input_size ({bb.input_size})")
    if problems:
        raise ConfigError(problems)
    return RunConfig(corpus=CorpusSection(root, manifest, gen), preprocess=pre, backbone=bb,
                     optimizer=opt, emipld=em, evaluation=ev, **top)


def parse_override(item: str) -> tuple[list[str], object]:
    """``section.key=value`` with a YAML-typed value."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, value = item.split("=", 1)
    try:
        parsed = yaml.safe_load(value)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {item!r}: {exc}") from None
    return key.strip().split("."), parsed


def apply_overrides(raw: dict, overrides) -> dict:
    raw = copy.deepcopy(raw)
    for item in overrides or ():
        path, value = parse_override(item)
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {part} is not a section")
        node[path[-1]] = value
    return raw


def read_config_file(path: Path | None) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


def load_config(path: Path | None = None, overrides=(), **flags) -> RunConfig:
    """File values, then ``--set`` overrides, then explicit flags (``None`` means not given)."""
    raw = apply_overrides(read_config_file(path), overrides)
    for key, value in flags.items():
        if value is not None:
            raw[key] = value
    return config_from_dict(raw)


# --------------------------------------------------------------------------
# Ablation presets
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Preset:
    name: str
    scorer: str  # "thumbnail" or "patch"
    label: str
    preprocess_mode: str | None = None
    emipld: dict = field(default_factory=dict)

    def apply(self, cfg: RunConfig) -> RunConfig:
        pre = cfg.preprocess if self.preprocess_mode is None else replace(cfg.preprocess, mode=self.preprocess_mode)
        return replace(cfg, preprocess=pre, emipld=replace(cfg.emipld, **self.emipld))


PRESETS: dict[str, Preset] = {p.name: p for p in (
    Preset("baseline_thumbnail", "thumbnail", "thumbnail classifier", "none"),
    Preset("clahe", "thumbnail", "CLAHE + thumbnail classifier", "clahe"),
    Preset("irat", "patch", "IRAT + CLAHE + patch net", "clahe",
           {"warm_start": False, "loss_mode": "plain_bce"}),
    Preset("ft", "patch", "FT + IRAT + CLAHE + patch net", "clahe",
           {"warm_start": True, "loss_mode": "plain_bce"}),
    Preset("pkbce", "patch", "PKBCE + FT + IRAT + CLAHE + patch net", "clahe",
           {"warm_start": True, "loss_mode": "pkbce", "irat_enabled": True}),
    Preset("plain_bce", "patch", "full loop with plain BCE", None, {"loss_mode": "plain_bce"}),
    Preset("no_irat", "patch", "full loop with labels frozen at init", None, {"irat_enabled": False}),
    Preset("no_clahe", "patch", "full loop without equalisation", "none"),
    Preset("regular_he", "patch", "full loop with global histogram equalisation", "regular_he"),
)}

ABLATION_ORDER = ("baseline_thumbnail", "clahe", "irat", "ft", "pkbce")
