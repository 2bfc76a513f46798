"""Patch scorer: maps one square patch to a disease confidence in (0, 1).

The built-in backbone is a small four-block CNN with a two-logit head. Any
``torch.nn.Module`` that turns a ``(B, C, S, S)`` float batch into ``(B, 2)``
logits can be plugged in through ``BackboneSpec(kind="external_adapter",
factory="package.module:callable")``; the callable receives the spec and
returns the module.
"""

from __future__ import annotations

import hashlib
import importlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import CheckpointError, ConfigError, ContractError, TrainingError

KINDS = ("builtin_small_cnn", "external_adapter")
SCORE_EPS = 1e-7
CKPT_MAGIC = b"PDCKPT\x00\x01"
CKPT_VERSION = 1


@dataclass(frozen=True)
class BackboneSpec:
    kind: str = "builtin_small_cnn"
    input_size: int = 64
    in_channels: int = 1
    widths: tuple[int, ...] = (16, 32, 64, 96)
    pretrained: bool = False
    factory: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        problems = []
        if self.kind not in KINDS:
            problems.append(f"backbone kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "external_adapter" and not self.factory:
            problems.append("external_adapter backbones need factory='module:callable'")
        if self.input_size < 1:
            problems.append("backbone input_size must be >= 1")
        if self.in_channels not in (1, 3):
            problems.append("backbone in_channels must be 1 or 3")
        if problems:
            raise ConfigError(problems)


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64
    epochs: int = 2
    cosine: bool = True
    augment: bool = True

    def __post_init__(self):
        problems = []
        if self.kind not in ("adam", "sgd"):
            problems.append(f"optimizer kind must be adam or sgd, got {self.kind!r}")
        if self.lr < 0:
            problems.append("learning rate must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if problems:
            raise ConfigError(problems)


class SmallCNN(nn.Module):
    def __init__(self, in_channels: int = 1, widths=(16, 32, 64, 96)):
        super().__init__()
        layers = []
        c = in_channels
        for w in widths:
            layers += [
                nn.Conv2d(c, w, 3, padding=1, bias=False),
                nn.BatchNorm2d(w),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
            c = w
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(c, 2)

    def forward(self, x):
        x = self.features(x)
        x = torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)
        return self.head(x)


def build_backbone(spec: BackboneSpec) -> nn.Module:
    if spec.kind == "builtin_small_cnn":
        return SmallCNN(spec.in_channels, spec.widths)
    module_name, _, attr = spec.factory.partition(":")
    try:
        factory = getattr(importlib.import_module(module_name), attr)
    except (ImportError, AttributeError) as exc:
        raise ConfigError([f"cannot import backbone factory {spec.factory!r}: {exc}"]) from exc
    return factory(spec)


@dataclass
class ModelState:
    net: nn.Module
    spec: BackboneSpec
    step: int = 0
    source: str = "init"
    history: list = field(default_factory=list, repr=False)

    def parameter_vector(self) -> np.ndarray:
        return torch.cat([p.detach().flatten() for p in self.net.parameters()]).numpy().copy()


def new_model(spec: BackboneSpec, seed: int = 0) -> ModelState:
    torch.manual_seed(seed)
    return ModelState(build_backbone(spec), spec, 0, f"init-seed{seed}")


def to_tensor(patches: np.ndarray, spec: BackboneSpec) -> torch.Tensor:
    """uint8 ``(k, S, S)`` or ``(k, S, S, C)`` rasters to a normalised float batch."""
    arr = np.asarray(patches)
    if arr.ndim == 3:
        arr = arr[:, None]
    elif arr.ndim == 4:
        arr = arr.transpose(0, 3, 1, 2)
    else:
        raise ContractError(f"expected a batch of 2-D or 3-D rasters, got shape {arr.shape}")
    if arr.shape[2] != spec.input_size or arr.shape[3] != spec.input_size:
        raise ContractError(
            f"patch size {arr.shape[3]}x{arr.shape[2]} does not match backbone input {spec.input_size}"
        )
    if arr.shape[1] != spec.in_channels:
        if spec.in_channels == 3 and arr.shape[1] == 1:
            arr = np.repeat(arr, 3, axis=1)
        elif spec.in_channels == 1 and arr.shape[1] == 3:
            arr = arr.mean(axis=1, keepdims=True)
        else:
            raise ContractError(f"{arr.shape[1]}-channel patches for a {spec.in_channels}-channel backbone")
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
    return (t / 255.0 - 0.5) / 0.25


def _confidence(logits: torch.Tensor) -> np.ndarray:
    diff = (logits[:, 1] - logits[:, 0]).double().numpy()
    g = 0.5 * (1.0 + np.tanh(0.5 * diff))
    return np.clip(g, SCORE_EPS, 1.0 - SCORE_EPS)


@torch.no_grad()
def score_patches(model: ModelState, patches: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Confidence of the "diseased" class for each patch, order preserved.

    Output lies strictly inside (0, 1); extreme logits are clipped to
    ``[1e-7, 1 - 1e-7]``.
    """
    patches = np.asarray(patches)
    if len(patches) == 0:
        return np.empty(0, dtype=np.float64)
    model.net.eval()
    out = []
    for start in range(0, len(patches), batch_size):
        x = to_tensor(patches[start : start + batch_size], model.spec)
        out.append(_confidence(model.net(x)))
    return np.concatenate(out)


def weighted_bce(logits: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Mean of ``-w * [l log g + (1 - l) log(1 - g)]`` with g the softmax "diseased" probability."""
    logp = F.log_softmax(logits.float(), dim=1)
    ll = labels * logp[:, 1] + (1.0 - labels) * logp[:, 0]
    return -(weights * ll).mean()


def make_optimizer(model: ModelState, cfg: OptimizerConfig) -> torch.optim.Optimizer:
    params = model.net.parameters()
    if cfg.kind == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    return torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


def train_step(model: ModelState, optimizer: torch.optim.Optimizer, patches, labels, weights) -> float:
    """One gradient step on a batch; returns the batch loss before the update."""
    n = len(patches)
    if n == 0 or len(labels) != n or len(weights) != n:
        raise ContractError(f"batch sizes differ or are empty: {n}, {len(labels)}, {len(weights)}")
    x = patches if isinstance(patches, torch.Tensor) else to_tensor(patches, model.spec)
    l = torch.as_tensor(np.asarray(labels), dtype=torch.float32)
    w = torch.as_tensor(np.asarray(weights), dtype=torch.float32)
    model.net.train()
    optimizer.zero_grad(set_to_none=True)
    loss = weighted_bce(model.net(x), l, w)
    if not torch.isfinite(loss):
        raise TrainingError(
            f"non-finite loss {loss.item()} at step {model.step}; "
            f"weights range [{w.min().item():.3g}, {w.max().item():.3g}], batch {n}"
        )
    loss.backward()
    optimizer.step()
    model.step += 1
    return float(loss.item())


def _augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    k = int(torch.randint(0, 4, (1,), generator=gen))
    if k:
        x = torch.rot90(x, k, dims=(2, 3))
    if int(torch.randint(0, 2, (1,), generator=gen)):
        x = torch.flip(x, dims=(3,))
    return x


def fit(model: ModelState, patches: np.ndarray, labels, weights, cfg: OptimizerConfig, seed: int = 0) -> float:
    """Run ``cfg.epochs`` shuffled passes; returns the mean loss of the last pass.

    The learning rate follows a cosine decay over all steps of this call.
    """
    n = len(patches)
    if n == 0:
        raise ContractError("no training patches")
    labels = np.asarray(labels, dtype=np.float32)
    weights = np.asarray(weights, dtype=np.float32)
    data = to_tensor(patches, model.spec)
    opt = make_optimizer(model, cfg)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = max(cfg.epochs * steps_per_epoch, 1)
    gen = torch.Generator().manual_seed(seed)
    last = float("nan")
    it = 0
    for _ in range(cfg.epochs):
        order = torch.randperm(n, generator=gen)
        losses = []
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            if cfg.cosine:
                for group in opt.param_groups:
                    group["lr"] = 0.5 * cfg.lr * (1.0 + math.cos(math.pi * it / total))
            x = data[idx]
            if cfg.augment:
                x = _augment(x, gen)
            losses.append(train_step(model, opt, x, labels[idx.numpy()], weights[idx.numpy()]))
            it += 1
        last = float(np.mean(losses))
    return last


# --------------------------------------------------------------------------
# Checkpoints: magic | u16 version | u32 header length | JSON header | payload
# --------------------------------------------------------------------------


def save_checkpoint(model: ModelState, path: Path, checkpoint_id: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(model.net.state_dict(), buf)
    payload = buf.getvalue()
    header = {
        "format_version": CKPT_VERSION,
        "backbone": asdict(model.spec),
        "step": model.step,
        "checkpoint_id": checkpoint_id or path.stem,
        "source": model.source,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<HI", CKPT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    return path


def read_checkpoint_header(path: Path) -> tuple[dict, bytes]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic)")
    off = len(CKPT_MAGIC)
    try:
        version, hlen = struct.unpack_from("<HI", raw, off)
        off += struct.calcsize("<HI")
        header = json.loads(raw[off : off + hlen])
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header: {exc}") from exc
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    payload = raw[off + hlen :]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch (truncated or corrupt)")
    return header, payload


def load_checkpoint(path: Path) -> ModelState:
    header, payload = read_checkpoint_header(path)
    bb = dict(header["backbone"])
    spec = BackboneSpec(**bb)
    net = build_backbone(spec)
    try:
        state = torch.load(io.BytesIO(payload), weights_only=True)
        net.load_state_dict(state)
    except Exception as exc:
        raise CheckpointError(f"{path}: cannot restore parameters: {exc}") from exc
    net.eval()
    return ModelState(net, spec, int(header["step"]), header["checkpoint_id"])
