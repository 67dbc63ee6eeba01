"""Pre-training loop, learning-rate schedule, linear probing and ablation runs."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_model, restore_optimizer, save_checkpoint
from .model import PROFILES, EncoderOnly, ModelConfig, SceneMAE
from .pipeline import (
    ObjectiveSettings,
    PreparedScene,
    batch_objective,
    plan_for,
    prepare_scene,
    probe_targets,
    scene_tensors,
)
from .teacher import load_dataset

log = logging.getLogger(__name__)


class NumericAbortError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, snapshot_path=None):
        super().__init__(message)
        self.snapshot_path = snapshot_path


class StratificationError(ValueError):
    """A probe class occurs in the test split but never in the train split."""


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 64
    base_lr: float = 5e-4
    weight_decay: float = 5e-2
    warmup_epochs: float = 10
    drop_path: float = 0.1
    r_w: float = 0.7
    r_f: float = 0.8
    r_d: float = 0.4
    ratio_over: str = "remaining"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: str | None = None
    checkpoint_every: int = 0  # epochs between checkpoints; 0 keeps only the initial and final ones
    tau: float = 0.5
    beta: float = 1.0
    grad_clip: float | None = None
    semantic_masking: bool = True
    scene_distill: bool = True
    object_distill: bool = True
    max_steps: int | None = None
    resample_masks: bool = True  # False: one fixed plan per scene, for overfitting a fixed batch
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.base_lr <= 0 or self.weight_decay < 0:
            raise ValueError("base_lr must be positive and weight_decay non-negative")
        if not (0 <= self.r_d < 1 and 0 <= self.r_w <= self.r_f <= 1):
            raise ValueError("masking ratios must satisfy 0 <= r_w <= r_f <= 1 and 0 <= r_d < 1")
        if self.ratio_over not in ("remaining", "all"):
            raise ValueError(f"ratio_over must be 'remaining' or 'all', got {self.ratio_over!r}")

    def objective(self) -> ObjectiveSettings:
        return ObjectiveSettings(r_w=self.r_w, r_f=self.r_f, r_d=self.r_d, ratio_over=self.ratio_over,
                                 semantic_masking=self.semantic_masking, scene_distill=self.scene_distill,
                                 object_distill=self.object_distill, beta=self.beta)

    def model_config(self) -> ModelConfig:
        return replace(self.model, drop_path=self.drop_path)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        if isinstance(d.get("model"), str):
            d["model"] = PROFILES[d["model"]]
        elif isinstance(d.get("model"), dict):
            d["model"] = ModelConfig.from_dict(d["model"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        cfg = cls(**d)
        cfg.validate()
        return cfg


def desk_config(**overrides) -> TrainConfig:
    """Laptop-sized profile: 64-dim model, 64 patches of 16 points, batch 8, 50 epochs."""
    base = TrainConfig(epochs=50, batch_size=8, model=PROFILES["desk"])
    return replace(base, **overrides)


def tiny_config(**overrides) -> TrainConfig:
    base = TrainConfig(epochs=300, batch_size=8, warmup_epochs=10, drop_path=0.0, model=PROFILES["tiny"])
    return replace(base, **overrides)


# ---------------------------------------------------------------------------
# schedule and optimizer


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup to ``base_lr`` over ``warmup_steps`` steps, then cosine decay reaching 0 at the last step."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    start = max(warmup_steps - 1, 0)
    span = total_steps - 1 - start
    if span <= 0:
        return base_lr
    progress = min((step - start) / span, 1.0)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


def _no_decay(name: str, p) -> bool:
    return p.ndim <= 1 or name.endswith(".bias") or "mask_token" in name


def build_optimizer(model: nn.Module, config: TrainConfig) -> torch.optim.AdamW:
    """AdamW; biases, norm parameters and the mask token are excluded from weight decay."""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if p.requires_grad:
            (no_decay if _no_decay(name, p) else decay).append(p)
    groups = [
        {"params": decay, "weight_decay": config.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=config.base_lr, betas=tuple(config.betas), eps=config.eps)


# ---------------------------------------------------------------------------
# pre-training


def prepare_all(scenes, model_config: ModelConfig, tau: float = 0.5) -> list:
    m, k = model_config.patch_count, model_config.patch_size
    return [s if isinstance(s, PreparedScene) else prepare_scene(s, m, k, tau) for s in scenes]


def steps_per_epoch(n_scenes: int, batch_size: int) -> int:
    return math.ceil(n_scenes / batch_size)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 7]).permutation(n)


@dataclass
class PretrainResult:
    model: SceneMAE
    metrics: list
    checkpoint: Path | None
    out_dir: Path | None
    steps: int


def _write_snapshot(out_dir, step, epoch, batch_scenes, plans, report):
    snap = {
        "step": step,
        "epoch": epoch,
        "scene_ids": [s.scene_id for s in batch_scenes],
        "plans": [p.state.tolist() for p in plans],
        "losses": {k: float(getattr(report, k).detach()) for k in ("l_mae", "l_scene", "l_object", "l_total")},
    }
    if out_dir is None:
        return None
    path = Path(out_dir) / "abort_snapshot.json"
    path.write_text(json.dumps(snap, indent=1) + "\n")
    return path


def pretrain(config: TrainConfig, scenes=None, out_dir=None, resume=None, model=None) -> PretrainResult:
    """Pre-train a :class:`SceneMAE` and return it with its per-step metrics.

    ``scenes`` may be scene records or prepared scenes; when omitted the
    dataset at ``config.dataset`` is loaded. With ``out_dir`` set, metrics go
    to ``metrics.jsonl`` (one record per step) and checkpoints to
    ``checkpoints/step_XXXXXXX``; an initial checkpoint is always written.
    ``resume`` points at a full checkpoint of an earlier run with the same config.
    """
    config.validate()
    if scenes is None:
        if config.dataset is None:
            raise ValueError("no scenes given and config.dataset is unset")
        scenes = load_dataset(config.dataset)
    mcfg = config.model_config()
    scenes = prepare_all(scenes, mcfg, config.tau)
    if not scenes:
        raise ValueError("empty dataset")
    settings = config.objective()

    spe = steps_per_epoch(len(scenes), config.batch_size)
    total = config.epochs * spe
    if config.max_steps is not None:
        total = min(total, config.max_steps)
    warmup = round(config.warmup_epochs * spe)

    torch.manual_seed(config.seed)
    start_step = 0
    if model is None:
        model = SceneMAE(mcfg)
    optimizer = build_optimizer(model, config)
    if resume is not None:
        model, ck = load_model(resume)
        optimizer = build_optimizer(model, config)
        restore_optimizer(optimizer, model, ck)
        start_step = int(ck["manifest"]["meta"]["step"])

    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "a" if resume is not None else "w")

    def checkpoint(step):
        if out is None:
            return None
        meta = {"step": step, "epoch": step // spe, "train_config": config.to_dict()}
        return save_checkpoint(out / "checkpoints" / f"step_{step:07d}", model, optimizer, meta)

    last_ckpt = checkpoint(start_step) if resume is None else Path(resume)
    metrics = []
    cadence = config.checkpoint_every * spe
    model.train()
    try:
        for step in range(start_step, total):
            t0 = time.perf_counter()
            epoch, pos = divmod(step, spe)
            order = epoch_order(config.seed, epoch, len(scenes))
            idx = order[pos * config.batch_size:(pos + 1) * config.batch_size]
            batch = [scenes[j] for j in idx]
            plan_seed = (lambda j: [config.seed, step, j]) if config.resample_masks else (lambda j: [config.seed, j])
            plans = [plan_for(s, settings, plan_seed(int(j))) for s, j in zip(batch, idx)]
            lr = lr_at(step, total, warmup, config.base_lr)
            for g in optimizer.param_groups:
                g["lr"] = lr

            report = batch_objective(model, batch, plans, settings)
            if not torch.isfinite(report.l_total):
                snap = _write_snapshot(out, step, epoch, batch, plans, report)
                raise NumericAbortError(f"non-finite loss at step {step}", snap)
            optimizer.zero_grad(set_to_none=True)
            report.l_total.backward()
            if config.grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()

            rec = {"step": step + 1, "epoch": epoch}
            rec.update(report.as_floats())
            rec["lr"] = lr
            rec["seconds"] = time.perf_counter() - t0
            metrics.append(rec)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(rec) + "\n")
            if cadence and (step + 1) % cadence == 0 and step + 1 < total:
                last_ckpt = checkpoint(step + 1)
        if total > start_step:
            last_ckpt = checkpoint(total)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    model.eval()
    return PretrainResult(model, metrics, last_ckpt, out, total)


# ---------------------------------------------------------------------------
# linear probe


PROBE_STEPS = 2000


class OracleFeatures:
    """Stands in for an encoder: one-hot ground-truth probe labels as features."""

    def __init__(self, task: str, n_labels: int):
        self.task = task
        self.n_labels = n_labels

    def features(self, scenes) -> np.ndarray:
        y = np.concatenate([probe_targets(s, self.task, self.n_labels) for s in scenes])
        return np.eye(self.n_labels + 1)[y]


def featurize(encoder, scenes, batch_size: int = 16) -> np.ndarray:
    """Frozen per-patch encoder features with every patch visible, shape (sum M, D)."""
    if isinstance(encoder, OracleFeatures):
        return encoder.features(scenes)
    encoder.eval()
    dtype = next(encoder.parameters()).dtype
    feats = []
    with torch.no_grad():
        for i in range(0, len(scenes), batch_size):
            local, centers = scene_tensors(scenes[i:i + batch_size], dtype)
            f = encoder.encode_all(local, centers)
            feats.append(f.reshape(-1, f.shape[-1]).double().numpy())
    return np.concatenate(feats)


@dataclass
class ProbeResult:
    accuracy: float
    train_accuracy: float
    n_train: int
    n_test: int
    task: str


def fit_linear_probe(x_train, y_train, x_test, y_test, n_classes, seed=0, steps=PROBE_STEPS, lr=1e-2,
                     weight_decay=1e-4):
    """Standardize features, fit one affine layer with AdamW (full batch), return (test acc, train acc)."""
    mu = x_train.mean(axis=0)
    sd = x_train.std(axis=0) + 1e-6
    xt = torch.as_tensor((x_train - mu) / sd, dtype=torch.float32)
    xv = torch.as_tensor((x_test - mu) / sd, dtype=torch.float32)
    yt = torch.as_tensor(y_train)
    g = torch.Generator().manual_seed(seed)
    clf = nn.Linear(xt.shape[1], n_classes)
    with torch.no_grad():
        clf.weight.copy_(torch.randn(clf.weight.shape, generator=g) * 0.01)
        clf.bias.zero_()
    opt = torch.optim.AdamW(clf.parameters(), lr=lr, weight_decay=weight_decay)
    for _ in range(steps):
        opt.zero_grad()
        nn.functional.cross_entropy(clf(xt), yt).backward()
        opt.step()
    with torch.no_grad():
        acc = float((clf(xv).argmax(1).numpy() == y_test).mean())
        tr = float((clf(xt).argmax(1).numpy() == y_train).mean())
    return acc, tr


def split_scenes(scenes, train_fraction=0.7):
    n_train = max(1, int(round(len(scenes) * train_fraction)))
    return scenes[:n_train], scenes[n_train:]


def linear_probe(encoder, scenes, task: str = "patch-label", n_labels: int | None = None, seed: int = 0,
                 train_fraction: float = 0.7, steps: int = PROBE_STEPS, lr: float = 1e-2) -> ProbeResult:
    """Linear-probe accuracy of frozen per-patch features on a held-out scene split.

    ``encoder`` is a model with ``encode_all``, a checkpoint path, or
    :class:`OracleFeatures`. Scenes split in order: the first
    ``train_fraction`` train the classifier, the rest measure accuracy.
    """
    if isinstance(encoder, (str, Path)):
        encoder, _ = load_model(encoder)
    if isinstance(encoder, (SceneMAE, EncoderOnly)):
        scenes = prepare_all(scenes, encoder.config)
    else:
        scenes = prepare_all(scenes, PROFILES["desk"])
    if n_labels is None:
        n_labels = int(max(int(s.patch_label.max()) for s in scenes)) + 1
        n_labels = max(n_labels, 1)
    train, test = split_scenes(scenes, train_fraction)
    if not test:
        raise ValueError("probe needs at least two scenes")
    y_train = np.concatenate([probe_targets(s, task, n_labels) for s in train])
    y_test = np.concatenate([probe_targets(s, task, n_labels) for s in test])
    keep_train, keep_test = y_train >= 0, y_test >= 0
    y_train, y_test = y_train[keep_train], y_test[keep_test]
    if not len(y_train) or not len(y_test):
        raise StratificationError("no labeled patches in one of the splits")
    missing = set(np.unique(y_test)) - set(np.unique(y_train))
    if missing:
        raise StratificationError(f"classes {sorted(int(m) for m in missing)} absent from the train split")
    n_classes = {"patch-foreground": 2, "patch-label": n_labels}.get(task, n_labels + 1)
    x_train, x_test = featurize(encoder, train)[keep_train], featurize(encoder, test)[keep_test]
    acc, tr = fit_linear_probe(x_train, y_train, x_test, y_test, n_classes,
                               seed=seed, steps=steps, lr=lr)
    return ProbeResult(acc, tr, len(y_train), len(y_test), task)


# ---------------------------------------------------------------------------
# ablation


ABLATION_ROWS = (
    # name, semantic_masking, scene_distill, object_distill
    ("point_mae", False, False, False),
    ("semantic_masking", True, False, False),
    ("semantic_masking+scene", True, True, False),
    ("full", True, True, True),
)


def ablate(config: TrainConfig, scenes, probe_scenes, rows=ABLATION_ROWS, seeds=(0,), task="patch-label",
           n_labels=None, out_dir=None, include_random_init=False, probe_steps=PROBE_STEPS) -> list:
    """Pre-train and probe once per (row, seed); returns one dict per row with per-seed and mean accuracy."""
    scenes = prepare_all(scenes, config.model_config(), config.tau)
    probe_scenes = prepare_all(probe_scenes, config.model_config(), config.tau)
    table = []
    all_rows = list(rows)
    if include_random_init:
        all_rows = [("random_init", None, None, None)] + all_rows
    for name, sem, scn, obj in all_rows:
        accs = []
        for seed in seeds:
            if name == "random_init":
                torch.manual_seed(seed)
                model = SceneMAE(config.model_config())
            else:
                cfg = replace(config, seed=seed, semantic_masking=sem, scene_distill=scn, object_distill=obj)
                row_dir = Path(out_dir) / f"{name}_seed{seed}" if out_dir is not None else None
                model = pretrain(cfg, scenes, row_dir).model
            accs.append(linear_probe(model, probe_scenes, task, n_labels, seed=seed, steps=probe_steps).accuracy)
            log.info("ablation %s seed %d: %.4f", name, seed, accs[-1])
        table.append({
            "row": name,
            "semantic_masking": sem,
            "scene_distill": scn,
            "object_distill": obj,
            "accuracy": accs,
            "mean_accuracy": float(np.mean(accs)),
        })
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.json").write_text(json.dumps(table, indent=1) + "\n")
    return table
