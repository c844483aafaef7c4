"""Two-stage training: task-only, then StyleLess insertion and joint fine-tuning."""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Dataset, load_dataset
from .layer import insert_styleless
from .model import ToySegNet, load_checkpoint, read_manifest, save_checkpoint
from .nn import SgdConfig, lr_at, sgd_step
from .style import gram_loss
from .tensor import Tape, backward, softmax_cross_entropy


class TrainingError(RuntimeError):
    def __init__(self, msg: str, step: int | None = None):
        super().__init__(msg if step is None else f"{msg} (step {step})")
        self.step = step


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 20
    batch_size: int = 8
    sgd: SgdConfig = field(default_factory=SgdConfig)
    alpha: float = 0.1
    styleless_lr_mult: float = 10.0
    seed: int = 0
    data: str | None = None
    crop_size: int = 48

    def __post_init__(self):
        if isinstance(self.sgd, dict):
            self.sgd = SgdConfig(**self.sgd)
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.crop_size % 4:
            raise ValueError("crop size must be a multiple of 4")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def append(self, rec: dict) -> None:
        if self.records and rec["step"] <= self.records[-1]["step"]:
            raise ValueError("TrainLog steps must increase")
        self.records.append(rec)

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.records])

    def to_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for r in self.records:
                f.write(json.dumps(r, sort_keys=True) + "\n")
            f.write(json.dumps({"final": self.final, "wall_clock": self.wall_clock}, sort_keys=True) + "\n")


@dataclass
class TrainResult:
    net: ToySegNet
    log: TrainLog
    config: TrainConfig
    stage: int

    def save(self, path) -> Path:
        path = save_checkpoint(self.net, path, stage=self.stage, seed=self.config.seed,
                               config_hash=self.config.digest())
        self.log.to_jsonl(path / "trainlog.jsonl")
        (path / "config.json").write_text(json.dumps(self.config.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def _crops(ds: Dataset, idx: np.ndarray, size: int, rng) -> tuple[np.ndarray, np.ndarray]:
    h, w = ds.images.shape[-2:]
    oy = rng.integers(0, h - size + 1, len(idx))
    ox = rng.integers(0, w - size + 1, len(idx))
    x = np.stack([ds.images[i, :, a : a + size, b : b + size] for i, a, b in zip(idx, oy, ox)])
    y = np.stack([ds.labels[i, a : a + size, b : b + size] for i, a, b in zip(idx, oy, ox)])
    return x, y


def _fit(net: ToySegNet, ds: Dataset, cfg: TrainConfig, stage: int, use_gram: bool | None = None) -> TrainLog:
    n = len(ds)
    if n == 0:
        raise TrainingError("empty training set")
    per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * per_epoch
    sgd = replace(cfg.sgd, total_steps=total,
                  group_lr_mult={"backbone": 1.0, "styleless": cfg.styleless_lr_mult})
    params = net.parameters()
    velocity: dict = {}
    rng = np.random.default_rng([cfg.seed, stage])
    log = TrainLog()
    t0 = time.perf_counter()
    if use_gram is None:
        use_gram = stage == 2
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for b in range(per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            x, y = _crops(ds, idx, cfg.crop_size, rng)
            with Tape():
                out = net.forward(x, grams=use_gram)
                task = softmax_cross_entropy(out.logits, y)
                if use_gram:
                    lg = gram_loss(out.gram_pairs)
                    loss = task + lg * cfg.alpha
                else:
                    lg, loss = None, task
                vals = (task.item(), lg.item() if lg is not None else 0.0, loss.item())
                if not all(np.isfinite(vals)):
                    raise TrainingError(f"non-finite loss {vals}", step)
                grads = backward(loss)
            lr = lr_at(sgd, step)
            sgd_step(params, grads, sgd, step, velocity)
            log.append({"step": step, "epoch": epoch, "L_task": vals[0], "L_gram": vals[1],
                        "L_total": vals[2], "lr": lr})
            step += 1
    log.wall_clock = time.perf_counter() - t0
    ep = log.column("epoch")
    last = ep == ep.max()
    log.final = {"L_task": float(log.column("L_task")[last].mean()),
                 "L_gram": float(log.column("L_gram")[last].mean()),
                 "steps": step}
    return log


def _dataset(data) -> Dataset:
    if isinstance(data, Dataset):
        return data
    if data is None:
        raise TrainingError("no training data given")
    return load_dataset(data)


def train_stage1(net: ToySegNet, cfg: TrainConfig, data=None) -> TrainResult:
    """Train the backbone on the task loss only."""
    if cfg.stage != 1:
        cfg = replace(cfg, stage=1)
    if net.styleless:
        raise TrainingError("stage 1 trains a plain backbone; this network has StyleLess layers")
    ds = _dataset(data if data is not None else cfg.data)
    log = _fit(net, ds, cfg, 1)
    return TrainResult(net, log, cfg, 1)


def train_stage2(ckpt, cfg: TrainConfig, data=None) -> TrainResult:
    """Insert StyleLess layers into a stage-1 model and fine-tune everything on
    L_task + alpha * L_Gram. ``ckpt`` is a stage-1 TrainResult or checkpoint path."""
    if cfg.stage != 2:
        cfg = replace(cfg, stage=2)
    if isinstance(ckpt, TrainResult):
        if ckpt.stage != 1:
            raise TrainingError("stage 2 needs a stage-1 model")
        base = ckpt.net
    elif isinstance(ckpt, (str, Path)):
        man = read_manifest(ckpt)
        if man.get("insertion_map"):
            raise TrainingError("checkpoint already contains StyleLess layers")
        if man.get("stage") != 1:
            raise TrainingError(f"checkpoint is stage {man.get('stage')}, expected 1")
        base, _ = load_checkpoint(ckpt)
    else:
        raise TrainingError("stage 2 requires a stage-1 checkpoint; joint training from scratch is not supported")
    if base.styleless:
        raise TrainingError("checkpoint already contains StyleLess layers")
    net = insert_styleless(base, seed=cfg.seed)
    ds = _dataset(data if data is not None else cfg.data)
    log = _fit(net, ds, cfg, 2)
    return TrainResult(net, log, cfg, 2)
