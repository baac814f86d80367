"""Run configuration, SGD with momentum, and the epoch loop."""
from __future__ import annotations

import configparser
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data_io import (
    MetricsRow,
    append_metrics,
    augment,
    load_cifar10,
    load_mnist_idx,
    normalize,
    save_checkpoint,
    synth_split,
    to_arrays,
)
from .errors import ConfigError
from .stacks import ModelConfig, ResNet, StageConfig, build_model, param_breakdown, param_count, preset

log = logging.getLogger(__name__)

DATASETS = ("synth", "cifar10", "mnist")
SCHEDULES = ("constant", "step")


@dataclass
class RunConfig:
    seed: int = 0
    dataset: str = "synth"
    data_path: str = ""
    synth_n: int = 2000
    synth_test_n: int = 500
    synth_classes: int = 4
    synth_size: int = 16
    synth_channels: int = 3
    # A preset name, or "inline" to build from scheme/channels/blocks/stem_channels.
    model: str = "preactresnet-desk"
    scheme: str = "euler"
    channels: str = "8,16,32"
    blocks: str = "4,4,4"
    stem_channels: int = 8
    epochs: int = 5
    batch_size: int = 64
    eval_batch_size: int = 256
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_schedule: str = "constant"
    lr_step_epochs: int = 30
    lr_step_factor: float = 0.1
    normalize: bool = False
    augment: bool = False
    out_dir: str = "runs/default"
    log_wall_time: bool = False

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.eval_batch_size < 1:
            raise ConfigError("eval_batch_size", "must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr", "must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum", "must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be >= 0")
        if self.dataset not in DATASETS:
            raise ConfigError("dataset", f"must be one of {', '.join(DATASETS)}")
        if self.dataset != "synth" and not self.data_path:
            raise ConfigError("data_path", f"required for dataset {self.dataset}")
        if self.lr_schedule not in SCHEDULES:
            raise ConfigError("lr_schedule", f"must be one of {', '.join(SCHEDULES)}")
        if self.lr_schedule == "step" and self.lr_step_epochs < 1:
            raise ConfigError("lr_step_epochs", "must be >= 1")
        if self.dataset == "synth":
            if self.synth_classes < 2:
                raise ConfigError("synth_classes", "must be >= 2")
            if self.synth_n < 1 or self.synth_test_n < 1:
                raise ConfigError("synth_n", "sample counts must be >= 1")
        self.model_config()

    @property
    def classes(self) -> int:
        return self.synth_classes if self.dataset == "synth" else 10

    @property
    def in_channels(self) -> int:
        return {"synth": self.synth_channels, "cifar10": 3, "mnist": 1}[self.dataset]

    def model_config(self) -> ModelConfig:
        if self.model != "inline":
            return preset(self.model, classes=self.classes, in_channels=self.in_channels, seed=self.seed)
        try:
            chans = [int(c) for c in self.channels.split(",")]
            blocks = [int(b) for b in self.blocks.split(",")]
        except ValueError:
            raise ConfigError("channels", "channels and blocks must be comma-separated integers") from None
        if len(chans) != len(blocks):
            raise ConfigError("blocks", "must list one count per entry of channels")
        stages = tuple(StageConfig(c, b, 1 if i == 0 else 2) for i, (c, b) in enumerate(zip(chans, blocks)))
        return ModelConfig(self.scheme, stages, self.classes, self.stem_channels, self.in_channels, self.seed)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        if self.lr_schedule == "step":
            return self.lr * self.lr_step_factor ** ((epoch - 1) // self.lr_step_epochs)
        return self.lr

    @classmethod
    def paper_full(cls, **overrides) -> "RunConfig":
        """Full-scale CIFAR-10 settings: 120 epochs at batch 256. Not exercised by the tests."""
        base = dict(
            dataset="cifar10",
            data_path="data/cifar-10-batches-bin",
            model="tmresnet22-cifar",
            epochs=120,
            batch_size=256,
            lr=0.1,
            lr_schedule="step",
            lr_step_epochs=40,
            lr_step_factor=0.1,
            normalize=True,
            augment=True,
            out_dir="runs/paper-full",
            log_wall_time=True,
        )
        base.update(overrides)
        return cls(**base)


RUN_PRESETS = {"desk": RunConfig, "paper-full": RunConfig.paper_full}


def _coerce(name: str, ftype, raw: str):
    try:
        if ftype in (bool, "bool"):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if ftype in (int, "int"):
            return int(raw)
        if ftype in (float, "float"):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(name, f"cannot parse {raw!r} as {getattr(ftype, '__name__', ftype)}") from None


def load_run_config(path, **overrides) -> RunConfig:
    """Read a ``[run]`` INI section. Unknown keys are errors; ``base`` picks a preset to start from."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError("config", f"malformed config file: {exc}") from exc
    extra_sections = [s for s in parser.sections() if s != "run"]
    if extra_sections:
        raise ConfigError(extra_sections[0], "unknown section; only [run] is allowed")
    if not parser.has_section("run"):
        raise ConfigError("run", "missing [run] section")
    values = dict(parser.items("run"))
    base = values.pop("base", "desk")
    if base not in RUN_PRESETS:
        raise ConfigError("base", f"unknown run preset {base!r}; valid: {', '.join(RUN_PRESETS)}")
    types = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    kwargs = {}
    for key, raw in values.items():
        if key not in types:
            raise ConfigError(key, "unknown config key")
        kwargs[key] = _coerce(key, types[key], raw)
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    cfg = RUN_PRESETS[base](**kwargs)
    cfg.validate()
    return cfg


def dump_run_config(cfg: RunConfig) -> str:
    lines = ["[run]"]
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


# Optimisation -----------------------------------------------------------------


class SGD:
    """v <- mu v + (g + wd p);  p <- p - lr v."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= (lr * v).astype(p.dtype)


# Data -------------------------------------------------------------------------


def load_data(cfg: RunConfig) -> Tuple[Tuple[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]:
    if cfg.dataset == "synth":
        shape = (cfg.synth_classes, cfg.synth_size, cfg.synth_channels)
        train = synth_split(cfg.seed, "train", cfg.synth_n, *shape)
        test = synth_split(cfg.seed, "test", cfg.synth_test_n, *shape)
    elif cfg.dataset == "cifar10":
        train, test = load_cifar10(cfg.data_path, "train"), load_cifar10(cfg.data_path, "test")
    else:
        train, test = load_mnist_idx(cfg.data_path, "train"), load_mnist_idx(cfg.data_path, "test")
    (xtr, ytr), (xte, yte) = to_arrays(train), to_arrays(test)
    if cfg.normalize:
        xtr, xte = normalize(xtr), normalize(xte)
    return (xtr, ytr), (xte, yte)


def evaluate(model: ResNet, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> Tuple[float, float]:
    """Eval-mode mean loss and accuracy over the whole split, in fixed batch order."""
    model.eval()
    total_loss, correct = 0.0, 0
    for i in range(0, len(y), batch_size):
        xb, yb = x[i : i + batch_size], y[i : i + batch_size]
        logits = model(Tensor(xb.astype(model.dtype, copy=False)))
        total_loss += float(ad.softmax_cross_entropy(logits, yb).data) * len(yb)
        correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
    return total_loss / len(y), correct / len(y)


@dataclass
class TrainResult:
    param_count: int
    history: List[MetricsRow] = field(default_factory=list)
    best_accuracy: float = 0.0
    out_dir: Optional[Path] = None


def train(cfg: RunConfig, data=None) -> TrainResult:
    """Train per ``cfg``; writes metrics.csv, final.ckpt, best.ckpt and summary.json to ``cfg.out_dir``."""
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    if metrics_path.exists():
        metrics_path.unlink()

    (xtr, ytr), (xte, yte) = data if data is not None else load_data(cfg)
    mcfg = cfg.model_config()
    if xtr.shape[1] != mcfg.in_channels:
        raise ConfigError("dataset", f"data has {xtr.shape[1]} channels, model expects {mcfg.in_channels}")
    model = build_model(mcfg)
    n_params = param_count(model)
    log.info("model %s: %d parameters %s", cfg.model, n_params, param_breakdown(model))
    result = TrainResult(n_params, out_dir=out)

    opt = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    step = 0
    best = -1.0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        model.train()
        perm = rng.permutation(len(ytr))
        total_loss, correct = 0.0, 0
        for i in range(0, len(perm), cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            xb, yb = xtr[idx], ytr[idx]
            if cfg.augment:
                xb = augment(xb, rng)
            model.zero_grad()
            with Tape() as tape:
                logits = model(Tensor(xb))
                loss = ad.softmax_cross_entropy(logits, yb)
            ad.backward(tape, loss)
            opt.step(lr)
            step += 1
            total_loss += float(loss.data) * len(yb)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
        train_wall = time.perf_counter() - t0
        test_loss, test_acc = evaluate(model, xte, yte, cfg.eval_batch_size)
        wall = time.perf_counter() - t0
        rows = [
            MetricsRow(epoch, "train", total_loss / len(ytr), correct / len(ytr), lr,
                       train_wall if cfg.log_wall_time else 0.0),
            MetricsRow(epoch, "test", test_loss, test_acc, lr, wall if cfg.log_wall_time else 0.0),
        ]
        for row in rows:
            append_metrics(metrics_path, row)
        result.history.extend(rows)
        log.info("epoch %d: train loss %.4f acc %.4f | test loss %.4f acc %.4f (%.1fs)",
                 epoch, rows[0].loss, rows[0].accuracy, test_loss, test_acc, wall)
        if test_acc > best:
            best = test_acc
            save_checkpoint(model, out / "best.ckpt", step)
    save_checkpoint(model, out / "final.ckpt", step)
    result.best_accuracy = best
    summary = {
        "model": cfg.model,
        "scheme": mcfg.scheme.value,
        "param_count": n_params,
        "param_breakdown": param_breakdown(model),
        "best_test_accuracy": best,
        "steps": step,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return result
