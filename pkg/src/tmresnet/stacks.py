"""Residual networks whose block-to-block wiring follows an ODE integrator.

* Euler stacking: ``x + F(x)`` (pre-activation ResNet).
* RK stacking: one shared residual function evaluated at each Runge-Kutta stage.
* TM stacking: three Euler "boot" blocks seed a three-state history, then
  ``x_next = 3/2 x - x_prev + 1/2 x_prev2 + F(x)``.

Every stage that changes shape opens with a projection shortcut
(1x1 strided conv + BN); multistep histories never cross stages.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, InsufficientBlocks, ShapeMismatch
from .nn import BatchNorm2d, Conv2d, Linear, Module, init_parameters
from .ode_core import TABLEAUX, TM_STATE_COEFFS, IntegratorId, tm_combine

__all__ = [
    "BlockScheme",
    "SchemeCoefficients",
    "SCHEMES",
    "StageConfig",
    "ModelConfig",
    "ResidualFunction",
    "Projection",
    "TmActivationHistory",
    "euler_block_forward",
    "rk_block_forward",
    "tm_block_forward",
    "tm_stage_forward",
    "ResNet",
    "build_model",
    "param_count",
    "param_breakdown",
    "forward",
    "predict",
    "PRESETS",
    "preset",
    "model_depth",
]


class BlockScheme(str, enum.Enum):
    EULER = "euler"
    IE = "ie"
    RK2 = "rk2"
    RK3 = "rk3"
    RK4 = "rk4"
    TM = "tm"


@dataclass(frozen=True)
class SchemeCoefficients:
    """Exact coefficients of a stacking rule.

    ``state`` weights the current and past block states (newest first);
    ``a``/``b`` are the stage tableau applied to evaluations of the residual
    function, each scaled by tau.
    """

    state: Tuple[Fraction, ...]
    a: Tuple[Tuple[Fraction, ...], ...]
    b: Tuple[Fraction, ...]

    @property
    def stages(self) -> int:
        return len(self.b)


def _from_tableau(method: IntegratorId) -> SchemeCoefficients:
    t = TABLEAUX[method]
    return SchemeCoefficients((Fraction(1),), t.a, t.b)


SCHEMES = {
    BlockScheme.EULER: SchemeCoefficients((Fraction(1),), ((),), (Fraction(1),)),
    BlockScheme.IE: _from_tableau(IntegratorId.IMPROVED_EULER),
    BlockScheme.RK2: _from_tableau(IntegratorId.RK2_RALSTON),
    BlockScheme.RK3: _from_tableau(IntegratorId.HEUN3),
    BlockScheme.RK4: _from_tableau(IntegratorId.RK4_CLASSICAL),
    BlockScheme.TM: SchemeCoefficients(TM_STATE_COEFFS, ((),), (Fraction(1),)),
}


# Building blocks --------------------------------------------------------------


class ResidualFunction(Module):
    """BN -> ReLU -> Conv3x3(stride) -> BN -> ReLU -> Conv3x3."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.bn1 = BatchNorm2d(in_channels)
        self.conv1 = Conv2d(in_channels, out_channels, 3, stride)
        self.bn2 = BatchNorm2d(out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, 3, 1)

    @property
    def shape_preserving(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv1(ad.relu(self.bn1(x)))
        return self.conv2(ad.relu(self.bn2(h)))


class Projection(Module):
    """1x1 strided conv + BN on the skip path."""

    def __init__(self, in_channels: int, out_channels: int, stride: int):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 1, stride, padding=0)
        self.bn = BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x))


def _check_same(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what}: {a.shape} vs {b.shape}")


def euler_block_forward(F: ResidualFunction, x: Tensor, projection: Optional[Projection] = None, tau: float = 1.0):
    """x + tau F(x), or proj(x) + tau F(x) at a stage entry."""
    fx = F(x)
    skip = projection(x) if projection is not None else x
    _check_same(skip, fx, "residual branch does not match skip path")
    return skip + (fx if tau == 1.0 else tau * fx)


def rk_block_forward(scheme: BlockScheme, F: ResidualFunction, x: Tensor, tau: float = 1.0) -> Tensor:
    """One Runge-Kutta step of the residual function; every stage reuses ``F``."""
    coeffs = SCHEMES[BlockScheme(scheme)]
    if BlockScheme(scheme) is BlockScheme.TM:
        raise ValueError("TM stacking needs a history; use tm_block_forward")
    ks: List[Tensor] = []
    for i in range(coeffs.stages):
        inp = x
        terms = [(float(aij), k) for aij, k in zip(coeffs.a[i], ks) if aij != 0]
        if terms:
            incr = _weighted_sum(terms)
            inp = x + (tau * incr if tau != 1.0 else incr)
        k = F(inp)
        _check_same(k, x, "RK stage output does not match block input")
        ks.append(k)
    slope = _weighted_sum([(float(bi), k) for bi, k in zip(coeffs.b, ks) if bi != 0])
    return x + (tau * slope if tau != 1.0 else slope)


def _weighted_sum(terms):
    acc = None
    for w, k in terms:
        term = k if w == 1.0 else w * k
        acc = term if acc is None else acc + term
    return acc


@dataclass
class TmActivationHistory:
    x_cur: Tensor
    x_prev: Tensor
    x_prev2: Tensor

    def __post_init__(self):
        if not (self.x_cur.shape == self.x_prev.shape == self.x_prev2.shape):
            raise ShapeMismatch(
                f"TM history shapes differ: {self.x_prev2.shape}, {self.x_prev.shape}, {self.x_cur.shape}"
            )


def tm_block_forward(history: TmActivationHistory, F: ResidualFunction, tau: float = 1.0):
    """Return (x_next, shifted history) for one Taylor-multistep block."""
    fx = F(history.x_cur)
    _check_same(fx, history.x_cur, "TM residual branch is not shape preserving")
    combined = tm_combine(history.x_cur, history.x_prev, history.x_prev2)
    x_next = combined + (fx if tau == 1.0 else tau * fx)
    return x_next, TmActivationHistory(x_next, history.x_cur, history.x_prev)


def tm_stage_forward(
    stage: "StageConfig",
    blocks: Sequence[ResidualFunction],
    x_in: Tensor,
    projection: Optional[Projection] = None,
    tau: float = 1.0,
) -> Tensor:
    """Boot TM-block (three Euler blocks) followed by Taylor-multistep blocks."""
    if len(blocks) != stage.blocks:
        raise ValueError(f"stage declares {stage.blocks} blocks, got {len(blocks)}")
    if len(blocks) < 4:
        raise InsufficientBlocks(f"a TM stage needs at least 4 blocks (3 boot + 1 TM), got {len(blocks)}")
    x1 = euler_block_forward(blocks[0], x_in, projection, tau)
    x2 = euler_block_forward(blocks[1], x1, None, tau)
    x3 = euler_block_forward(blocks[2], x2, None, tau)
    history = TmActivationHistory(x3, x2, x1)
    x = x3
    for F in blocks[3:]:
        x, history = tm_block_forward(history, F, tau)
    return x


# Configuration ----------------------------------------------------------------


@dataclass(frozen=True)
class StageConfig:
    channels: int
    blocks: int
    stride: int = 1


@dataclass(frozen=True)
class ModelConfig:
    scheme: BlockScheme
    stages: Tuple[StageConfig, ...]
    classes: int = 10
    stem_channels: int = 64
    in_channels: int = 3
    seed: int = 0
    tau: float = 1.0

    def __post_init__(self):
        try:
            object.__setattr__(self, "scheme", BlockScheme(self.scheme))
        except ValueError:
            raise ConfigError("scheme", f"unknown scheme {self.scheme!r}") from None
        object.__setattr__(
            self, "stages", tuple(s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages)
        )
        self.validate()

    def validate(self):
        if not self.stages:
            raise ConfigError("stages", "at least one stage is required")
        prev = 0
        for i, s in enumerate(self.stages):
            if s.blocks < 1:
                raise ConfigError(f"stages[{i}].blocks", "must be >= 1")
            if s.channels < 1:
                raise ConfigError(f"stages[{i}].channels", "must be >= 1")
            if s.channels < prev:
                raise ConfigError(f"stages[{i}].channels", "stage channels must be non-decreasing")
            if s.stride not in (1, 2):
                raise ConfigError(f"stages[{i}].stride", "must be 1 or 2")
            prev = s.channels
        if self.classes < 2:
            raise ConfigError("classes", "must be >= 2")
        if self.stem_channels < 1:
            raise ConfigError("stem_channels", "must be >= 1")
        if self.in_channels < 1:
            raise ConfigError("in_channels", "must be >= 1")
        if self.tau != 1.0:
            raise ConfigError("tau", "network step size is fixed at 1.0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scheme"] = self.scheme.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {"scheme", "stages", "classes", "stem_channels", "in_channels", "seed", "tau"}
        extra = set(d) - known
        if extra:
            raise ConfigError(sorted(extra)[0], "unknown model config key")
        stages = []
        for i, s in enumerate(d.get("stages", ())):
            if not isinstance(s, dict) or set(s) - {"channels", "blocks", "stride"}:
                raise ConfigError(f"stages[{i}]", "expected {channels, blocks, stride}")
            stages.append(StageConfig(**s))
        return cls(**{**d, "stages": tuple(stages)})

    def with_(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), "scheme": self.scheme, "stages": self.stages, **changes})


def model_depth(config: ModelConfig) -> int:
    """Weighted conv/linear layers on the main path: stem + 2 per block + classifier."""
    return 2 + 2 * sum(s.blocks for s in config.stages)


# Model ------------------------------------------------------------------------


class Stage(Module):
    def __init__(self, scheme: BlockScheme, cfg: StageConfig, in_channels: int, tau: float):
        super().__init__()
        self.scheme = scheme
        self.cfg = cfg
        self.tau = tau
        needs_proj = cfg.stride != 1 or in_channels != cfg.channels
        self.projection = Projection(in_channels, cfg.channels, cfg.stride) if needs_proj else None
        self.blocks = []
        for i in range(cfg.blocks):
            F = ResidualFunction(in_channels if i == 0 else cfg.channels, cfg.channels, cfg.stride if i == 0 else 1)
            self.add_module(f"block{i}", F)
            self.blocks.append(F)
        # Stages too short for a boot block plus one TM block fall back to Euler stacking.
        self.uses_tm = scheme is BlockScheme.TM and cfg.blocks >= 4

    def forward(self, x: Tensor) -> Tensor:
        if self.uses_tm:
            return tm_stage_forward(self.cfg, self.blocks, x, self.projection, self.tau)
        for i, F in enumerate(self.blocks):
            if i == 0 and self.projection is not None:
                x = euler_block_forward(F, x, self.projection, self.tau)
            elif self.scheme in (BlockScheme.EULER, BlockScheme.TM):
                x = euler_block_forward(F, x, None, self.tau)
            else:
                x = rk_block_forward(self.scheme, F, x, self.tau)
        return x


class ResNet(Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.stem = Conv2d(config.in_channels, config.stem_channels, 3, 1)
        ch = config.stem_channels
        self.stages = []
        for i, s in enumerate(config.stages):
            stage = Stage(config.scheme, s, ch, config.tau)
            self.add_module(f"stage{i + 1}", stage)
            self.stages.append(stage)
            ch = s.channels
        self.bn = BatchNorm2d(ch)
        self.fc = Linear(ch, config.classes)

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeMismatch(
                f"model expects (N, {self.config.in_channels}, H, W) input, got {x.shape}"
            )
        h = self.stem(x)
        for stage in self.stages:
            h = stage(h)
        h = ad.relu(self.bn(h))
        return self.fc(ad.avg_pool_global(h))


def build_model(config: ModelConfig, dtype=np.float32) -> ResNet:
    config.validate()
    model = ResNet(config)
    model.to(dtype)
    init_parameters(model, config.seed)
    for path, p in model.named_parameters():
        p.name = path
    return model


def param_count(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


def param_breakdown(model: ResNet) -> dict:
    """Parameter counts per top-level component (stem, stage1.., bn, fc)."""
    out = {}
    for name, mod in model._modules.items():
        out[name] = param_count(mod)
    return out


def forward(model: ResNet, batch) -> np.ndarray:
    return model(batch).data


def predict(model: ResNet, batch) -> np.ndarray:
    """Arg-max class per row; ties go to the lowest index."""
    return np.argmax(forward(model, batch), axis=1)


# Presets ----------------------------------------------------------------------

_CIFAR_CHANNELS = (64, 128, 256, 512)


def _plan(blocks, channels=_CIFAR_CHANNELS):
    return tuple(StageConfig(c, b, 1 if i == 0 else 2) for i, (c, b) in enumerate(zip(channels, blocks)))


PRESETS = {
    "preactresnet18-cifar": (BlockScheme.EULER, _plan((2, 2, 2, 2)), 64),
    "preactresnet34-cifar": (BlockScheme.EULER, _plan((3, 4, 6, 3)), 64),
    # Depth 2 + 2 * sum(blocks) matches the name; stages under 4 blocks run Euler stacking.
    "tmresnet22-cifar": (BlockScheme.TM, _plan((4, 2, 2, 2)), 64),
    "tmresnet36-cifar": (BlockScheme.TM, _plan((4, 4, 6, 3)), 64),
    "rkresnet-ie-18": (BlockScheme.IE, _plan((2, 2, 2, 2)), 64),
    "rkresnet-rk2-18": (BlockScheme.RK2, _plan((2, 2, 2, 2)), 64),
    "rkresnet-rk3-18": (BlockScheme.RK3, _plan((2, 2, 2, 2)), 64),
    "rkresnet-rk4-18": (BlockScheme.RK4, _plan((2, 2, 2, 2)), 64),
    # Desk-scale pair for smoke training.
    "preactresnet-desk": (BlockScheme.EULER, _plan((4, 4, 4), (8, 16, 32)), 8),
    "tmresnet-desk": (BlockScheme.TM, _plan((4, 4, 4), (8, 16, 32)), 8),
}


def preset(name: str, classes: int = 10, in_channels: int = 3, seed: int = 0) -> ModelConfig:
    try:
        scheme, stages, stem = PRESETS[name]
    except KeyError:
        raise ConfigError("preset", f"unknown preset {name!r}; valid: {', '.join(PRESETS)}") from None
    return ModelConfig(scheme, stages, classes, stem, in_channels, seed)
