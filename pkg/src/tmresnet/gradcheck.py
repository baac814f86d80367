"""Central-difference verification of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape
from .nn import BatchNorm2d, Conv2d, Linear, Module, init_parameters
from .stacks import (
    BlockScheme,
    Projection,
    ResidualFunction,
    StageConfig,
    build_model,
    euler_block_forward,
    preset,
    rk_block_forward,
    tm_stage_forward,
)


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_path: str
    tolerance: float
    per_parameter: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _snapshot_buffers(module: Module):
    return [(mod, name, getattr(mod, name).copy()) for _, mod, name in module.named_buffers()]


def _restore_buffers(snap):
    for mod, name, value in snap:
        getattr(mod, name)[...] = value


def grad_check(
    fragment: Module,
    x: np.ndarray,
    tolerance: float = 1e-4,
    samples: int = 64,
    eps: float = 1e-5,
    floor: float = 1e-6,
    seed: int = 0,
    check_input: bool = True,
) -> GradCheckReport:
    """Compare backward() against central differences on a random projection of the output.

    Up to ``samples`` coordinates are drawn per parameter tensor. Relative error
    is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps coordinates whose true
    gradient is ~0 from reporting rounding noise as error. Running with a
    float32 fragment is allowed but the tolerances here assume float64.
    """
    rng = np.random.default_rng(seed)
    dtype = fragment.dtype
    xin = Parameter(np.asarray(x, dtype=dtype), name="input")
    named = list(fragment.named_parameters())
    if check_input:
        named.append(("input", xin))
    snap = _snapshot_buffers(fragment)

    probe = None

    def objective():
        nonlocal probe
        _restore_buffers(snap)
        out = fragment(xin)
        if probe is None:
            probe = rng.standard_normal(out.shape).astype(dtype)
        return ad.sum_all(ad.mul(out, probe))

    for _, p in named:
        p.zero_grad()
    with Tape() as tape:
        loss = objective()
    ad.backward(tape, loss)
    analytic = {path: p.grad.copy() for path, p in named}

    worst, worst_path, per = 0.0, "", {}
    for path, p in named:
        flat = p.data.reshape(-1)
        idx = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
        err = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(objective().data)
            flat[i] = orig - eps
            fm = float(objective().data)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = float(analytic[path].reshape(-1)[i])
            err = max(err, abs(a - num) / max(abs(a), abs(num), floor))
        per[path] = err
        if err > worst or not worst_path:
            worst, worst_path = err, path
    _restore_buffers(snap)
    return GradCheckReport(worst, worst_path, tolerance, per)


# Named fragments ---------------------------------------------------------------


class _EulerBlock(Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.F = ResidualFunction(cin, cout, stride)
        self.proj = Projection(cin, cout, stride) if (stride != 1 or cin != cout) else None

    def forward(self, x):
        return euler_block_forward(self.F, x, self.proj)


class _RKBlock(Module):
    def __init__(self, scheme, channels):
        super().__init__()
        self.scheme = scheme
        self.F = ResidualFunction(channels, channels, 1)

    def forward(self, x):
        return rk_block_forward(self.scheme, self.F, x)


class _TMStage(Module):
    def __init__(self, cin, cout, stride, blocks=4):
        super().__init__()
        self.cfg = StageConfig(cout, blocks, stride)
        self.proj = Projection(cin, cout, stride) if (stride != 1 or cin != cout) else None
        self.blocks = []
        for i in range(blocks):
            F = ResidualFunction(cin if i == 0 else cout, cout, stride if i == 0 else 1)
            self.add_module(f"block{i}", F)
            self.blocks.append(F)

    def forward(self, x):
        return tm_stage_forward(self.cfg, self.blocks, x, self.proj)


class _Head(Module):
    """Flatten-free linear head: global pool then affine map."""

    def __init__(self, channels, classes):
        super().__init__()
        self.fc = Linear(channels, classes)

    def forward(self, x):
        return self.fc(ad.avg_pool_global(x))


def _randomize_bn(module: Module, rng):
    # Non-trivial gamma/beta so their gradients are exercised.
    for _, p in module.named_parameters():
        if p.kind == "bn_gamma":
            p.data = (1.0 + 0.2 * rng.standard_normal(p.shape)).astype(p.dtype)
        elif p.kind in ("bn_beta", "bias"):
            p.data = (0.1 * rng.standard_normal(p.shape)).astype(p.dtype)


TARGETS = (
    "conv",
    "conv-stride2",
    "bn",
    "bn-eval",
    "linear",
    "euler-block",
    "euler-entry-block",
    "ie-block",
    "rk2-block",
    "rk3-block",
    "rk4-block",
    "tm-block",
)


def make_fragment(target: str, seed: int = 0):
    """Return (module, input, default tolerance) for a named grad-check target, in float64."""
    rng = np.random.default_rng(seed)
    tol = 1e-4
    if target == "conv":
        mod, shape = Conv2d(3, 4, 3, 1), (2, 3, 6, 6)
    elif target == "conv-stride2":
        mod, shape = Conv2d(3, 4, 3, 2), (2, 3, 7, 7)
    elif target == "bn":
        mod, shape, tol = BatchNorm2d(3), (4, 3, 3, 3), 1e-3
    elif target == "bn-eval":
        mod, shape = BatchNorm2d(3), (4, 3, 3, 3)
        mod.running_mean[...] = rng.standard_normal(3)
        mod.running_var[...] = 0.5 + rng.random(3)
        mod.eval()
    elif target == "linear":
        mod, shape = _Head(3, 5), (4, 3, 2, 2)
    elif target == "euler-block":
        mod, shape = _EulerBlock(3, 3, 1), (3, 3, 5, 5)
    elif target == "euler-entry-block":
        mod, shape = _EulerBlock(3, 4, 2), (3, 3, 6, 6)
    elif target in ("ie-block", "rk2-block", "rk3-block", "rk4-block"):
        mod, shape = _RKBlock(BlockScheme(target.split("-")[0]), 3), (3, 3, 4, 4)
    elif target == "tm-block":
        mod, shape = _TMStage(2, 3, 2, blocks=4), (3, 2, 6, 6)
    else:
        raise ValueError(f"unknown grad-check target {target!r}; valid: {', '.join(TARGETS)} or a model preset")
    mod.to(np.float64)
    init_parameters(mod, seed)
    _randomize_bn(mod, rng)
    return mod, rng.standard_normal(shape), tol


def make_preset_fragment(name: str, seed: int = 0, image_size: int = 8):
    cfg = preset(name, classes=3, seed=seed)
    model = build_model(cfg, dtype=np.float64)
    _randomize_bn(model, np.random.default_rng(seed))
    x = np.random.default_rng(seed + 1).standard_normal((2, cfg.in_channels, image_size, image_size))
    return model, x, 1e-4
