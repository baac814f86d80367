"""Command-line entry point.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import ode_core
from .data_io import (
    load_checkpoint,
    load_cifar10,
    load_mnist_idx,
    normalize,
    synth_split,
    to_arrays,
)
from .errors import ConfigError, TmResnetError
from .gradcheck import TARGETS, grad_check, make_fragment, make_preset_fragment
from .stacks import PRESETS, build_model, model_depth, param_breakdown, param_count, preset
from .training import load_run_config, evaluate, train

log = logging.getLogger("tmresnet")

OUT_ENV = "TMRESNET_OUT_DIR"
DEFAULT_TAUS = "0.1,0.05,0.025,0.0125"


class UsageError(Exception):
    pass


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or "runs")


# bench-ode --------------------------------------------------------------------


def cmd_bench_ode(args) -> int:
    if args.methods.strip().lower() == "all":
        methods = list(ode_core.IntegratorId)
    else:
        try:
            methods = [ode_core.parse_method(m) for m in args.methods.split(",") if m.strip()]
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    if not methods:
        raise UsageError("--methods is empty")
    if args.problem not in ode_core.PROBLEMS:
        raise UsageError(f"unknown problem {args.problem!r}; valid: {', '.join(ode_core.PROBLEMS)}")
    try:
        taus = [float(t) for t in args.taus.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--taus must be comma-separated numbers, got {args.taus!r}") from None
    if len(taus) < 4:
        raise UsageError("--taus needs at least 4 step sizes to fit an order")
    if any(not t > 0 for t in taus):
        raise UsageError("--taus must all be positive")
    if args.bootstrap != "exact":
        try:
            ode_core.parse_method(args.bootstrap)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    csv_path = Path(args.csv) if args.csv else _out_dir(args) / "bench_ode.csv"

    problem = ode_core.make_problem(args.problem)
    t0 = time.perf_counter()
    results = []
    for m in methods:
        boot = args.bootstrap if m is ode_core.IntegratorId.TAYLOR_MULTISTEP else "exact"
        results.append((m, ode_core.empirical_order(m, problem, taus, args.horizon, bootstrap=boot)))
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "tau", "error", "fitted_order"])
        for m, est in results:
            for tau, err in zip(est.taus, est.errors):
                w.writerow([m.value, repr(tau), f"{err:.6e}", ""])
        for m, est in results:
            w.writerow([m.value, "", "", f"{est.slope:.6f}"])
    print(f"problem {problem.name}, horizon {args.horizon}, taus {taus}")
    for m, est in results:
        print(f"{m.value:>6}: fitted order {est.slope:7.4f}  (theoretical {ode_core.GLOBAL_ORDER[m]})")
    print(f"wrote {csv_path} in {time.perf_counter() - t0:.3f}s")
    return 0


# train / eval -----------------------------------------------------------------


def cmd_train(args) -> int:
    if not args.config:
        raise UsageError("train needs --config")
    explicit_out = args.out or os.environ.get(OUT_ENV)
    overrides = {"seed": args.seed_override, "out_dir": str(_out_dir(args)) if explicit_out else None}
    cfg = load_run_config(args.config, **overrides)
    mcfg = cfg.model_config()
    print(f"model={cfg.model} scheme={mcfg.scheme.value} params={param_count(build_model(mcfg))}")
    result = train(cfg)
    last = result.history[-2:]
    for row in last:
        print(f"epoch={row.epoch} split={row.split} loss={row.loss:#.6g} accuracy={row.accuracy:#.6g}")
    print(f"best_accuracy={result.best_accuracy:#.6g} out={result.out_dir}")
    return 0


def _eval_data(args):
    if args.dataset == "synth":
        recs = synth_split(args.seed, args.split, args.synth_n, args.synth_classes, args.synth_size, args.synth_channels)
    elif args.dataset == "cifar10":
        recs = load_cifar10(args.data_path, args.split)
    else:
        recs = load_mnist_idx(args.data_path, args.split)
    x, y = to_arrays(recs)
    if args.normalize:
        x = normalize(x)
    return x, y


def cmd_eval(args) -> int:
    if args.dataset != "synth" and not args.data_path:
        raise UsageError(f"--data-path is required for dataset {args.dataset}")
    model = load_checkpoint(args.checkpoint)
    x, y = _eval_data(args)
    if y.max(initial=0) >= model.config.classes:
        raise ConfigError("dataset", f"labels exceed the model's {model.config.classes} classes")
    loss, acc = evaluate(model, x, y, args.batch_size)
    print(f"loss={loss:#.6g}")
    print(f"accuracy={acc:#.6g}")
    return 0


# count-params -----------------------------------------------------------------


def cmd_count_params(args) -> int:
    if args.preset and args.config:
        raise UsageError("give either --preset or --config, not both")
    if args.preset:
        if args.preset not in PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}; valid: {', '.join(PRESETS)}")
        mcfg = preset(args.preset, classes=args.classes, in_channels=args.in_channels, seed=args.seed)
        name = args.preset
    elif args.config:
        cfg = load_run_config(args.config)
        mcfg = cfg.model_config()
        name = cfg.model
    else:
        raise UsageError("count-params needs --preset or --config")
    model = build_model(mcfg)
    for part, n in param_breakdown(model).items():
        print(f"{part:>8}: {n:,}")
    total = param_count(model)
    print(f"model={name} scheme={mcfg.scheme.value} depth={model_depth(mcfg)} classes={mcfg.classes}")
    print(f"total={total}")
    return 0


# grad-check -------------------------------------------------------------------


def cmd_grad_check(args) -> int:
    if args.target in TARGETS:
        module, x, default_tol = make_fragment(args.target, args.seed)
    elif args.target in PRESETS:
        module, x, default_tol = make_preset_fragment(args.target, args.seed)
    else:
        raise UsageError(f"unknown target {args.target!r}; valid: {', '.join(TARGETS)} or a preset name")
    tol = default_tol if args.tolerance is None else args.tolerance
    if tol < 0:
        raise UsageError("--tolerance must be >= 0")
    report = grad_check(module, x, tol, samples=args.samples, seed=args.seed)
    verdict = "PASS" if report.passed else "FAIL"
    print(f"target={args.target} max_rel_error={report.max_rel_error:.3e} worst={report.worst_path} "
          f"tolerance={tol:g} {verdict}")
    return 0 if report.passed else 1


# parser -----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    def common(defaults: bool):
        # Sub-command copies suppress their defaults so flags given before the
        # sub-command survive.
        d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
        c = argparse.ArgumentParser(add_help=False)
        c.add_argument("--seed", type=int, default=d(0))
        c.add_argument("--out", default=d(None), help=f"output directory (env {OUT_ENV})")
        c.add_argument("--config", default=d(None), help="run config file ([run] INI section)")
        c.add_argument("-v", "--verbose", action="store_true", default=d(False))
        return c

    p = _Parser(prog="tmresnet", description=__doc__.splitlines()[0], parents=[common(True)])
    common = common(False)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    b = sub.add_parser("bench-ode", parents=[common], help="measure integrator convergence orders")
    b.add_argument("--methods", default="all", help="comma list of " + ",".join(m.value for m in ode_core.IntegratorId) + " or 'all'")
    b.add_argument("--problem", default="decay-sin", help="one of " + ", ".join(ode_core.PROBLEMS))
    b.add_argument("--taus", default=DEFAULT_TAUS)
    b.add_argument("--horizon", type=float, default=2.0)
    b.add_argument("--bootstrap", default="exact", help="TM start-up: 'exact' or a single-step method")
    b.add_argument("--csv", default=None)
    b.set_defaults(func=cmd_bench_ode)

    t = sub.add_parser("train", parents=[common], help="train a model from a run config")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", choices=("synth", "cifar10", "mnist"), default="synth")
    e.add_argument("--data-path", default="")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--synth-n", type=int, default=500)
    e.add_argument("--synth-classes", type=int, default=4)
    e.add_argument("--synth-size", type=int, default=16)
    e.add_argument("--synth-channels", type=int, default=3)
    e.add_argument("--normalize", action="store_true")
    e.add_argument("--batch-size", type=int, default=256)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("count-params", parents=[common], help="per-stage and total parameter counts")
    c.add_argument("--preset", default=None, help="one of " + ", ".join(PRESETS))
    c.add_argument("--classes", type=int, default=10)
    c.add_argument("--in-channels", type=int, default=3)
    c.set_defaults(func=cmd_count_params)

    g = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient check")
    g.add_argument("--target", default="conv", help="layer/block name or preset")
    g.add_argument("--tolerance", type=float, default=None)
    g.add_argument("--samples", type=int, default=64, help="coordinates checked per parameter tensor")
    g.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: bench-ode, train, eval, count-params, grad-check")
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    # --seed on `train` overrides the config file only when given explicitly.
    args.seed_override = args.seed if argv_has(argv, "--seed") else None
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TmResnetError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def argv_has(argv, flag: str) -> bool:
    argv = sys.argv[1:] if argv is None else argv
    return any(a == flag or a.startswith(flag + "=") for a in argv)


if __name__ == "__main__":
    sys.exit(main())
