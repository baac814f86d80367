"""Parameter count and depth of every model preset."""
import argparse

from tmresnet.stacks import PRESETS, build_model, model_depth, param_count, preset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--classes", type=int, default=10)
    args = ap.parse_args()
    print(f"{'preset':>22} {'scheme':>6} {'depth':>5} {'blocks':>10} {'params':>12}")
    for name in PRESETS:
        cfg = preset(name, classes=args.classes)
        blocks = ",".join(str(s.blocks) for s in cfg.stages)
        n = param_count(build_model(cfg))
        print(f"{name:>22} {cfg.scheme.value:>6} {model_depth(cfg):>5} {blocks:>10} {n:>12,}")


if __name__ == "__main__":
    main()
