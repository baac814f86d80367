"""Train the desk-scale model under several stacking schemes and compare.

Every run uses the same data, seed and stage plan, so the parameter
counts match and only the inter-block wiring differs.

    python scripts/compare_stackings.py --schemes euler,tm,rk2 --epochs 5
"""
import argparse
from pathlib import Path

from tmresnet.training import RunConfig, load_data, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--schemes", default="euler,tm")
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--synth-n", type=int, default=2000)
    ap.add_argument("--out", default="runs/compare")
    args = ap.parse_args()

    base = RunConfig(seed=args.seed, epochs=args.epochs, synth_n=args.synth_n, model="inline")
    data = load_data(base)
    results = {}
    for scheme in args.schemes.split(","):
        cfg = RunConfig(**{**base.__dict__, "scheme": scheme, "out_dir": str(Path(args.out) / scheme)})
        res = train(cfg, data=data)
        train_rows = [r for r in res.history if r.split == "train"]
        test_rows = [r for r in res.history if r.split == "test"]
        results[scheme] = (res.param_count, train_rows[0].loss, train_rows[-1].loss, test_rows[-1].accuracy)
        print(f"{scheme}: done")

    print(f"{'scheme':>6} {'params':>8} {'loss@1':>8} {'loss@end':>8} {'test acc':>8}")
    for scheme, (n, l0, l1, acc) in results.items():
        print(f"{scheme:>6} {n:>8,} {l0:8.4f} {l1:8.4f} {acc:8.4f}")


if __name__ == "__main__":
    main()
