"""Sweep the attribute-regression weight on one synthetic seed and report
unseen ZSL T1 and mean PCP for each value.

    python3 scripts/lambda1_sweep.py --values 0.05 0.3 1.0 --seed 7
"""

import argparse

from apn.data import generate_synthetic
from apn.evaluation import evaluate_zsl, pcp
from apn.training import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--values", type=float, nargs="+", default=[0.05, 0.3, 1.0])
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--epochs", type=int, default=30)
    args = ap.parse_args()

    bundle = generate_synthetic(seed=args.seed)
    for lam in args.values:
        params, log = train(bundle, TrainConfig(seed=args.seed, epochs=args.epochs, lambda1=lam))
        last = log.records[-1]
        print(f"lambda1 {lam:g}: T1 {evaluate_zsl(bundle, params).t1:.3f} PCP {pcp(bundle, params).mean_pcp:.3f} "
              f"l_cls {last.l_cls:.3f} l_reg {last.l_reg:.3f}", flush=True)


if __name__ == "__main__":
    main()
