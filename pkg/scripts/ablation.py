"""Train the full model and the four ablations on the default synthetic
configuration and print unseen ZSL T1 and mean PCP per variant.

    python3 scripts/ablation.py --seeds 7 8 9 --epochs 30
"""

import argparse
import time

import numpy as np

from apn.data import generate_synthetic
from apn.evaluation import evaluate_zsl, pcp
from apn.training import TrainConfig, train

VARIANTS = {
    "full": {},
    "BaseMod": dict(reg=False, ad=False, cpt=False, zoom=False),
    "no-reg": dict(reg=False),
    "no-ad": dict(ad=False),
    "no-cpt": dict(cpt=False),
    "no-zoom": dict(zoom=False),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[7])
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS))
    args = ap.parse_args()

    results = {v: [] for v in args.variants}
    for seed in args.seeds:
        bundle = generate_synthetic(seed=seed)
        for name in args.variants:
            cfg = TrainConfig(seed=seed, epochs=args.epochs, **VARIANTS[name])
            start = time.perf_counter()
            params, _ = train(bundle, cfg)
            t1 = evaluate_zsl(bundle, params, zoom=cfg.zoom).t1
            mean_pcp = pcp(bundle, params).mean_pcp
            results[name].append((t1, mean_pcp))
            print(f"seed {seed} {name:8s} T1 {t1:.3f} PCP {mean_pcp:.3f} ({time.perf_counter() - start:.0f}s)",
                  flush=True)
        del bundle

    print("\nvariant   T1     PCP")
    for name, rows in results.items():
        t1, p = np.mean(rows, axis=0)
        print(f"{name:8s}  {t1:.3f}  {p:.3f}")


if __name__ == "__main__":
    main()
