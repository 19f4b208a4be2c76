"""Toy ablation: +LV vs base on inflowing translation, +HRRR vs base on growth/decay.

    python3 scripts/ablation.py [--seeds 0 1 2] [--steps 300]
"""

from __future__ import annotations

import argparse
import time

from msnowcast.experiments import GROWTH_DECAY, TRANSLATION_INFLOW, ablation_pair

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--steps", type=int, default=300)
    a = ap.parse_args()
    for seed in a.seeds:
        for name, scen, variants in (("translation", TRANSLATION_INFLOW, ("base", "lv")), ("growth", GROWTH_DECAY, ("base", "hrrr"))):
            t0 = time.time()
            r = ablation_pair(scen, variants, seed, total_steps=str(a.steps))
            won = r[variants[1]] < r[variants[0]]
            print(f"seed {seed} {name:12s} " + "  ".join(f"{v} {m:.4f}" for v, m in r.items())
                  + f"  {variants[1]} wins: {won}  ({time.time() - t0:.0f}s)", flush=True)
