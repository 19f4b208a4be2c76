"""Train the base variant on toy advection data and compare with persistence.

    python3 scripts/toy_training.py [--seed 0] [--out loss.csv]
"""

from __future__ import annotations

import argparse

from msnowcast.experiments import toy_training_config, train_and_score

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="write the loss trace CSV here")
    a = ap.parse_args()
    run = train_and_score(toy_training_config(a.seed))
    s = run.result.smoothed_losses
    print(f"smoothed loss {s[0]:.5f} -> {s[-1]:.5f} ({100 * run.loss_reduction:.1f}% reduction)")
    print("lead  model_mae  persistence_mae")
    for j, (m, p) in enumerate(zip(run.model_mae, run.persistence_mae), start=1):
        print(f"{j:4d}  {m:9.3f}  {p:15.3f}")
    if a.out:
        run.result.write_loss_csv(a.out)
