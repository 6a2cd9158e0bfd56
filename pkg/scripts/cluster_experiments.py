"""Regime switch, throughput and convergence race on the 158-worker presets.

Trains the runtime model on mixed-158 (or loads --ckpt), replays
two-regime-158 against the oracle and full sync, then races the policies
on straggler-158 for each seed.

    python scripts/cluster_experiments.py --out results/cluster
"""

import argparse
import time
from pathlib import Path

import numpy as np

from cutoffsgd import recipes
from cutoffsgd.sgdharness import write_records
from cutoffsgd.trainer import load_checkpoint, save_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/cluster")
    ap.add_argument("--ckpt", help="skip training and use this checkpoint")
    ap.add_argument("--seeds", type=int, nargs="*", help="race seeds (default: the recipe's)")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    recipe = recipes.ClusterRecipe()

    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
    else:
        t = time.perf_counter()
        ckpt = recipes.train_cluster_model(recipe)
        print(f"trained in {time.perf_counter() - t:.0f} s")
        save_checkpoint(ckpt, out / "model.json")

    run = recipes.switch_run(ckpt, recipe)
    write_records([run.full, run.model, run.oracle], out / "switch_records.csv")
    gps = {r.policy: r.gradients_per_second() for r in (run.full, run.model, run.oracle)}
    print("gradients per second:", ", ".join(f"{k} {v:.2f}" for k, v in gps.items()))
    print(f"model / full sync {gps['model_cutoff'] / gps['full_sync']:.3f}")
    back = recipes.recovery_iteration(run, recipe)
    print(f"smoothed throughput within 10% of the oracle from iteration {back} (switch at {recipe.switch_at})")
    c = run.model.column("c")
    warm = ckpt.lag
    print(f"mean cutoff after warm-up and before the switch {c[warm:recipe.switch_at].mean():.1f}, "
          f"after {c[recipe.switch_at:].mean():.1f}")
    np.savetxt(out / "switch_ratio.csv", np.column_stack([np.arange(len(run.ratio)), run.ratio, run.smoothed_ratio]),
               delimiter=",", header="iteration,ratio,smoothed", comments="", fmt=["%d", "%.6f", "%.6f"])

    seeds = recipe.race_seeds if args.seeds is None else args.seeds
    wins = 0
    for seed in seeds:
        o = recipes.convergence_race(ckpt, seed, recipe)
        wins += o.model_wins
        print(f"race seed {seed}: target {o.target:.5f}; " + ", ".join(f"{k} {v:.3f}" for k, v in o.hit_fraction.items()))
    print(f"model_cutoff first to the target in {wins}/{len(seeds)} seeds")


if __name__ == "__main__":
    main()
