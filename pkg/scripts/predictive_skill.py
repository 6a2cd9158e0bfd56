"""Train the 16-worker runtime model and score its one-step predictions.

    python scripts/predictive_skill.py --out results/skill
"""

import argparse
import csv
import dataclasses
import time
from pathlib import Path

import numpy as np

from cutoffsgd import recipes
from cutoffsgd.trainer import save_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/skill")
    ap.add_argument("--epochs", type=int, default=recipes.SkillRecipe().training.epochs)
    ap.add_argument("--seed", type=int, default=0, help="model initialization seed")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    base = recipes.SkillRecipe()
    recipe = dataclasses.replace(base, training=dataclasses.replace(base.training, epochs=args.epochs, seed=args.seed))
    t = time.perf_counter()
    ckpt = recipes.train_skill_model(recipe)
    print(f"trained in {time.perf_counter() - t:.0f} s, final ELBO {ckpt.metadata['final_elbo']:.2f}")
    save_checkpoint(ckpt, out / "model.json")

    rep = recipes.predictive_skill(ckpt, recipe)
    print(f"held-out RMSE {rep.rmse:.4f}, carry-forward {rep.baseline_rmse:.4f}, ratio {rep.rmse / rep.baseline_rmse:.3f}")
    with open(out / "sorted_predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "rank", "predicted", "carry_forward", "observed"])
        for i, step in enumerate(rep.steps):
            for r in range(rep.predicted_sorted.shape[1]):
                w.writerow([int(step), r + 1, rep.predicted_sorted[i, r], rep.carry_forward_sorted[i, r],
                            rep.observed_sorted[i, r]])
    per_step = np.sqrt(np.mean((rep.predicted_sorted - rep.observed_sorted) ** 2, axis=1))
    print(f"per-step RMSE: median {np.median(per_step):.4f}, 90th percentile {np.percentile(per_step, 90):.4f}")


if __name__ == "__main__":
    main()
