"""Fixed experiment recipes shared by the acceptance suite and scripts/.

Each recipe is a frozen dataclass holding everything needed to reproduce
one experiment; the functions below run them and return plain summaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .clustersim import preset, simulate_trace
from .predictor import PredictionReport, evaluate_predictions
from .sgdharness import (
    FullSync,
    GaussianOrder,
    ModelCutoff,
    RunRecord,
    StaticCutoff,
    TaskConfig,
    loss_target,
    oracle_cutoff_run,
    run_experiment,
)
from .trainer import ModelCheckpoint, TrainConfig, train


def _model_training() -> TrainConfig:
    return TrainConfig(epochs=60, batch_size=16, lr=3e-3, lr_final_fraction=0.05, lookahead=True, seed=0)


@dataclass(frozen=True)
class SkillRecipe:
    """Train on the head of a 16-worker trace, score one-step predictions on its tail."""

    preset: str = "two-regime-16"
    trace_seed: int = 1
    split: int = 2000
    k: int = 50
    eval_seed: int = 0
    training: TrainConfig = field(default_factory=_model_training)


@dataclass(frozen=True)
class ClusterRecipe:
    """The 158-worker model and the traces it is judged on."""

    train_preset: str = "mixed-158"
    train_seed: int = 1
    training: TrainConfig = field(default_factory=_model_training)
    k: int = 50
    switch_preset: str = "two-regime-158"
    switch_seed: int = 0
    switch_at: int = 61
    recovery_window: int = 30
    median_width: int = 5
    race_preset: str = "straggler-158"
    race_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    task: TaskConfig = field(default_factory=TaskConfig)


def train_skill_model(recipe: SkillRecipe = SkillRecipe()) -> ModelCheckpoint:
    trace = simulate_trace(preset(recipe.preset, recipe.trace_seed))
    return train(trace.slice(0, recipe.split), recipe.training)


def predictive_skill(ckpt: ModelCheckpoint, recipe: SkillRecipe = SkillRecipe()) -> PredictionReport:
    trace = simulate_trace(preset(recipe.preset, recipe.trace_seed))
    return evaluate_predictions(ckpt, trace, recipe.split, k=recipe.k, seed=recipe.eval_seed)


def train_cluster_model(recipe: ClusterRecipe = ClusterRecipe()) -> ModelCheckpoint:
    return train(simulate_trace(preset(recipe.train_preset, recipe.train_seed)), recipe.training)


@dataclass
class SwitchRun:
    model: RunRecord
    full: RunRecord
    oracle: RunRecord
    ratio: np.ndarray  # model / oracle throughput per iteration
    smoothed_ratio: np.ndarray  # forward median of ratio: entry t summarizes iterations t .. t + width - 1


def forward_median(values: np.ndarray, width: int) -> np.ndarray:
    """Median of values[t : t + width]; shorter windows at the end."""
    values = np.asarray(values, dtype=float)
    return np.array([np.median(values[t : t + width]) for t in range(len(values))])


def switch_run(ckpt: ModelCheckpoint, recipe: ClusterRecipe = ClusterRecipe()) -> SwitchRun:
    trace = simulate_trace(preset(recipe.switch_preset, recipe.switch_seed))
    task = recipe.task.build(trace.n_workers)
    seed = recipe.switch_seed
    model = run_experiment(task, ModelCutoff(ckpt, k=recipe.k), trace, seed=seed)
    full = run_experiment(task, FullSync(), trace, seed=seed)
    oracle = oracle_cutoff_run(task, trace, seed=seed)
    ratio = model.column("throughput") / oracle.column("throughput")
    return SwitchRun(model, full, oracle, ratio, forward_median(ratio, recipe.median_width))


def recovery_iteration(run: SwitchRun, recipe: ClusterRecipe = ClusterRecipe(), level: float = 0.9) -> int | None:
    """First iteration at or after the switch from which the ratio holds ``level`` in median.

    Single rows where the oracle exploits one near-zero runtime are ignored
    by the median; iterations before the switch never count.
    """
    hits = np.flatnonzero(run.smoothed_ratio[recipe.switch_at :] >= level)
    return int(recipe.switch_at + hits[0]) if hits.size else None


@dataclass
class RaceOutcome:
    seed: int
    target: float
    # time to reach the target as a fraction of full sync's total time; inf if never
    hit_fraction: dict[str, float]

    @property
    def model_wins(self) -> bool:
        model = self.hit_fraction["model_cutoff"]
        return all(model < v for k, v in self.hit_fraction.items() if k != "model_cutoff")


def convergence_race(ckpt: ModelCheckpoint, seed: int, recipe: ClusterRecipe = ClusterRecipe()) -> RaceOutcome:
    trace = simulate_trace(preset(recipe.race_preset, seed))
    n = trace.n_workers
    task = recipe.task.build(n)
    policies = [FullSync(), StaticCutoff(n), GaussianOrder(), ModelCutoff(ckpt, k=recipe.k)]
    records = {p.name: run_experiment(task, p, trace, seed=seed) for p in policies}
    full = records["full_sync"]
    target = loss_target(full)
    hits = {name: rec.time_to_loss(target) / full.total_time for name, rec in records.items()}
    return RaceOutcome(seed, target, hits)
