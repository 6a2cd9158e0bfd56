"""Discrete-event simulation of cutoff SGD and its baselines on a toy task.

Simulated wall-clock time comes from a runtime trace: in iteration t worker
w needs ``trace[t, w]`` seconds for its share of the mini-batch. The server
waits for the c fastest workers, averages their gradients and steps.
"""

from __future__ import annotations

import csv
import heapq
import math
import os
from collections import deque
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .clustersim import SimSpec, TraceReplay, simulate_trace
from .errors import DomainError, ReplayExhausted, ValidationError
from .orderstats import argmax_cutoff, elfving_curve, throughput_curve
from .predictor import ObservationBuffer, advance_buffer, cutoff_from_predictive, impute_censored, predict_next
from .trace import RuntimeTrace

COLUMNS = ("iteration", "policy", "c", "iter_time_s", "cum_time_s", "train_loss", "val_loss", "throughput")
# appended after the fixed columns so readers keyed on the first eight still work
EXTRA_COLUMNS = ("idle_s",)


# toy task

@dataclass(frozen=True, eq=False)
class ToyTask:
    """Mini-batch SGD problem: data, loss, batch size m and step size lr."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    loss: str
    m: int
    lr: float
    theta0: np.ndarray

    def __post_init__(self):
        if self.loss not in ("logistic", "squared"):
            raise ValidationError(f"unknown loss {self.loss!r}")
        if self.m <= 0 or self.lr <= 0:
            raise ValidationError("m and lr must be positive")

    @property
    def dim(self) -> int:
        return self.x_train.shape[1]

    def per_worker(self, n_workers: int) -> int:
        if self.m % n_workers:
            raise ValidationError(f"mini-batch size {self.m} is not divisible by {n_workers} workers")
        return self.m // n_workers

    def loss_value(self, theta: np.ndarray, split: str = "train") -> float:
        x, y = (self.x_train, self.y_train) if split == "train" else (self.x_val, self.y_val)
        return _loss(self.loss, x, y, theta)

    def gradient(self, theta: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """Mean gradient over the training examples ``idx``."""
        x, y = self.x_train[idx], self.y_train[idx]
        z = x @ theta
        if self.loss == "logistic":
            resid = _sigmoid(z) - y
        else:
            resid = z - y
        return x.T @ resid / len(idx)

    def full_gradient(self, theta: np.ndarray) -> np.ndarray:
        return self.gradient(theta, np.arange(len(self.y_train)))


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def _loss(kind: str, x, y, theta) -> float:
    z = x @ theta
    if kind == "logistic":
        return float(np.mean(np.logaddexp(0.0, z) - y * z))
    return float(0.5 * np.mean((z - y) ** 2))


def make_toy_task(
    m: int,
    lr: float,
    n_points: int = 10_000,
    dim: int = 10,
    loss: str = "logistic",
    val_fraction: float = 0.2,
    separation: float = 1.0,
    noise: float = 0.5,
    scale_decades: float = 0.0,
    seed: int = 0,
) -> ToyTask:
    """Seeded synthetic dataset with a bias column appended to the features.

    ``logistic``: two unit-covariance Gaussian classes whose means are
    ``separation`` apart. ``squared``: linear regression with Gaussian
    ``noise`` on the targets. Feature j is scaled by
    ``10 ** (-scale_decades * j / (dim - 1))``, which makes the problem
    ill-conditioned and slows the final approach to the optimum.
    """
    rng = np.random.default_rng(seed)
    if loss == "logistic":
        y = rng.integers(0, 2, size=n_points).astype(np.float64)
        direction = rng.standard_normal(dim)
        direction /= np.linalg.norm(direction)
        x = rng.standard_normal((n_points, dim)) + np.outer(y - 0.5, direction * separation)
    elif loss == "squared":
        x = rng.standard_normal((n_points, dim))
        w = rng.standard_normal(dim)
        y = x @ w + 1.0 + noise * rng.standard_normal(n_points)
    else:
        raise ValidationError(f"unknown loss {loss!r}")
    if dim > 1:
        x = x * 10.0 ** (-scale_decades * np.arange(dim) / (dim - 1))
    x = np.hstack([x, np.ones((n_points, 1))])
    n_val = int(round(n_points * val_fraction))
    order = rng.permutation(n_points)
    val, train = order[:n_val], order[n_val:]
    return ToyTask(x[train], y[train], x[val], y[val], loss, m, lr, np.zeros(dim + 1))


@dataclass(frozen=True)
class TaskConfig:
    """Defaults for the toy task used by the convergence race.

    Many features keep a unit scale and carry most of the gradient noise;
    the badly scaled rest converge slowly, so full sync is still improving
    late in the run while a small cutoff settles at a visibly higher loss.
    """

    per_worker: int = 2
    lr: float = 0.5
    n_points: int = 40_000
    dim: int = 200
    loss: str = "logistic"
    separation: float = 1.0
    noise: float = 0.5
    scale_decades: float = 2.0
    seed: int = 0

    def build(self, n_workers: int) -> ToyTask:
        return make_toy_task(
            m=self.per_worker * n_workers, lr=self.lr, n_points=self.n_points, dim=self.dim,
            loss=self.loss, separation=self.separation, noise=self.noise,
            scale_decades=self.scale_decades, seed=self.seed,
        )


# records

class RecordRow(NamedTuple):
    iteration: int
    policy: str
    c: int
    iter_time_s: float
    cum_time_s: float
    train_loss: float
    val_loss: float
    throughput: float
    idle_s: float


@dataclass
class RunRecord:
    policy: str
    rows: list
    theta: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    @property
    def total_time(self) -> float:
        return self.rows[-1].cum_time_s if self.rows else 0.0

    def gradients_per_second(self) -> float:
        """Worker gradient contributions per simulated second over the whole run."""
        return float(self.column("c").sum() / self.total_time)

    def time_to_loss(self, target: float, split: str = "val") -> float:
        """First simulated time at which the loss is at or below ``target``; inf if never."""
        loss = self.column(f"{split}_loss")
        hit = np.flatnonzero(loss <= target)
        return float(self.column("cum_time_s")[hit[0]]) if hit.size else math.inf

    def loss_at_time(self, t: float, split: str = "val") -> float:
        """Loss after the last iteration finishing by time ``t``."""
        times = self.column("cum_time_s")
        k = np.searchsorted(times, t, side="right")
        if k == 0:
            raise DomainError(f"no iteration finished by {t}")
        return float(self.column(f"{split}_loss")[k - 1])


def write_records(records, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS + EXTRA_COLUMNS)
        for rec in records:
            for r in rec.rows:
                w.writerow([r.iteration, r.policy, r.c] + [repr(float(v)) for v in r[3:]])


def read_records(path: str | os.PathLike) -> list[RunRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header[: len(COLUMNS)] != COLUMNS:
            raise ValidationError(f"{path}: unexpected columns {header}")
        by_policy: dict[str, list] = {}
        for line in reader:
            vals = dict(zip(header, line))
            row = RecordRow(
                int(vals["iteration"]), vals["policy"], int(vals["c"]),
                *(float(vals[k]) for k in COLUMNS[3:]),
                float(vals.get("idle_s", "nan")),
            )
            by_policy.setdefault(row.policy, []).append(row)
    return [RunRecord(name, rows) for name, rows in by_policy.items()]


# policies

class Policy:
    """Chooses the cutoff before an iteration and sees the uncensored runtimes after."""

    name = "policy"
    uses_truth = False

    def reset(self, n_workers: int) -> None:
        self.n = n_workers

    def choose(self, iteration: int, rng: np.random.Generator, truth=None) -> int:
        raise NotImplementedError

    def observe(self, observed: np.ndarray, c: int, cutoff_time: float, rng: np.random.Generator) -> None:
        """``observed`` holds runtimes of contributing workers and NaN elsewhere."""


class FullSync(Policy):
    name = "full_sync"

    def choose(self, iteration, rng, truth=None):
        return self.n


class StaticCutoff(Policy):
    def __init__(self, c: int):
        self.c = int(c)
        self.name = f"static_cutoff:{self.c}"

    def reset(self, n_workers):
        if not 1 <= self.c <= n_workers:
            raise ValidationError(f"static cutoff {self.c} outside [1, {n_workers}]")
        super().reset(n_workers)

    def choose(self, iteration, rng, truth=None):
        return self.c


class OracleCutoff(Policy):
    """Argmax throughput on the true runtimes of the coming iteration."""

    name = "oracle"
    uses_truth = True

    def choose(self, iteration, rng, truth=None):
        return argmax_cutoff(throughput_curve(np.sort(truth)))


class GaussianOrder(Policy):
    """Fits one normal to the pooled uncensored runtimes of the last ``window`` iterations
    and maximizes c / E[x_(c)] under it."""

    name = "gaussian_order"

    def __init__(self, window: int = 20, c_min: int = 1):
        self.window = window
        self.c_min = c_min

    def reset(self, n_workers):
        super().reset(n_workers)
        self.history: deque = deque(maxlen=self.window)

    def choose(self, iteration, rng, truth=None):
        if not self.history:
            return self.n
        pooled = np.concatenate(self.history)
        if pooled.size < 2:
            return self.n
        mu, sigma = float(pooled.mean()), float(pooled.std(ddof=1))
        expected = elfving_curve(self.n, mu, sigma)
        with np.errstate(divide="ignore"):
            curve = np.where(expected > 0, np.arange(1, self.n + 1) / expected, -np.inf)
        return argmax_cutoff(curve, self.c_min)

    def observe(self, observed, c, cutoff_time, rng):
        self.history.append(observed[~np.isnan(observed)])


class ModelCutoff(Policy):
    """Predictor-driven cutoff; waits for everyone until the lag buffer is full."""

    name = "model_cutoff"

    def __init__(self, ckpt, k: int = 50, c_min: int = 1, imputation: str = "moment"):
        self.ckpt = ckpt
        self.k = k
        self.c_min = c_min
        self.imputation = imputation

    def reset(self, n_workers):
        if n_workers != self.ckpt.n_workers:
            raise ValidationError(f"checkpoint models {self.ckpt.n_workers} workers, run has {n_workers}")
        super().reset(n_workers)
        self.buffer = ObservationBuffer(self.ckpt.lag, n_workers)
        self.pred = None
        self.n_imputed = 0
        self.n_fallback = 0

    def choose(self, iteration, rng, truth=None):
        if not self.buffer.full:
            self.pred = None
            return self.n
        self.pred = predict_next(self.ckpt, self.buffer, self.k, rng)
        return cutoff_from_predictive(self.pred, self.c_min).c

    def observe(self, observed, c, cutoff_time, rng):
        flags = None
        if np.isnan(observed).any():
            if self.pred is None:
                raise DomainError("censored runtimes without a prediction to impute from")
            observed, flags = impute_censored(self.pred, observed, cutoff_time, rng, self.imputation)
            self.n_imputed += int(np.sum(flags == 1))
            self.n_fallback += int(np.sum(flags == 2))
        self.buffer = advance_buffer(self.buffer, observed, flags)


class AsyncStaleness:
    """Marker for the event-driven asynchronous baseline."""

    name = "async_staleness"


def make_policy(text: str, n_workers: int | None = None, ckpt=None, k: int = 50, window: int = 20):
    """Parse ``full_sync``, ``static_cutoff:C``, ``gaussian_order``, ``model_cutoff``,
    ``oracle`` or ``async_staleness``; a bare ``static_cutoff`` means C = n."""
    name, _, arg = text.partition(":")
    if name == "full_sync":
        return FullSync()
    if name == "static_cutoff":
        if not arg and n_workers is None:
            raise ValidationError("static_cutoff needs a cutoff, e.g. static_cutoff:120")
        return StaticCutoff(int(arg) if arg else n_workers)
    if name == "gaussian_order":
        return GaussianOrder(window=window)
    if name == "model_cutoff":
        if ckpt is None:
            raise ValidationError("model_cutoff needs a trained checkpoint")
        return ModelCutoff(ckpt, k=k)
    if name == "oracle":
        return OracleCutoff()
    if name == "async_staleness":
        return AsyncStaleness()
    raise ValidationError(f"unknown policy {text!r}")


# simulation

@dataclass
class RunState:
    theta: np.ndarray
    iteration: int = 0
    cum_time: float = 0.0


def _as_replay(source) -> TraceReplay:
    if isinstance(source, TraceReplay):
        return source
    if isinstance(source, SimSpec):
        source = simulate_trace(source)
    if isinstance(source, RuntimeTrace):
        return TraceReplay(source)
    raise ValidationError(f"cannot use {type(source).__name__} as a runtime source")


def _streams(seed: int):
    data_ss, policy_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(data_ss), np.random.default_rng(policy_ss)


def run_iteration(task: ToyTask, state: RunState, policy: Policy, source: TraceReplay,
                  data_rng: np.random.Generator, policy_rng: np.random.Generator,
                  overhead: float = 0.0) -> RecordRow:
    """Advance ``state`` by one synchronous step; raises ReplayExhausted at the end of the trace."""
    row = source.next_row()
    n = len(row)
    per_worker = task.per_worker(n)
    c = policy.choose(state.iteration, policy_rng, truth=row if policy.uses_truth else None)
    if not 1 <= c <= n:
        raise DomainError(f"policy {policy.name} chose cutoff {c} outside [1, {n}]")
    # every worker draws its examples whether or not it ends up contributing
    idx = data_rng.integers(0, len(task.y_train), size=(n, per_worker))
    order = np.argsort(row, kind="stable")
    winners = np.sort(order[:c])
    grad = np.zeros_like(state.theta)
    for w in winners:
        grad += task.gradient(state.theta, idx[w])
    state.theta = state.theta - task.lr * grad / c
    x_c = float(row[order[c - 1]])
    iter_time = x_c + overhead
    state.cum_time += iter_time
    observed = np.full(n, np.nan)
    observed[winners] = row[winners]
    policy.observe(observed, c, x_c, policy_rng)
    rec = RecordRow(
        iteration=state.iteration,
        policy=policy.name,
        c=int(c),
        iter_time_s=iter_time,
        cum_time_s=state.cum_time,
        train_loss=task.loss_value(state.theta, "train"),
        val_loss=task.loss_value(state.theta, "val"),
        throughput=c / iter_time,
        idle_s=float(np.sum(x_c - row[winners])),
    )
    state.iteration += 1
    return rec


def run_experiment(task: ToyTask, policy, source, iterations: int | None = None, seed: int = 0,
                   overhead: float = 0.0) -> RunRecord:
    """Run up to ``iterations`` steps (all trace rows if None); stops cleanly when the trace runs out."""
    if overhead < 0:
        raise DomainError("overhead must be non-negative")
    replay = _as_replay(source)
    replay.reset()
    if isinstance(policy, AsyncStaleness):
        return run_async(task, replay.trace, iterations, seed)
    policy.reset(replay.n_workers)
    data_rng, policy_rng = _streams(seed)
    state = RunState(task.theta0.copy())
    rows = []
    limit = len(replay) if iterations is None else iterations
    while len(rows) < limit:
        try:
            rows.append(run_iteration(task, state, policy, replay, data_rng, policy_rng, overhead))
        except ReplayExhausted:
            break
    return RunRecord(policy.name, rows, state.theta)


def oracle_cutoff_run(task: ToyTask, trace, iterations: int | None = None, seed: int = 0,
                      overhead: float = 0.0) -> RunRecord:
    return run_experiment(task, OracleCutoff(), trace, iterations, seed, overhead)


def run_async(task: ToyTask, trace: RuntimeTrace, iterations: int | None = None, seed: int = 0) -> RunRecord:
    """Asynchronous baseline: each worker loops independently, computing its gradient
    on the parameters current at its start and applying it with step lr / n when
    it finishes. Worker w's k-th job takes ``trace[k, w]`` seconds. Every n
    completions form one record row."""
    runtimes = trace.runtimes
    n_rows, n = runtimes.shape
    per_worker = task.per_worker(n)
    lr = task.lr / n
    data_rng, _ = _streams(seed)
    theta = task.theta0.copy()
    jobs = np.zeros(n, dtype=int)
    heap: list = []

    def start(w: int, now: float) -> None:
        idx = data_rng.integers(0, len(task.y_train), size=per_worker)
        g = task.gradient(theta, idx)
        heapq.heappush(heap, (now + float(runtimes[jobs[w], w]), w, g))

    for w in range(n):
        start(w, 0.0)
    rows = []
    limit = n_rows if iterations is None else iterations
    events, last = 0, 0.0
    while heap and len(rows) < limit:
        now, w, g = heapq.heappop(heap)
        theta = theta - lr * g
        events += 1
        jobs[w] += 1
        if jobs[w] < n_rows:
            start(w, now)
        if events == n:
            dt = now - last
            rows.append(RecordRow(len(rows), AsyncStaleness.name, n, dt, now,
                                  task.loss_value(theta, "train"), task.loss_value(theta, "val"),
                                  n / dt if dt > 0 else math.inf, 0.0))
            events, last = 0, now
    return RunRecord(AsyncStaleness.name, rows, theta)


def loss_target(reference: RunRecord, fraction: float = 0.75, split: str = "val") -> float:
    """Reference run's loss at ``fraction`` of its total simulated time."""
    return reference.loss_at_time(fraction * reference.total_time, split)
