"""One-step posterior-predictive runtimes, cutoff choice and censored imputation.

Prediction pushes K guide samples of the lag window's last latent through
the transition and emission networks, giving a K-component Gaussian
mixture over the next runtime vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import DomainError, InsufficientDataError
from .orderstats import CutoffDecision, SortedRuntimes, argmax_cutoff
from .trainer import ModelCheckpoint

RUNTIME_FLOOR_S = 1e-6
# floor for sampled runtimes in normalized units (a fraction of the checkpoint scale)
SAMPLE_FLOOR = 0.05
FALLBACK_SIGMAS = 6.0

OBSERVED = 0
IMPUTED = 1
FALLBACK = 2


@dataclass(frozen=True, eq=False)
class PredictiveDistribution:
    """Next-step runtime prediction.

    ``mean``/``std`` are per-worker moments of the predictive mixture in
    normalized units; ``component_mean``/``component_std`` are the K mixture
    components (normalized); ``samples`` are K joint draws in seconds.
    """

    mean: np.ndarray
    std: np.ndarray
    component_mean: np.ndarray
    component_std: np.ndarray
    samples: np.ndarray
    scale: float

    @property
    def k(self) -> int:
        return self.samples.shape[0]

    @property
    def mean_seconds(self) -> np.ndarray:
        return self.mean * self.scale

    @property
    def std_seconds(self) -> np.ndarray:
        return self.std * self.scale

    def sorted_samples(self) -> np.ndarray:
        return np.sort(self.samples, axis=1)


@dataclass(frozen=True, eq=False)
class ObservationBuffer:
    """The most recent ``lag`` runtime vectors (seconds) with observed/imputed flags."""

    lag: int
    n_workers: int
    rows: tuple = ()
    flags: tuple = ()

    def __post_init__(self):
        if len(self.rows) > self.lag or len(self.rows) != len(self.flags):
            raise DomainError("buffer holds more rows than its lag, or rows and flags differ")

    @property
    def full(self) -> bool:
        return len(self.rows) == self.lag

    def __len__(self) -> int:
        return len(self.rows)

    def values(self) -> np.ndarray:
        return np.array(self.rows, dtype=np.float64).reshape(len(self.rows), self.n_workers)

    def flag_array(self) -> np.ndarray:
        return np.array(self.flags, dtype=np.uint8).reshape(len(self.flags), self.n_workers)


def advance_buffer(buffer: ObservationBuffer, full_vector, flags=None) -> ObservationBuffer:
    vec = np.array(full_vector, dtype=np.float64)
    if vec.shape != (buffer.n_workers,):
        raise DomainError(f"expected {buffer.n_workers} runtimes, got shape {vec.shape}")
    if np.any(~(vec > 0)) or not np.all(np.isfinite(vec)):
        raise DomainError("buffered runtimes must be finite and positive")
    fl = np.zeros(buffer.n_workers, dtype=np.uint8) if flags is None else np.array(flags, dtype=np.uint8)
    if fl.shape != vec.shape:
        raise DomainError("flags must match the runtime vector")
    vec.setflags(write=False)
    fl.setflags(write=False)
    rows = (buffer.rows + (vec,))[-buffer.lag :]
    flg = (buffer.flags + (fl,))[-buffer.lag :]
    return ObservationBuffer(buffer.lag, buffer.n_workers, rows, flg)


def buffer_from_rows(rows, lag: int) -> ObservationBuffer:
    rows = np.asarray(rows, dtype=np.float64)
    buf = ObservationBuffer(lag, rows.shape[1])
    for r in rows[-lag:]:
        buf = advance_buffer(buf, r)
    return buf


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def predict_next(ckpt: ModelCheckpoint, buffer: ObservationBuffer, k: int = 50, seed=0) -> PredictiveDistribution:
    if k < 1:
        raise DomainError("need at least one predictive sample")
    if buffer.n_workers != ckpt.n_workers:
        raise DomainError(f"buffer has {buffer.n_workers} workers, model expects {ckpt.n_workers}")
    if len(buffer) < ckpt.lag:
        raise InsufficientDataError(f"buffer holds {len(buffer)} rows, prediction needs {ckpt.lag}")
    rng = _rng(seed)
    scale = ckpt.normalization.scale
    window = buffer.values()[-ckpt.lag :] / scale
    model, guide = ckpt.model(), ckpt.guide()
    post = guide.sample(np.broadcast_to(window, (k,) + window.shape), rng=rng)
    tr = model.transition(post.z_seq[-1])
    z_next = tr.mean.value + tr.std.value * rng.standard_normal(tr.mean.shape)
    em = model.emission(z_next)
    comp_mean, comp_std = em.mean.value, em.std.value
    draws = comp_mean + comp_std * rng.standard_normal(comp_mean.shape)
    # Gaussian tails reach below zero, and with a near-zero floor the mean of 1/x_(1) blows up
    samples = np.maximum(draws, SAMPLE_FLOOR) * scale
    mean = comp_mean.mean(axis=0)
    var = np.mean(comp_std**2 + comp_mean**2, axis=0) - mean**2
    return PredictiveDistribution(
        mean=mean,
        std=np.sqrt(np.maximum(var, 0.0)),
        component_mean=comp_mean,
        component_std=comp_std,
        samples=samples,
        scale=scale,
    )


def cutoff_from_predictive(pred: PredictiveDistribution, c_min: int = 1) -> CutoffDecision:
    """Cutoff maximizing the Monte Carlo mean of c / x_(c) over the K draws."""
    ranked = pred.sorted_samples()
    n = ranked.shape[1]
    curve = np.mean(np.arange(1, n + 1) / ranked, axis=0)
    c = argmax_cutoff(curve, c_min)
    sorted_mean = SortedRuntimes(np.sort(ranked.mean(axis=0)))
    return CutoffDecision(c=c, throughput=c / sorted_mean.values[c - 1], predicted_sorted=sorted_mean)


def predict_cutoff(ckpt: ModelCheckpoint, buffer: ObservationBuffer, k: int = 50, c_min: int = 1, seed=0) -> CutoffDecision:
    return cutoff_from_predictive(predict_next(ckpt, buffer, k, seed), c_min)


def sample_truncated_normal(mean, std, lower, rng: np.random.Generator) -> np.ndarray:
    """Draw from N(mean, std^2) restricted to (lower, inf) by inverting the survival function."""
    mean, std, lower = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (mean, std, lower)))
    alpha = (lower - mean) / std
    tail = special.ndtr(-alpha)
    u = rng.uniform(size=alpha.shape)
    # u in [0, 1) -> survival level in (0, tail]
    level = (1.0 - u) * tail
    z = -special.ndtri(level)
    x = mean + std * z
    return np.maximum(x, np.nextafter(lower, np.inf))


def impute_censored(pred: PredictiveDistribution, observed, cutoff_time: float, seed=0, mode: str = "moment"):
    """Fill censored (NaN) entries with draws truncated to (cutoff_time, inf).

    ``mode="moment"`` uses each worker's predictive mean/std as one Gaussian;
    ``mode="mixture"`` first picks a mixture component per worker. Workers
    whose predictive mean lies more than six stds below the censor get
    ``1.01 * cutoff_time`` instead. Returns the filled vector and per-entry
    flags (OBSERVED, IMPUTED, FALLBACK).
    """
    obs = np.array(observed, dtype=np.float64)
    if obs.shape != pred.mean.shape:
        raise DomainError(f"observed vector has shape {obs.shape}, prediction covers {pred.mean.shape}")
    if cutoff_time <= 0:
        raise DomainError("cutoff_time must be positive")
    censored = np.isnan(obs)
    seen = obs[~censored]
    if np.any(seen > cutoff_time) or np.any(seen <= 0):
        raise DomainError("observed runtimes must lie in (0, cutoff_time]")
    flags = np.full(obs.shape, OBSERVED, dtype=np.uint8)
    if not censored.any():
        return obs, flags
    rng = _rng(seed)
    idx = np.flatnonzero(censored)
    if mode == "moment":
        mu = pred.mean_seconds[idx]
        sd = np.maximum(pred.std_seconds[idx], RUNTIME_FLOOR_S)
    elif mode == "mixture":
        comp = rng.integers(0, pred.k, size=idx.size)
        mu = pred.component_mean[comp, idx] * pred.scale
        sd = np.maximum(pred.component_std[comp, idx] * pred.scale, RUNTIME_FLOOR_S)
    else:
        raise ValueError(f"unknown imputation mode {mode!r}")
    far = (cutoff_time - mu) / sd > FALLBACK_SIGMAS
    draws = sample_truncated_normal(mu, sd, cutoff_time, rng)
    draws = np.where(far, cutoff_time * 1.01, draws)
    obs[idx] = draws
    flags[idx] = np.where(far, FALLBACK, IMPUTED)
    return obs, flags


@dataclass(frozen=True, eq=False)
class PredictionReport:
    """One-step-ahead comparison of predicted and observed sorted runtimes.

    Arrays are indexed (step, rank); ``steps`` holds the predicted iteration.
    """

    steps: np.ndarray
    predicted_sorted: np.ndarray
    predicted_sorted_std: np.ndarray
    observed_sorted: np.ndarray
    carry_forward_sorted: np.ndarray

    @property
    def rmse(self) -> float:
        return float(np.sqrt(np.mean((self.predicted_sorted - self.observed_sorted) ** 2)))

    @property
    def baseline_rmse(self) -> float:
        return float(np.sqrt(np.mean((self.carry_forward_sorted - self.observed_sorted) ** 2)))


def evaluate_predictions(ckpt: ModelCheckpoint, runtimes, start: int, k: int = 50, seed=0) -> PredictionReport:
    """Predict every row from ``max(start, lag)`` on from the true preceding window."""
    runtimes = np.asarray(getattr(runtimes, "runtimes", runtimes), dtype=np.float64)
    if runtimes.shape[1] != ckpt.n_workers:
        raise DomainError(f"trace has {runtimes.shape[1]} workers, checkpoint expects {ckpt.n_workers}")
    lag = ckpt.lag
    first = max(start, lag)
    if first >= runtimes.shape[0]:
        raise InsufficientDataError(f"nothing to evaluate: trace has {runtimes.shape[0]} rows, lag {lag}, start {start}")
    rng = _rng(seed)
    steps = np.arange(first, runtimes.shape[0])
    pm, ps = [], []
    for t in steps:
        pred = predict_next(ckpt, buffer_from_rows(runtimes[t - lag : t], lag), k, rng)
        ranked = pred.sorted_samples()
        pm.append(ranked.mean(axis=0))
        ps.append(ranked.std(axis=0))
    return PredictionReport(
        steps=steps,
        predicted_sorted=np.array(pm),
        predicted_sorted_std=np.array(ps),
        observed_sorted=np.sort(runtimes[steps], axis=1),
        carry_forward_sorted=np.sort(runtimes[steps - 1], axis=1),
    )
