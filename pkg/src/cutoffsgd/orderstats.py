"""Order statistics of worker runtimes and the throughput objective.

Throughput of a cutoff ``c`` is the number of contributing workers per second,
``c / x_(c)`` with ``x_(c)`` the c-th smallest runtime of the iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate, special

from .errors import DomainError, ModelError

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class SortedRuntimes:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size == 0:
            raise DomainError("sorted runtimes must be a non-empty vector")
        if np.any(v <= 0) or not np.all(np.isfinite(v)):
            raise DomainError("sorted runtimes must be finite and positive")
        if np.any(np.diff(v) < 0):
            raise DomainError("runtimes are not sorted ascending")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_unsorted(cls, runtimes) -> "SortedRuntimes":
        return cls(np.sort(np.asarray(runtimes, dtype=np.float64)))

    @property
    def n(self) -> int:
        return self.values.size


@dataclass(frozen=True, eq=False)
class CutoffDecision:
    c: int
    throughput: float
    predicted_sorted: SortedRuntimes


def _values(sorted_runtimes) -> np.ndarray:
    if isinstance(sorted_runtimes, SortedRuntimes):
        return sorted_runtimes.values
    return SortedRuntimes(sorted_runtimes).values


def throughput(sorted_runtimes, c: int) -> float:
    v = _values(sorted_runtimes)
    if not 1 <= c <= v.size:
        raise DomainError(f"cutoff {c} outside [1, {v.size}]")
    return c / v[c - 1]


def throughput_curve(sorted_runtimes) -> np.ndarray:
    """Omega(c) for c = 1..n as an array indexed by c - 1."""
    v = _values(sorted_runtimes)
    return np.arange(1, v.size + 1) / v


def argmax_cutoff(curve: np.ndarray, c_min: int = 1) -> int:
    """Largest c >= c_min attaining the maximum of ``curve`` (indexed by c - 1)."""
    curve = np.asarray(curve)
    n = curve.size
    if n == 0:
        raise DomainError("empty throughput curve")
    if not 1 <= c_min <= n:
        raise DomainError(f"c_min {c_min} outside [1, {n}]")
    tail = curve[c_min - 1 :]
    best = tail.max()
    # ties go to the larger cutoff
    return c_min + int(np.flatnonzero(tail == best)[-1])


def optimal_cutoff(sorted_runtimes, c_min: int = 1) -> CutoffDecision:
    sr = sorted_runtimes if isinstance(sorted_runtimes, SortedRuntimes) else SortedRuntimes(sorted_runtimes)
    c = argmax_cutoff(throughput_curve(sr), c_min)
    return CutoffDecision(c=c, throughput=throughput(sr, c), predicted_sorted=sr)


def _check_rank(n: int, j: int) -> None:
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    if not 1 <= j <= n:
        raise DomainError(f"rank {j} outside [1, {n}]")


def gaussian_order_stat_expectation(n: int, j: int, mu: float, sigma: float) -> float:
    """E[x_(j)] for n iid N(mu, sigma^2) draws, by adaptive quadrature.

    The normalizing constant n! / ((j-1)! (n-j)!) is handled in log space so
    large n does not overflow.
    """
    _check_rank(n, j)
    if sigma < 0:
        raise DomainError("sigma must be non-negative")
    if n == 1 or sigma == 0:
        return float(mu)
    log_z = special.gammaln(n + 1) - special.gammaln(j) - special.gammaln(n - j + 1)

    def density(x: float) -> float:
        return math.exp(
            log_z
            + (j - 1) * special.log_ndtr(x)
            + (n - j) * special.log_ndtr(-x)
            - 0.5 * x * x
            - _LOG_SQRT_2PI
        )

    # the order-statistic density is sharply peaked for large n; tell quad where
    centre = _elfving_quantile(n, j)
    pts = [centre - 1.0, centre, centre + 1.0]
    mean_std, _ = integrate.quad(
        lambda x: x * density(x), -10.0, 10.0, points=pts, limit=400, epsabs=1e-11, epsrel=1e-11
    )
    return float(mu + sigma * mean_std)


def _elfving_quantile(n: int, j: int) -> float:
    p = (j - math.pi / 8.0) / (n - math.pi / 4.0 + 1.0)
    if not 0.0 < p < 1.0:
        raise DomainError(f"quantile argument {p} outside (0, 1) for n={n}, j={j}")
    return float(special.ndtri(p))


def elfving_expectation(n: int, j: int, mu: float, sigma: float) -> float:
    """Closed-form approximation mu + ndtri((j - pi/8) / (n - pi/4 + 1)) * sigma."""
    _check_rank(n, j)
    if n < 2:
        raise DomainError("Elfving approximation needs n >= 2")
    if sigma < 0:
        raise DomainError("sigma must be non-negative")
    return float(mu + _elfving_quantile(n, j) * sigma)


def elfving_curve(n: int, mu: float, sigma: float) -> np.ndarray:
    """Elfving approximations for every rank 1..n at once."""
    if n < 2:
        raise DomainError("Elfving approximation needs n >= 2")
    if sigma < 0:
        raise DomainError("sigma must be non-negative")
    j = np.arange(1, n + 1, dtype=np.float64)
    return mu + special.ndtri((j - math.pi / 8.0) / (n - math.pi / 4.0 + 1.0)) * sigma


def expected_idle_time(n: int, mu: float, sigma: float) -> float:
    """Average idle time per worker when every iteration waits for all n workers."""
    if n < 2:
        raise DomainError("idle time needs n >= 2")
    return elfving_expectation(n, n, mu, sigma) - elfving_expectation(n, n // 2, mu, sigma)


@dataclass(frozen=True, eq=False)
class OrderStatSummary:
    mean: np.ndarray
    std: np.ndarray
    n_samples: int

    @property
    def stderr(self) -> np.ndarray:
        return self.std / math.sqrt(self.n_samples)


def monte_carlo_order_stats(
    sampler: Callable[[np.random.Generator, int], np.ndarray],
    n_samples: int,
    seed: int | np.random.Generator,
) -> OrderStatSummary:
    """Sample joint runtime vectors, sort each, and summarize every rank.

    ``sampler(rng, size)`` must return an array of shape (size, n).
    """
    if n_samples < 2:
        raise DomainError("need at least two samples")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    draws = np.asarray(sampler(rng, n_samples), dtype=np.float64)
    if draws.ndim != 2 or draws.shape[0] != n_samples:
        raise DomainError(f"sampler returned shape {draws.shape}, expected ({n_samples}, n)")
    bad = ~np.all(np.isfinite(draws), axis=1)
    if bad.any():
        raise ModelError(f"sampler produced non-finite values in sample {int(np.flatnonzero(bad)[0])}")
    ranked = np.sort(draws, axis=1)
    return OrderStatSummary(
        mean=ranked.mean(axis=0), std=ranked.std(axis=0, ddof=1), n_samples=n_samples
    )
