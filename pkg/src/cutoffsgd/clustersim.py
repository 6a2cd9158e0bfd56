"""Synthetic correlated, regime-switching worker runtime traces.

Per iteration, worker j in group g takes

    base_mean_j * multiplier_j + group_std * u_g + base_std_j * eps_j

seconds, where u_g is a unit-variance AR(1) process shared by the group and
eps_j is independent standard normal noise. Runtimes are clamped from below
and rounded to whole nanoseconds.
"""

from __future__ import annotations

import configparser
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ReplayExhausted, ValidationError
from .trace import RuntimeTrace

CLAMP_S = 1e-3


def _per_worker(value, n: int, what: str) -> tuple[float, ...]:
    arr = np.atleast_1d(np.asarray(value, dtype=np.float64))
    if arr.size == 1:
        arr = np.full(n, float(arr[0]))
    if arr.shape != (n,):
        raise ValidationError(f"{what} needs 1 or {n} values, got {arr.size}")
    return tuple(float(x) for x in arr)


def contiguous_groups(n_workers: int, n_groups: int, group_size: int | None = None) -> tuple[int, ...]:
    """Assign workers to groups in contiguous blocks.

    With ``group_size`` the blocks have that size (the last one may be
    short); otherwise sizes are as equal as possible.
    """
    if group_size is not None:
        return tuple(min(j // group_size, n_groups - 1) for j in range(n_workers))
    blocks = np.array_split(np.arange(n_workers), n_groups)
    return tuple(g for g, block in enumerate(blocks) for _ in block)


@dataclass(frozen=True)
class RegimeSpec:
    start_iteration: int
    base_mean: tuple[float, ...]
    base_std: tuple[float, ...]
    groups: tuple[int, ...]
    group_std: float = 0.0
    slow_groups: tuple[int, ...] = ()
    slow_multiplier: float = 1.0

    @classmethod
    def build(cls, n_workers: int, start_iteration: int, base_mean, base_std, groups=1,
              group_std: float = 0.0, slow_groups=(), slow_multiplier: float = 1.0) -> "RegimeSpec":
        if isinstance(groups, (int, np.integer)):
            groups = contiguous_groups(n_workers, int(groups))
        return cls(
            start_iteration=int(start_iteration),
            base_mean=_per_worker(base_mean, n_workers, "base_mean"),
            base_std=_per_worker(base_std, n_workers, "base_std"),
            groups=tuple(int(g) for g in groups),
            group_std=float(group_std),
            slow_groups=tuple(int(g) for g in slow_groups),
            slow_multiplier=float(slow_multiplier),
        )

    def validate(self, n_workers: int) -> None:
        if len(self.base_mean) != n_workers or len(self.base_std) != n_workers or len(self.groups) != n_workers:
            raise ValidationError(f"regime at {self.start_iteration} does not cover {n_workers} workers")
        if any(m <= 0 for m in self.base_mean):
            raise ValidationError("base means must be positive")
        if any(s < 0 for s in self.base_std) or self.group_std < 0:
            raise ValidationError("noise stds must be non-negative")
        if any(g < 0 for g in self.groups):
            raise ValidationError("group ids must be non-negative")
        if self.slow_multiplier <= 0:
            raise ValidationError("slow multiplier must be positive")
        unknown = set(self.slow_groups) - set(self.groups)
        if unknown:
            raise ValidationError(f"slow groups {sorted(unknown)} have no workers")

    def multipliers(self) -> np.ndarray:
        slow = np.isin(np.asarray(self.groups), np.asarray(self.slow_groups, dtype=int))
        return np.where(slow, self.slow_multiplier, 1.0)


@dataclass(frozen=True)
class SimSpec:
    n_workers: int
    iterations: int
    regimes: tuple[RegimeSpec, ...]
    seed: int = 0
    ar_coef: float = 0.9
    clamp: float = CLAMP_S

    def __post_init__(self):
        if self.n_workers <= 0 or self.iterations <= 0:
            raise ValidationError("n_workers and iterations must be positive")
        if not self.regimes or self.regimes[0].start_iteration != 0:
            raise ValidationError("the first regime must start at iteration 0")
        starts = [r.start_iteration for r in self.regimes]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValidationError("regimes must be ordered by strictly increasing start_iteration")
        if not -1.0 < self.ar_coef < 1.0:
            raise ValidationError("ar_coef must lie in (-1, 1)")
        if self.clamp <= 0:
            raise ValidationError("clamp must be positive")
        for r in self.regimes:
            r.validate(self.n_workers)

    def with_seed(self, seed: int) -> "SimSpec":
        return SimSpec(self.n_workers, self.iterations, self.regimes, seed, self.ar_coef, self.clamp)

    def with_iterations(self, iterations: int) -> "SimSpec":
        regimes = tuple(r for r in self.regimes if r.start_iteration < iterations)
        return SimSpec(self.n_workers, iterations, regimes, self.seed, self.ar_coef, self.clamp)

    def regime_at(self, t: int) -> RegimeSpec:
        current = self.regimes[0]
        for r in self.regimes:
            if r.start_iteration <= t:
                current = r
        return current


def simulate_trace(spec: SimSpec) -> RuntimeTrace:
    rng = np.random.default_rng(spec.seed)
    n = spec.n_workers
    n_group_ids = 1 + max(max(r.groups) for r in spec.regimes)
    phi = spec.ar_coef
    innov = math.sqrt(1.0 - phi * phi)
    # unit-variance AR(1) state per group id, started from stationarity
    u = rng.standard_normal(n_group_ids)
    out = np.empty((spec.iterations, n))
    regime_idx = 0
    for t in range(spec.iterations):
        while regime_idx + 1 < len(spec.regimes) and spec.regimes[regime_idx + 1].start_iteration <= t:
            regime_idx += 1
        r = spec.regimes[regime_idx]
        if t > 0:
            u = phi * u + innov * rng.standard_normal(n_group_ids)
        eps = rng.standard_normal(n)
        groups = np.asarray(r.groups)
        row = (
            np.asarray(r.base_mean) * r.multipliers()
            + r.group_std * u[groups]
            + np.asarray(r.base_std) * eps
        )
        out[t] = row
    out = np.round(np.maximum(out, spec.clamp), 9)
    return RuntimeTrace(out)


class TraceReplay:
    """Iteration-indexed runtime source backed by a recorded trace."""

    def __init__(self, trace: RuntimeTrace):
        self.trace = trace
        self.position = 0

    @property
    def n_workers(self) -> int:
        return self.trace.n_workers

    def __len__(self) -> int:
        return self.trace.n_iterations

    def exhausted(self) -> bool:
        return self.position >= self.trace.n_iterations

    def next_row(self) -> np.ndarray:
        if self.exhausted():
            raise ReplayExhausted(f"trace exhausted after {self.trace.n_iterations} rows")
        row = self.trace.runtimes[self.position]
        self.position += 1
        return row

    def reset(self) -> None:
        self.position = 0

    def __iter__(self):
        self.reset()
        while not self.exhausted():
            yield self.next_row()


def replay(trace: RuntimeTrace) -> TraceReplay:
    return TraceReplay(trace)


# presets

def _alternating(n_workers: int, n_groups: int, schedule, *, base_mean, base_std, group_std,
                 multiplier=2.0, group_size=None) -> tuple[RegimeSpec, ...]:
    groups = contiguous_groups(n_workers, n_groups, group_size)
    return tuple(
        RegimeSpec.build(n_workers, start, base_mean, base_std, groups, group_std,
                         () if slow is None else (slow,), multiplier if slow is not None else 1.0)
        for start, slow in schedule
    )


# 158-worker noise is calibrated so a pooled trace has mean ~1.06 s and std ~0.4 s;
# a slow node runs at 3x
_NODE158 = dict(base_mean=1.0, base_std=0.3, group_std=0.13, multiplier=3.0, group_size=40)


def _two_regime_158(seed: int = 0) -> SimSpec:
    # four 40-core nodes minus the parameter server; node 0 is slow until iteration 61
    return SimSpec(158, 200, _alternating(158, 4, [(0, 0), (61, None)], **_NODE158), seed)


def _mixed_158(seed: int = 0) -> SimSpec:
    schedule = [(0, 0), (61, None), (250, 2), (400, None), (560, 1), (700, None),
                (880, 3), (1000, None), (1150, 0), (1300, None)]
    return SimSpec(158, 1500, _alternating(158, 4, schedule, **_NODE158), seed)


def _straggler_158(seed: int = 0) -> SimSpec:
    # a calm spell, then node 2 straggles for the rest of the run
    schedule = [(0, 0), (61, None), (200, 2)]
    return SimSpec(158, 600, _alternating(158, 4, schedule, **_NODE158), seed)


def _two_regime_16(seed: int = 0) -> SimSpec:
    schedule = [(0, 0), (200, None), (450, 2), (700, None), (900, 1), (1150, None),
                (1400, 3), (1650, None), (1850, 0), (2100, None), (2250, 2)]
    regimes = _alternating(16, 4, schedule, base_mean=1.0, base_std=0.2, group_std=0.08)
    return SimSpec(16, 2400, regimes, seed)


def _iid_158(seed: int = 0) -> SimSpec:
    regimes = (RegimeSpec.build(158, 0, 1.057, 0.393),)
    return SimSpec(158, 1000, regimes, seed)


PRESETS = {
    "two-regime-158": _two_regime_158,
    "mixed-158": _mixed_158,
    "straggler-158": _straggler_158,
    "two-regime-16": _two_regime_16,
    "iid-158": _iid_158,
}


def preset(name: str, seed: int = 0) -> SimSpec:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ValidationError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}") from None
    return factory(seed)


# config files

def _floats(text: str) -> list[float]:
    return [float(tok) for tok in text.replace(",", " ").split()]


def _ints(text: str) -> list[int]:
    return [int(tok) for tok in text.replace(",", " ").split()]


def load_sim_spec(path: str | os.PathLike) -> SimSpec:
    """Read a SimSpec from an INI-style key-value file.

    A ``[sim]`` section holds n_workers, iterations and optionally seed,
    ar_coef and clamp; every ``[regime NAME]`` section holds start,
    base_mean, base_std, groups (a count of contiguous groups or one id
    per worker), group_std, slow_groups and slow_multiplier.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if not cp.read(path):
        raise FileNotFoundError(path)
    try:
        sim = cp["sim"]
        n = sim.getint("n_workers")
        regimes = []
        for section in cp.sections():
            if not section.startswith("regime"):
                continue
            r = cp[section]
            groups = _ints(r.get("groups", "1"))
            regimes.append(RegimeSpec.build(
                n,
                r.getint("start"),
                _floats(r.get("base_mean")),
                _floats(r.get("base_std", "0")),
                groups[0] if len(groups) == 1 else groups,
                r.getfloat("group_std", 0.0),
                _ints(r.get("slow_groups", "")),
                r.getfloat("slow_multiplier", 1.0),
            ))
        regimes.sort(key=lambda rg: rg.start_iteration)
        return SimSpec(
            n_workers=n,
            iterations=sim.getint("iterations"),
            regimes=tuple(regimes),
            seed=sim.getint("seed", 0),
            ar_coef=sim.getfloat("ar_coef", 0.9),
            clamp=sim.getfloat("clamp", CLAMP_S),
        )
    except (KeyError, TypeError, ValueError, configparser.Error) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"invalid sim spec {path}: {exc}") from None


def save_sim_spec(spec: SimSpec, path: str | os.PathLike) -> None:
    cp = configparser.ConfigParser()
    cp["sim"] = {
        "n_workers": str(spec.n_workers),
        "iterations": str(spec.iterations),
        "seed": str(spec.seed),
        "ar_coef": repr(spec.ar_coef),
        "clamp": repr(spec.clamp),
    }
    for i, r in enumerate(spec.regimes):
        cp[f"regime {i}"] = {
            "start": str(r.start_iteration),
            "base_mean": " ".join(repr(x) for x in r.base_mean),
            "base_std": " ".join(repr(x) for x in r.base_std),
            "groups": " ".join(str(g) for g in r.groups),
            "group_std": repr(r.group_std),
            "slow_groups": " ".join(str(g) for g in r.slow_groups),
            "slow_multiplier": repr(r.slow_multiplier),
        }
    with open(path, "w", encoding="ascii") as fh:
        cp.write(fh)
