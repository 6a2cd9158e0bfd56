"""Per-worker runtime traces: data model, text file I/O and normalization.

A trace file looks like::

    #workers=3
    0	1.02	0.97	1.5
    1	1.01	0.99	1.43

One row per SGD iteration, tab separated, iteration index first.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError, TraceFormatError, ValidationError

DEFAULT_LAG = 20


@dataclass(frozen=True, eq=False)
class RuntimeTrace:
    """T x n matrix of positive worker runtimes in seconds.

    Row ``t`` holds iteration ``t``; column ``j`` is worker ``j``.
    """

    runtimes: np.ndarray

    def __post_init__(self):
        arr = np.array(self.runtimes, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] == 0:
            raise ValidationError(f"runtimes must be a non-empty 2-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
            raise ValidationError("all runtimes must be finite and strictly positive")
        arr.setflags(write=False)
        object.__setattr__(self, "runtimes", arr)

    @property
    def n_workers(self) -> int:
        return self.runtimes.shape[1]

    @property
    def n_iterations(self) -> int:
        return self.runtimes.shape[0]

    def __len__(self) -> int:
        return self.n_iterations

    def __getitem__(self, t):
        return self.runtimes[t]

    def __eq__(self, other) -> bool:
        if not isinstance(other, RuntimeTrace):
            return NotImplemented
        return self.runtimes.shape == other.runtimes.shape and bool(
            np.array_equal(self.runtimes, other.runtimes)
        )

    def slice(self, start: int, stop: int | None = None) -> "RuntimeTrace":
        return RuntimeTrace(self.runtimes[start:stop])


@dataclass(frozen=True)
class NormalizationSpec:
    scale: float

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValidationError(f"normalization scale must be positive, got {self.scale}")


@dataclass(frozen=True, eq=False)
class LagWindow:
    observations: np.ndarray

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=np.float64)
        if obs.ndim != 2 or obs.shape[0] == 0:
            raise ValidationError(f"lag window must be (lag, n_workers), got {obs.shape}")
        object.__setattr__(self, "observations", obs)

    @property
    def lag(self) -> int:
        return self.observations.shape[0]

    @property
    def n_workers(self) -> int:
        return self.observations.shape[1]


def format_runtime(x: float) -> str:
    # shortest string that parses back to the same double
    return np.format_float_positional(float(x), unique=True, trim="-")


def save_trace(trace: RuntimeTrace, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"#workers={trace.n_workers}\n")
        for t, row in enumerate(trace.runtimes):
            fh.write(str(t))
            for x in row:
                fh.write("\t")
                fh.write(format_runtime(x))
            fh.write("\n")


def load_trace(path: str | os.PathLike) -> RuntimeTrace:
    rows = []
    n_workers = None
    with open(path, encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                if key.strip() == "workers":
                    if n_workers is not None or rows:
                        raise TraceFormatError("misplaced #workers header", lineno)
                    try:
                        n_workers = int(value)
                    except ValueError:
                        raise TraceFormatError("bad #workers header", lineno) from None
                    if n_workers <= 0:
                        raise TraceFormatError("non-positive worker count", lineno)
                continue
            if n_workers is None:
                raise TraceFormatError("missing #workers header", lineno)
            fields = line.split("\t")
            if len(fields) != n_workers + 1:
                raise TraceFormatError(
                    f"expected {n_workers} runtimes, found {len(fields) - 1}", lineno
                )
            try:
                iteration = int(fields[0])
            except ValueError:
                raise TraceFormatError(f"bad iteration index {fields[0]!r}", lineno) from None
            if iteration != len(rows):
                raise TraceFormatError(
                    f"iteration gap: expected {len(rows)}, found {iteration}", lineno
                )
            try:
                values = [float(f) for f in fields[1:]]
            except ValueError:
                raise TraceFormatError("unparseable runtime", lineno) from None
            for v in values:
                if not np.isfinite(v):
                    raise TraceFormatError("non-finite runtime", lineno)
                if v <= 0:
                    raise TraceFormatError("non-positive runtime", lineno)
            rows.append(values)
    if n_workers is None:
        raise TraceFormatError("missing #workers header")
    if not rows:
        raise TraceFormatError("trace has no rows")
    return RuntimeTrace(np.array(rows, dtype=np.float64))


def fit_normalization(trace: RuntimeTrace, lag: int = DEFAULT_LAG) -> NormalizationSpec:
    """Scale = twice the mean runtime over the first ``lag`` rows."""
    if lag <= 0:
        raise ValueError("lag must be positive")
    if trace.n_iterations < lag:
        raise InsufficientDataError(
            f"need at least {lag} rows to fit normalization, trace has {trace.n_iterations}"
        )
    first = trace.runtimes[:lag]
    return NormalizationSpec(scale=float(2.0 * np.mean(first, dtype=np.float64)))


def normalize(trace: RuntimeTrace, spec: NormalizationSpec) -> RuntimeTrace:
    return RuntimeTrace(trace.runtimes / spec.scale)


def denormalize(trace: RuntimeTrace, spec: NormalizationSpec) -> RuntimeTrace:
    return RuntimeTrace(trace.runtimes * spec.scale)


def lag_windows(values: np.ndarray, lag: int) -> np.ndarray:
    """All stride-1 windows of ``lag`` consecutive rows, shape (T - lag + 1, lag, n)."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] < lag:
        raise InsufficientDataError(f"need at least {lag} rows, got {values.shape[0]}")
    windows = np.lib.stride_tricks.sliding_window_view(values, lag, axis=0)
    # sliding_window_view puts the window axis last
    return np.ascontiguousarray(np.moveaxis(windows, -1, 1))
