import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cutoffsgd.errors import InsufficientDataError, TraceFormatError, ValidationError
from cutoffsgd.trace import (
    LagWindow,
    NormalizationSpec,
    RuntimeTrace,
    denormalize,
    fit_normalization,
    lag_windows,
    load_trace,
    normalize,
    save_trace,
)


def write(tmp_path, text):
    p = tmp_path / "t.tsv"
    p.write_text(text)
    return p


def test_load_hand_written_file(tmp_path):
    p = write(tmp_path, "#workers=2\n0\t1.0\t2.0\n1\t1.1\t1.9\n2\t0.9\t2.1\n")
    tr = load_trace(p)
    assert tr.n_workers == 2
    assert tr.n_iterations == 3
    np.testing.assert_array_equal(tr.runtimes, [[1.0, 2.0], [1.1, 1.9], [0.9, 2.1]])


def test_zero_runtime_reports_line(tmp_path):
    p = write(tmp_path, "#workers=2\n0\t1.0\t2.0\n1\t0.0\t1.9\n")
    with pytest.raises(TraceFormatError, match="non-positive runtime at line 3"):
        load_trace(p)


def test_iteration_gap(tmp_path):
    p = write(tmp_path, "#workers=1\n0\t1.0\n2\t1.0\n")
    with pytest.raises(TraceFormatError, match="iteration gap"):
        load_trace(p)


@pytest.mark.parametrize(
    "text, message",
    [
        ("0\t1.0\n", "missing #workers"),
        ("#workers=2\n0\t1.0\n", "expected 2 runtimes, found 1"),
        ("#workers=1\n0\tabc\n", "unparseable"),
        ("#workers=1\n0\tnan\n", "non-finite"),
        ("#workers=1\n", "no rows"),
    ],
)
def test_malformed_files(tmp_path, text, message):
    with pytest.raises(TraceFormatError, match=message):
        load_trace(write(tmp_path, text))


def test_trace_rejects_bad_arrays():
    with pytest.raises(ValidationError):
        RuntimeTrace(np.array([[1.0, -1.0]]))
    with pytest.raises(ValidationError):
        RuntimeTrace(np.array([1.0, 2.0]))


def test_trace_is_read_only():
    tr = RuntimeTrace(np.ones((2, 2)))
    with pytest.raises(ValueError):
        tr.runtimes[0, 0] = 5.0


positive_traces = hnp.arrays(
    np.float64,
    hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=6),
    elements=st.floats(min_value=1e-9, max_value=1e6, allow_nan=False, allow_infinity=False, allow_subnormal=False),
)


@settings(max_examples=60, deadline=None)
@given(positive_traces)
def test_save_load_round_trip_is_bit_exact(tmp_path_factory, values):
    tr = RuntimeTrace(values)
    p = tmp_path_factory.mktemp("rt") / "t.tsv"
    save_trace(tr, p)
    assert load_trace(p) == tr


@pytest.mark.parametrize("value", [5e-324, 2.2250738585072014e-308, 1.7976931348623157e308, 0.1, 1 / 3])
def test_extreme_values_round_trip(tmp_path, value):
    tr = RuntimeTrace(np.array([[value, 1.0]]))
    save_trace(tr, tmp_path / "t.tsv")
    assert load_trace(tmp_path / "t.tsv") == tr


def test_fit_normalization_examples():
    assert fit_normalization(RuntimeTrace(np.ones((20, 3))), 20).scale == 2.0
    two = np.tile([1.0, 3.0], (20, 1))
    assert fit_normalization(RuntimeTrace(two), 20).scale == 4.0
    with pytest.raises(InsufficientDataError):
        fit_normalization(RuntimeTrace(np.ones((5, 2))), 20)


def test_fit_normalization_ignores_later_rows():
    rng = np.random.default_rng(0)
    base = rng.uniform(0.5, 2.0, size=(30, 4))
    other = base.copy()
    other[20:] *= 7.0
    assert fit_normalization(RuntimeTrace(base), 20) == fit_normalization(RuntimeTrace(other), 20)


def test_normalize_examples():
    assert normalize(RuntimeTrace([[2.0]]), NormalizationSpec(2.0)).runtimes[0, 0] == 1.0
    assert normalize(RuntimeTrace([[1.057]]), NormalizationSpec(2.114)).runtimes[0, 0] == 0.5
    with pytest.raises(ValidationError):
        NormalizationSpec(0.0)


@settings(max_examples=40, deadline=None)
@given(positive_traces, st.floats(min_value=1e-3, max_value=1e3))
def test_normalize_round_trip_and_order(values, scale):
    tr = RuntimeTrace(values)
    spec = NormalizationSpec(scale)
    scaled = normalize(tr, spec)
    np.testing.assert_allclose(denormalize(scaled, spec).runtimes, tr.runtimes, rtol=1e-12, atol=0)
    np.testing.assert_array_equal(
        np.argsort(scaled.runtimes, axis=1, kind="stable"), np.argsort(tr.runtimes, axis=1, kind="stable")
    )


def test_normalize_does_not_mutate_input():
    values = np.array([[1.0, 2.0]])
    tr = RuntimeTrace(values)
    normalize(tr, NormalizationSpec(4.0))
    np.testing.assert_array_equal(tr.runtimes, [[1.0, 2.0]])


def test_lag_windows_shape_and_content():
    values = np.arange(12, dtype=float).reshape(6, 2) + 1
    w = lag_windows(values, 4)
    assert w.shape == (3, 4, 2)
    np.testing.assert_array_equal(w[1], values[1:5])
    with pytest.raises(InsufficientDataError):
        lag_windows(values, 7)


def test_lag_window_type():
    w = LagWindow(np.ones((20, 3)))
    assert (w.lag, w.n_workers) == (20, 3)
    with pytest.raises(ValidationError):
        LagWindow(np.ones(3))


def test_slice():
    tr = RuntimeTrace(np.arange(1, 7, dtype=float).reshape(3, 2))
    assert tr.slice(1).n_iterations == 2
    assert tr.slice(0, 1) == RuntimeTrace([[1.0, 2.0]])
