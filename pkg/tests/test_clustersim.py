import numpy as np
import pytest

from cutoffsgd import clustersim as cs
from cutoffsgd.clustersim import RegimeSpec, SimSpec, TraceReplay, simulate_trace
from cutoffsgd.errors import ReplayExhausted, ValidationError
from cutoffsgd.orderstats import gaussian_order_stat_expectation
from cutoffsgd.trace import RuntimeTrace


def spec_with(regimes, n=6, iterations=50, **kw):
    return SimSpec(n, iterations, tuple(regimes), **kw)


def test_zero_noise_is_constant_at_base_means():
    means = [1.0, 1.5, 2.0, 0.5, 0.7, 0.9]
    spec = spec_with([RegimeSpec.build(6, 0, means, 0.0)])
    tr = simulate_trace(spec)
    np.testing.assert_array_equal(tr.runtimes, np.tile(means, (50, 1)))


def test_shared_group_noise_only():
    spec = spec_with([RegimeSpec.build(6, 0, 1.0, 0.0, groups=2, group_std=0.1)])
    r = simulate_trace(spec).runtimes
    assert np.all(r[:, :3] == r[:, [0]])
    assert np.all(r[:, 3:] == r[:, [3]])
    assert not np.all(r[:, 0] == r[:, 3])


def test_zero_noise_is_piecewise_constant():
    regimes = [
        RegimeSpec.build(4, 0, 1.0, 0.0, groups=2, slow_groups=(0,), slow_multiplier=3.0),
        RegimeSpec.build(4, 10, 1.0, 0.0, groups=2),
        RegimeSpec.build(4, 30, 2.0, 0.0, groups=2, slow_groups=(1,), slow_multiplier=1.5),
    ]
    r = simulate_trace(spec_with(regimes, n=4, iterations=40)).runtimes
    np.testing.assert_array_equal(r[:10], np.tile([3, 3, 1, 1], (10, 1)))
    np.testing.assert_array_equal(r[10:30], np.ones((20, 4)))
    np.testing.assert_array_equal(r[30:], np.tile([2, 2, 3, 3], (10, 1)))


def test_regime_switch_at_61_halves_slow_group():
    groups = cs.contiguous_groups(158, 4, 40)
    regimes = (
        RegimeSpec.build(158, 0, 1.0, 0.2, groups, 0.08, (0,), 2.0),
        RegimeSpec.build(158, 61, 1.0, 0.2, groups, 0.08),
    )
    r = simulate_trace(SimSpec(158, 200, regimes, seed=3)).runtimes
    slow = np.asarray(groups) == 0
    ratio = r[:61, slow].mean() / r[61:, slow].mean()
    assert ratio == pytest.approx(2.0, rel=0.05)


def test_ar1_group_noise_is_time_correlated():
    spec = spec_with([RegimeSpec.build(2, 0, 10.0, 0.0, groups=1, group_std=1.0)], n=2, iterations=5000)
    u = simulate_trace(spec).runtimes[:, 0] - 10.0
    lag1 = np.corrcoef(u[:-1], u[1:])[0, 1]
    assert lag1 == pytest.approx(0.9, abs=0.03)
    assert u.std() == pytest.approx(1.0, abs=0.15)


def test_clamp_and_rounding():
    spec = spec_with([RegimeSpec.build(3, 0, 0.01, 1.0)], n=3, iterations=200)
    r = simulate_trace(spec).runtimes
    assert r.min() == 1e-3
    np.testing.assert_array_equal(r, np.round(r, 9))


def test_simulation_is_deterministic_per_seed():
    a = simulate_trace(cs.preset("two-regime-16", 4))
    b = simulate_trace(cs.preset("two-regime-16", 4))
    c = simulate_trace(cs.preset("two-regime-16", 5))
    assert a == b
    assert not a == c


def test_iid_preset_matches_quadrature_max():
    r = simulate_trace(cs.preset("iid-158", 0)).runtimes
    mx = r.max(axis=1)
    exact = gaussian_order_stat_expectation(158, 158, 1.057, 0.393)
    assert abs(mx.mean() - exact) <= 3 * mx.std(ddof=1) / np.sqrt(len(mx))


@pytest.mark.parametrize("name", sorted(cs.PRESETS))
def test_presets_are_valid(name):
    spec = cs.preset(name)
    tr = simulate_trace(spec.with_iterations(min(spec.iterations, 80)))
    assert isinstance(tr, RuntimeTrace)
    assert tr.n_workers == spec.n_workers


def test_two_regime_158_shape():
    spec = cs.preset("two-regime-158")
    assert spec.n_workers == 158
    assert [r.start_iteration for r in spec.regimes] == [0, 61]
    assert int(np.sum(spec.regimes[0].multipliers() > 1)) == 40


def test_unknown_preset_lists_names():
    with pytest.raises(ValidationError, match="two-regime-158"):
        cs.preset("nope")


def test_contiguous_groups():
    assert cs.contiguous_groups(158, 4, 40).count(3) == 38
    assert cs.contiguous_groups(7, 3) == (0, 0, 0, 1, 1, 2, 2)


@pytest.mark.parametrize(
    "build",
    [
        lambda: spec_with([RegimeSpec.build(6, 5, 1.0, 0.1)]),
        lambda: spec_with([RegimeSpec.build(6, 0, 1.0, 0.1), RegimeSpec.build(6, 0, 1.0, 0.1)]),
        lambda: spec_with([RegimeSpec.build(6, 0, -1.0, 0.1)]),
        lambda: spec_with([RegimeSpec.build(6, 0, 1.0, -0.1)]),
        lambda: spec_with([RegimeSpec.build(6, 0, 1.0, 0.1, groups=2, slow_groups=(5,), slow_multiplier=2)]),
        lambda: spec_with([RegimeSpec.build(6, 0, 1.0, 0.1)], ar_coef=1.0),
        lambda: spec_with([RegimeSpec.build(5, 0, 1.0, 0.1)]),
    ],
)
def test_invalid_specs(build):
    with pytest.raises(ValidationError):
        build()


def test_spec_file_round_trip(tmp_path):
    spec = cs.preset("straggler-158", 9)
    path = tmp_path / "s.ini"
    cs.save_sim_spec(spec, path)
    assert cs.load_sim_spec(path) == spec


def test_hand_written_spec_file(tmp_path):
    path = tmp_path / "s.ini"
    path.write_text(
        "[sim]\nn_workers = 4\niterations = 30\nseed = 2\n\n"
        "[regime slow]\nstart = 0\nbase_mean = 1.0\nbase_std = 0.1\ngroups = 2\n"
        "group_std = 0.05\nslow_groups = 1\nslow_multiplier = 2.5\n\n"
        "[regime calm]\nstart = 12\nbase_mean = 1.0\nbase_std = 0.1\ngroups = 0 0 1 1\n"
    )
    spec = cs.load_sim_spec(path)
    assert spec.seed == 2
    np.testing.assert_array_equal(spec.regimes[0].multipliers(), [1, 1, 2.5, 2.5])
    assert spec.regime_at(20).start_iteration == 12
    assert simulate_trace(spec).n_iterations == 30


def test_bad_spec_file(tmp_path):
    path = tmp_path / "s.ini"
    path.write_text("[sim]\nn_workers = four\n")
    with pytest.raises(ValidationError):
        cs.load_sim_spec(path)


def test_replay_three_rows():
    tr = RuntimeTrace(np.arange(1, 7, dtype=float).reshape(3, 2))
    rp = cs.replay(tr)
    rows = [rp.next_row() for _ in range(3)]
    for got, want in zip(rows, tr.runtimes):
        np.testing.assert_array_equal(got, want)
    with pytest.raises(ReplayExhausted):
        rp.next_row()
    again = list(rp)
    assert len(again) == 3
    np.testing.assert_array_equal(np.array(again), tr.runtimes)


def test_replay_exhaustion_is_lookup_error():
    rp = TraceReplay(RuntimeTrace([[1.0]]))
    rp.next_row()
    assert rp.exhausted()
    with pytest.raises(LookupError):
        rp.next_row()
