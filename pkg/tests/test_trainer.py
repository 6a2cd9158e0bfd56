import json
import math

import numpy as np
import pytest
from scipy import stats

from cutoffsgd import ndmath as nd
from cutoffsgd.clustersim import preset, simulate_trace
from cutoffsgd.errors import CheckpointError, InsufficientDataError, ValidationError
from cutoffsgd.trace import RuntimeTrace
from cutoffsgd.trainer import (
    TrainConfig,
    elbo,
    init_checkpoint,
    load_checkpoint,
    predictive_log_density,
    save_checkpoint,
    smoothed,
    train,
)
from cutoffsgd.trace import NormalizationSpec
from fdcheck import check_store_gradients
from oracles import kalman_log_likelihood, make_linear_gaussian

SMALL = dict(lag=5, d_z=3, hidden=6, batch_size=8)


def small_trace(iterations=60, seed=0):
    return simulate_trace(preset("two-regime-16", seed).with_iterations(iterations))


def test_elbo_is_a_lower_bound_on_kalman_likelihood():
    ckpt = init_checkpoint(3, NormalizationSpec(1.0), TrainConfig(seed=2, **SMALL))
    params = make_linear_gaussian(ckpt)
    x = np.random.default_rng(0).uniform(0.3, 0.7, size=(5, 3))
    log_px = kalman_log_likelihood(x, *params)
    model, guide = ckpt.model(), ckpt.guide()
    reps = np.repeat(x[None], 4000, axis=0)
    post = guide.sample(reps, rng=1)
    w = (model.log_joint(post.z_seq, reps) - post.log_q).value
    se = w.std(ddof=1) / math.sqrt(w.size)
    assert w.mean() <= log_px + 3 * se
    # the importance-weighted bound tightens towards log p(x)
    iw = float(np.logaddexp.reduce(w) - math.log(w.size))
    assert w.mean() < iw <= log_px + 0.05


def test_elbo_gradients_match_finite_differences():
    ckpt = init_checkpoint(3, NormalizationSpec(1.0), TrainConfig(seed=1, **SMALL))
    model, guide = ckpt.model(), ckpt.guide()
    x = np.random.default_rng(3).uniform(0.2, 0.9, size=(4, 5, 3))
    noise = np.random.default_rng(4).standard_normal((5, 4, 3))
    worst = check_store_gradients([ckpt.theta, ckpt.phi], lambda: elbo(model, guide, x, noise=noise), n_entries=200)
    assert worst < 1e-4


def test_lookahead_elbo_bounds_the_longer_window():
    ckpt = init_checkpoint(3, NormalizationSpec(1.0), TrainConfig(seed=2, **SMALL))
    params = make_linear_gaussian(ckpt)
    x = np.random.default_rng(5).uniform(0.3, 0.7, size=(6, 3))
    log_px = kalman_log_likelihood(x, *params)
    model, guide = ckpt.model(), ckpt.guide()
    vals = np.array([elbo(model, guide, x, rng=s, n_samples=200, lookahead=True).value for s in range(10)])
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    assert vals.mean() <= log_px + 3 * se
    # with shared noise the extra row only adds its emission term to the plain bound
    noise = np.random.default_rng(6).standard_normal((6, 1, 3))
    plain = elbo(model, guide, x[:5], noise=noise[:5]).value
    post = guide.sample(x[:5], noise=noise[:5])
    tr = model.transition(post.z_seq[-1]).numpy()
    em = model.emission(tr.mean + tr.std * noise[5]).numpy()
    extra = stats.norm.logpdf(x[5], em.mean[0], em.std[0]).sum()
    assert elbo(model, guide, x, noise=noise, lookahead=True).value == pytest.approx(plain + extra, rel=1e-12)


def test_lookahead_elbo_gradients_match_finite_differences():
    ckpt = init_checkpoint(3, NormalizationSpec(1.0), TrainConfig(seed=1, **SMALL))
    model, guide = ckpt.model(), ckpt.guide()
    x = np.random.default_rng(3).uniform(0.2, 0.9, size=(4, 6, 3))
    noise = np.random.default_rng(4).standard_normal((6, 4, 3))
    fn = lambda: elbo(model, guide, x, noise=noise, lookahead=True)  # noqa: E731
    assert check_store_gradients([ckpt.theta, ckpt.phi], fn, n_entries=200) < 1e-4


def test_lookahead_training_uses_longer_windows():
    cfg = TrainConfig(epochs=1, lookahead=True, **SMALL)
    ckpt = train(small_trace(30), cfg)
    assert ckpt.metadata["n_windows"] == 30 - 6 + 1
    assert ckpt.metadata["train_config"]["lookahead"] is True


def test_lr_schedule():
    cfg = TrainConfig(lr=1e-2, lr_final_fraction=0.1)
    assert cfg.lr_at(0, 100) == pytest.approx(1e-2)
    assert cfg.lr_at(99, 100) == pytest.approx(1e-3)
    assert cfg.lr_at(49.5, 100) == pytest.approx(5.5e-3)
    assert TrainConfig(lr=1e-2).lr_at(50, 100) == 1e-2
    with pytest.raises(ValueError):
        TrainConfig(lr_final_fraction=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_training_raises_the_elbo():
    tr = small_trace(120)
    ckpt = train(tr, TrainConfig(epochs=8, lr=1e-2, **SMALL))
    curve = ckpt.metadata["epoch_elbo"]
    assert len(curve) == 8
    assert curve[-1] > curve[0]
    assert ckpt.metadata["n_windows"] == 120 - 5 + 1


def test_training_is_deterministic_per_seed():
    tr = small_trace()
    a = train(tr, TrainConfig(epochs=2, seed=4, **SMALL))
    b = train(tr, TrainConfig(epochs=2, seed=4, **SMALL))
    c = train(tr, TrainConfig(epochs=2, seed=5, **SMALL))
    assert a.equals(b)
    assert not a.equals(c)


def test_zero_epochs_returns_initialization():
    tr = small_trace()
    ckpt = train(tr, TrainConfig(epochs=0, **SMALL))
    assert ckpt.metadata["trained"] is False
    fresh = init_checkpoint(tr.n_workers, ckpt.normalization, TrainConfig(epochs=0, **SMALL))
    assert ckpt.theta.equals(fresh.theta) and ckpt.phi.equals(fresh.phi)


def test_normalization_uses_first_window():
    tr = small_trace()
    ckpt = train(tr, TrainConfig(epochs=0, **SMALL))
    assert ckpt.normalization.scale == pytest.approx(2.0 * tr.runtimes[:5].mean())


def test_too_short_trace():
    with pytest.raises(InsufficientDataError):
        train(RuntimeTrace(np.ones((5, 2))), TrainConfig(epochs=1, **SMALL))


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    ckpt = train(small_trace(), TrainConfig(epochs=1, **SMALL))
    path = tmp_path / "m.json"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.equals(ckpt)
    x = small_trace().runtimes[:5] / ckpt.normalization.scale
    a = back.guide().sample(x, rng=0).z_values
    b = ckpt.guide().sample(x, rng=0).z_values
    np.testing.assert_array_equal(a, b)


def test_corrupt_checkpoints(tmp_path):
    ckpt = train(small_trace(), TrainConfig(epochs=0, **SMALL))
    path = tmp_path / "m.json"
    save_checkpoint(ckpt, path)
    doc = json.loads(path.read_text())

    bad = tmp_path / "bad.json"
    bad.write_text(path.read_text()[:200])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)

    for mutate, err in [
        (lambda d: d.update(format="other"), CheckpointError),
        (lambda d: d.update(version=99), CheckpointError),
        (lambda d: d["theta"].pop("init.mu"), ValidationError),
        (lambda d: d["phi"]["loc.b0"].update(data="AAAA"), CheckpointError),
        (lambda d: d["dmm_config"].update(d_z=7), ValidationError),
    ]:
        d = json.loads(json.dumps(doc))
        mutate(d)
        bad.write_text(json.dumps(d))
        with pytest.raises(err):
            load_checkpoint(bad)


def test_smoothed():
    np.testing.assert_allclose(smoothed(np.arange(10.0), 5), np.arange(2.0, 8.0))
    np.testing.assert_array_equal(smoothed([1.0, 2.0], 5), [1.0, 2.0])


def test_predictive_log_density_is_finite_and_improves():
    tr = small_trace(120, seed=1)
    before = train(tr.slice(0, 80), TrainConfig(epochs=0, **SMALL))
    after = train(tr.slice(0, 80), TrainConfig(epochs=10, lr=1e-2, **SMALL))
    a = predictive_log_density(before, tr, 80, n_samples=16)
    b = predictive_log_density(after, tr, 80, n_samples=16)
    assert np.isfinite(a) and np.isfinite(b)
    assert b > a
