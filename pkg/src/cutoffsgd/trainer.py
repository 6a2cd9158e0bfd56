"""Joint ELBO training of the runtime model and its guide, plus checkpoints."""

from __future__ import annotations

import base64
import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import ndmath as nd
from .dmm import DeepMarkovModel, DmmConfig, init_dmm_params
from .errors import CheckpointError, InsufficientDataError, TrainingError, ValidationError
from .guide import GuideConfig, LeftRightGuide, init_guide_params
from .ndmath import Node, ParameterStore
from .trace import DEFAULT_LAG, NormalizationSpec, RuntimeTrace, fit_normalization, lag_windows

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cutoffsgd-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 10.0
    lag: int = DEFAULT_LAG
    elbo_samples: int = 1
    d_z: int = 32
    hidden: int = 64
    # cosine decay from lr to lr * lr_final_fraction over all steps; 1.0 keeps lr constant
    lr_final_fraction: float = 1.0
    # also score the row after each window through the transition out of its last latent
    lookahead: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        for name in ("batch_size", "lag", "elbo_samples", "d_z", "hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.lr_final_fraction <= 1.0:
            raise ValueError("lr_final_fraction must lie in (0, 1]")

    def lr_at(self, step: int, total_steps: int) -> float:
        if self.lr_final_fraction == 1.0 or total_steps <= 1:
            return self.lr
        frac = self.lr_final_fraction
        progress = min(step / (total_steps - 1), 1.0)
        return self.lr * (frac + (1.0 - frac) * 0.5 * (1.0 + math.cos(math.pi * progress)))


@dataclass(eq=False)
class ModelCheckpoint:
    dmm_config: DmmConfig
    guide_config: GuideConfig
    theta: ParameterStore
    phi: ParameterStore
    normalization: NormalizationSpec
    metadata: dict = field(default_factory=dict)
    # per-batch training ELBO, not persisted
    history: list = field(default_factory=list)

    def __post_init__(self):
        _check_shapes(self.theta, self.dmm_config.expected_shapes(), "generative")
        _check_shapes(self.phi, self.guide_config.expected_shapes(), "guide")
        if self.dmm_config.n_workers != self.guide_config.n_workers or self.dmm_config.d_z != self.guide_config.d_z:
            raise ValidationError("model and guide configs disagree on n_workers or d_z")

    @property
    def n_workers(self) -> int:
        return self.dmm_config.n_workers

    @property
    def lag(self) -> int:
        return self.guide_config.lag

    def model(self) -> DeepMarkovModel:
        return DeepMarkovModel(self.dmm_config, self.theta)

    def guide(self) -> LeftRightGuide:
        return LeftRightGuide(self.guide_config, self.phi, self.model())

    def equals(self, other: "ModelCheckpoint") -> bool:
        return (
            self.dmm_config == other.dmm_config
            and self.guide_config == other.guide_config
            and self.normalization == other.normalization
            and self.theta.equals(other.theta)
            and self.phi.equals(other.phi)
            and self.metadata == other.metadata
        )


def _check_shapes(store: ParameterStore, expected: dict, what: str) -> None:
    if set(store.names()) != set(expected):
        missing = sorted(set(expected) - set(store.names()))
        extra = sorted(set(store.names()) - set(expected))
        raise ValidationError(f"{what} parameters do not match config (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if store[name].shape != tuple(shape):
            raise ValidationError(f"{what} parameter {name!r} has shape {store[name].shape}, config implies {tuple(shape)}")


def elbo(
    model: DeepMarkovModel,
    guide: LeftRightGuide,
    windows,
    rng: np.random.Generator | int | None = None,
    n_samples: int = 1,
    noise: np.ndarray | None = None,
    lookahead: bool = False,
) -> Node:
    """Monte Carlo ELBO averaged over windows and samples, as a scalar node.

    ``windows`` has shape (batch, L, n) or (L, n). Samples are realized by
    repeating every window ``n_samples`` times along the batch axis.

    With ``lookahead`` each window carries one extra final row. The guide
    sees only the first L rows and the last latent is drawn from the
    transition out of the guide's final state, so its latent term cancels
    and only the emission of the extra row remains. This is still a lower
    bound on the likelihood of all L + 1 rows, and it trains the same path
    that one-step prediction takes.
    """
    x = np.asarray(getattr(windows, "observations", windows), dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if n_samples > 1:
        x = np.concatenate([x] * n_samples, axis=0)
    if noise is None:
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        noise = rng.standard_normal((x.shape[1], x.shape[0], guide.config.d_z))
    noise = np.asarray(noise, dtype=np.float64)
    seen = x[:, :-1] if lookahead else x
    post = guide.sample(seen, noise=noise[: seen.shape[1]])
    log_p = model.log_joint(post.z_seq, seen)
    per_window = log_p - post.log_q
    if lookahead:
        tr = model.transition(post.z_seq[-1])
        z_next = nd.gaussian_reparameterized_sample(tr.mean, tr.std, noise[-1])
        em = model.emission(z_next)
        per_window = per_window + nd.gaussian_log_prob(x[:, -1, :], em.mean, em.std)
    value = nd.reduce_mean(per_window)
    if not np.isfinite(value.value):
        raise TrainingError("non-finite ELBO")
    return value


def elbo_per_window(model, guide, windows, rng, n_samples: int = 1) -> np.ndarray:
    """Per-window ELBO estimates (no graph kept), shape (batch,)."""
    x = np.asarray(windows, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    batch = x.shape[0]
    rep = np.concatenate([x] * n_samples, axis=0) if n_samples > 1 else x
    post = guide.sample(rep, rng=rng)
    vals = (model.log_joint(post.z_seq, rep) - post.log_q).value
    return vals.reshape(n_samples, batch).mean(axis=0)


def init_checkpoint(n_workers: int, normalization: NormalizationSpec, config: TrainConfig) -> ModelCheckpoint:
    dmm_cfg = DmmConfig(n_workers=n_workers, d_z=config.d_z, transition_hidden=config.hidden, emission_hidden=config.hidden)
    guide_cfg = GuideConfig(n_workers=n_workers, d_z=config.d_z, hidden=config.hidden, lag=config.lag)
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    theta = init_dmm_params(dmm_cfg, np.random.default_rng(seeds[0]))
    phi = init_guide_params(guide_cfg, np.random.default_rng(seeds[1]))
    return ModelCheckpoint(dmm_cfg, guide_cfg, theta, phi, normalization)


def train(trace: RuntimeTrace, config: TrainConfig = TrainConfig(), progress=None) -> ModelCheckpoint:
    """Fit generative and guide parameters by stochastic ELBO ascent.

    Windows of length ``config.lag`` are cut with stride 1 from the trace
    after dividing it by the normalization fitted on its first window.
    """
    if trace.n_iterations < config.lag + 1:
        raise InsufficientDataError(f"training needs at least {config.lag + 1} rows, trace has {trace.n_iterations}")
    norm = fit_normalization(trace, config.lag)
    windows = lag_windows(trace.runtimes / norm.scale, config.lag + int(config.lookahead))
    ckpt = init_checkpoint(trace.n_workers, norm, config)
    model, guide = ckpt.model(), ckpt.guide()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(3)[2])

    history: list[float] = []
    epoch_means: list[float] = []
    steps_per_epoch = -(-len(windows) // config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(windows))
        batch_vals = []
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            batch = windows[order[start : start + config.batch_size]]
            ckpt.theta.zero_grad()
            ckpt.phi.zero_grad()
            try:
                objective = elbo(model, guide, batch, rng, config.elbo_samples, lookahead=config.lookahead)
            except TrainingError as exc:
                raise TrainingError(f"{exc} at epoch {epoch}, batch {b}") from None
            nd.backward(objective, -1.0)
            try:
                nd.adam_step([ckpt.theta, ckpt.phi], config.lr_at(step, total_steps), config.betas,
                             config.eps, config.clip_norm)
            except TrainingError as exc:
                raise TrainingError(f"{exc} at epoch {epoch}, batch {b}") from None
            batch_vals.append(float(objective.value))
            step += 1
        history.extend(batch_vals)
        epoch_means.append(float(np.mean(batch_vals)))
        log.info("epoch %d: mean ELBO %.4f", epoch, epoch_means[-1])
        if progress is not None:
            progress(epoch, epoch_means[-1])

    ckpt.metadata = {
        "epochs": config.epochs,
        "trained": config.epochs > 0,
        "final_elbo": epoch_means[-1] if epoch_means else None,
        "epoch_elbo": epoch_means,
        "n_windows": int(len(windows)),
        "train_config": _config_dict(config),
    }
    ckpt.history = history
    return ckpt


def _config_dict(config) -> dict:
    d = dataclasses.asdict(config)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _encode_store(store: ParameterStore) -> dict:
    return {
        name: {
            "shape": list(store[name].shape),
            "data": base64.b64encode(np.ascontiguousarray(store[name], dtype="<f8").tobytes()).decode("ascii"),
        }
        for name in store.names()
    }


def _decode_store(entries: dict) -> ParameterStore:
    store = ParameterStore()
    for name, entry in entries.items():
        shape = tuple(int(s) for s in entry["shape"])
        raw = base64.b64decode(entry["data"], validate=True)
        count = int(np.prod(shape, dtype=np.int64))
        if len(raw) != 8 * count:
            raise CheckpointError(f"parameter {name!r}: {len(raw)} bytes for shape {shape}")
        store.create(name, np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64))
    return store


def save_checkpoint(ckpt: ModelCheckpoint, path: str | os.PathLike) -> None:
    meta = dict(ckpt.metadata)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dmm_config": dataclasses.asdict(ckpt.dmm_config),
        "guide_config": dataclasses.asdict(ckpt.guide_config),
        "normalization": {"scale": ckpt.normalization.scale},
        "metadata": meta,
        "theta": _encode_store(ckpt.theta),
        "phi": _encode_store(ckpt.phi),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str | os.PathLike) -> ModelCheckpoint:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint file {path}: {exc}") from None
    except UnicodeDecodeError:
        raise CheckpointError(f"corrupt checkpoint file {path}: not UTF-8 text") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}, expected {CHECKPOINT_VERSION}")
    try:
        dmm_cfg = DmmConfig(**doc["dmm_config"])
        guide_cfg = GuideConfig(**doc["guide_config"])
        norm = NormalizationSpec(float(doc["normalization"]["scale"]))
        theta = _decode_store(doc["theta"])
        phi = _decode_store(doc["phi"])
        metadata = doc.get("metadata", {})
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, (ValidationError, CheckpointError)):
            raise
        raise CheckpointError(f"corrupt checkpoint file {path}: {exc}") from None
    return ModelCheckpoint(dmm_cfg, guide_cfg, theta, phi, norm, metadata)


def smoothed(values, width: int = 50) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.size < width:
        return values.copy()
    kernel = np.ones(width) / width
    return np.convolve(values, kernel, mode="valid")


def predictive_log_density(ckpt: ModelCheckpoint, trace: RuntimeTrace, start: int, n_samples: int = 32, seed: int = 0) -> float:
    """Mean one-step predictive log-density (normalized space) of rows start.. of a trace.

    Each row t is scored under the K-component mixture obtained by pushing
    guide samples of the preceding window through transition and emission.
    """
    lag = ckpt.lag
    rng = np.random.default_rng(seed)
    model, guide = ckpt.model(), ckpt.guide()
    x = trace.runtimes / ckpt.normalization.scale
    scores = []
    for t in range(max(start, lag), trace.n_iterations):
        window = np.repeat(x[t - lag : t][None], n_samples, axis=0)
        post = guide.sample(window, rng=rng)
        tr = model.transition(post.z_seq[-1])
        z_next = tr.mean.value + tr.std.value * rng.standard_normal(tr.mean.shape)
        em = model.emission(z_next)
        lp = nd.gaussian_log_prob(np.broadcast_to(x[t], em.mean.shape), em.mean.value, em.std.value).value
        scores.append(float(np.logaddexp.reduce(lp) - math.log(n_samples)))
    return float(np.mean(scores))
