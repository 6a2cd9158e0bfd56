"""Deep Markov model over normalized worker-runtime vectors.

Latent dynamics use a gated transition: a sigmoid gate mixes a linear map of
the previous state with a nonlinear proposal; the transition std is a
softplus layer on the rectified mean. Emissions are two stacked linear
layers for the mean and a ReLU/softplus network of that mean for the std.
The first latent of a window is drawn from a learned initial Gaussian.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import ndmath as nd
from .errors import ModelError, ShapeError
from .ndmath import MLPSpec, Node, ParameterStore

_INIT_STD_RAW = float(np.log(np.expm1(1.0)))  # softplus^-1(1)


@dataclass(frozen=True)
class DmmConfig:
    n_workers: int
    d_z: int = 32
    transition_hidden: int = 64
    emission_hidden: int = 64

    def __post_init__(self):
        for name in ("n_workers", "d_z", "transition_hidden", "emission_hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def gate(self) -> MLPSpec:
        return MLPSpec((self.d_z, self.transition_hidden, self.d_z), ("relu", "sigmoid"))

    @property
    def proposal(self) -> MLPSpec:
        return MLPSpec((self.d_z, self.transition_hidden, self.d_z), ("relu", "identity"))

    @property
    def linear(self) -> MLPSpec:
        return MLPSpec((self.d_z, self.d_z), ("identity",))

    @property
    def transition_std(self) -> MLPSpec:
        return MLPSpec((self.d_z, self.d_z), ("softplus",))

    @property
    def emission_mean(self) -> MLPSpec:
        return MLPSpec((self.d_z, self.emission_hidden, self.n_workers), ("identity", "identity"))

    @property
    def emission_std(self) -> MLPSpec:
        return MLPSpec((self.n_workers, self.emission_hidden, self.n_workers), ("relu", "softplus"))

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {"init.mu": (self.d_z,), "init.std_raw": (self.d_z,)}
        for prefix, spec in self._mlps():
            for i in range(spec.n_layers):
                shapes[f"{prefix}.w{i}"] = (spec.widths[i], spec.widths[i + 1])
                shapes[f"{prefix}.b{i}"] = (spec.widths[i + 1],)
        return shapes

    def _mlps(self):
        return [
            ("trans.gate", self.gate),
            ("trans.prop", self.proposal),
            ("trans.lin", self.linear),
            ("trans.std", self.transition_std),
            ("emit.mean", self.emission_mean),
            ("emit.std", self.emission_std),
        ]


class GaussianNode(NamedTuple):
    mean: Node
    std: Node

    def numpy(self) -> "GaussianVector":
        return GaussianVector(self.mean.value.copy(), self.std.value.copy())


@dataclass(frozen=True, eq=False)
class GaussianVector:
    """Diagonal Gaussian; arrays may carry a leading batch axis."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape:
            raise ShapeError(f"mean {mean.shape} and std {std.shape} differ")
        if np.any(~(std > 0)):
            raise ModelError("Gaussian std entries must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal(self.mean.shape)

    def log_prob(self, x) -> np.ndarray:
        return nd.gaussian_log_prob(np.asarray(x, dtype=np.float64), self.mean, self.std).value


def init_dmm_params(config: DmmConfig, rng: np.random.Generator | int) -> ParameterStore:
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    store = ParameterStore()
    store.create("init.mu", np.zeros(config.d_z))
    store.create("init.std_raw", np.full(config.d_z, _INIT_STD_RAW))
    for prefix, spec in config._mlps():
        nd.init_mlp(store, prefix, spec, rng)
    return store


def _as_batch(z) -> Node:
    if isinstance(z, Node):
        return z
    return Node(np.atleast_2d(np.asarray(z, dtype=np.float64)))


class DeepMarkovModel:
    def __init__(self, config: DmmConfig, params: ParameterStore):
        self.config = config
        self.params = params

    def _check_latent(self, z: Node) -> None:
        if z.value.ndim != 2 or z.shape[1] != self.config.d_z:
            raise ModelError(f"latent must have shape (batch, {self.config.d_z}), got {z.shape}")

    def initial(self, batch: int) -> GaussianNode:
        p = self.params
        zeros = np.zeros((batch, self.config.d_z))
        mean = p.node("init.mu") + zeros
        std = nd.softplus(p.node("init.std_raw") + zeros) + nd.STD_FLOOR
        return GaussianNode(mean, std)

    def transition(self, z_prev) -> GaussianNode:
        z_prev = _as_batch(z_prev)
        self._check_latent(z_prev)
        cfg, p = self.config, self.params
        gate = nd.mlp_forward(cfg.gate, p, "trans.gate", z_prev)
        proposal = nd.mlp_forward(cfg.proposal, p, "trans.prop", z_prev)
        linear = nd.mlp_forward(cfg.linear, p, "trans.lin", z_prev)
        mean = (1.0 - gate) * linear + gate * proposal
        std = nd.mlp_forward(cfg.transition_std, p, "trans.std", nd.relu(mean)) + nd.STD_FLOOR
        return GaussianNode(mean, std)

    def emission(self, z) -> GaussianNode:
        z = _as_batch(z)
        self._check_latent(z)
        cfg, p = self.config, self.params
        mean = nd.mlp_forward(cfg.emission_mean, p, "emit.mean", z)
        std = nd.mlp_forward(cfg.emission_std, p, "emit.std", mean) + nd.STD_FLOOR
        return GaussianNode(mean, std)

    def log_joint_terms(self, z_seq: Sequence, x_seq, z_before=None) -> list[tuple[Node, Node]]:
        """Per-step (latent, observation) log-density terms.

        ``x_seq`` has shape (batch, steps, n_workers). Without ``z_before`` the
        first latent is scored under the learned initial distribution,
        otherwise under ``transition(z_before)``.
        """
        x_seq = np.asarray(x_seq, dtype=np.float64)
        if x_seq.ndim == 2:
            x_seq = x_seq[None]
        if len(z_seq) != x_seq.shape[1]:
            raise ModelError(f"{len(z_seq)} latents for {x_seq.shape[1]} observations")
        if x_seq.shape[2] != self.config.n_workers:
            raise ModelError(f"observations have {x_seq.shape[2]} workers, model expects {self.config.n_workers}")
        terms = []
        prev = None if z_before is None else _as_batch(z_before)
        for i, z in enumerate(z_seq):
            z = _as_batch(z)
            prior = self.initial(x_seq.shape[0]) if prev is None else self.transition(prev)
            latent_term = nd.gaussian_log_prob(z, prior.mean, prior.std)
            em = self.emission(z)
            obs_term = nd.gaussian_log_prob(x_seq[:, i, :], em.mean, em.std)
            terms.append((latent_term, obs_term))
            prev = z
        return terms

    def log_joint(self, z_seq: Sequence, x_seq, z_before=None) -> Node:
        total = None
        for latent_term, obs_term in self.log_joint_terms(z_seq, x_seq, z_before):
            step = latent_term + obs_term
            total = step if total is None else total + step
        return total

    def rollout(
        self, z_start, steps: int, rng: np.random.Generator | int
    ) -> list[tuple[np.ndarray, GaussianVector]]:
        """Ancestral sampling from ``z_start``; records each emission distribution."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        z = np.asarray(z_start, dtype=np.float64)
        squeeze = z.ndim == 1
        z = np.atleast_2d(z)
        out = []
        for step in range(steps):
            tr = self.transition(z)
            z = tr.mean.value + tr.std.value * rng.standard_normal(z.shape)
            if not np.all(np.isfinite(z)):
                raise ModelError(f"non-finite latent state at rollout step {step}")
            em = self.emission(z).numpy()
            if squeeze:
                out.append((z[0].copy(), GaussianVector(em.mean[0], em.std[0])))
            else:
                out.append((z.copy(), em))
        return out
