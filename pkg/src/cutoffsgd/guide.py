"""Left-right recurrent inference network over a lag window.

For step t of a window x_0..x_{L-1}, a forward ReLU RNN summarizes x_0..x_{t-1}
and a backward one summarizes x_{t+1}..x_{L-1}; an empty side contributes a
zero vector. The two summaries are averaged with a tanh projection of the
previous latent and mapped to a diagonal Gaussian over z_t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndmath as nd
from .dmm import DeepMarkovModel, GaussianNode
from .errors import ModelError
from .ndmath import MLPSpec, Node, ParameterStore, RNNSpec


@dataclass(frozen=True)
class GuideConfig:
    n_workers: int
    d_z: int = 32
    hidden: int = 64
    lag: int = 20

    def __post_init__(self):
        for name in ("n_workers", "d_z", "hidden", "lag"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def rnn(self) -> RNNSpec:
        return RNNSpec(self.n_workers, self.hidden)

    @property
    def z_proj(self) -> MLPSpec:
        return MLPSpec((self.d_z, self.hidden), ("tanh",))

    @property
    def loc(self) -> MLPSpec:
        return MLPSpec((self.hidden, self.d_z), ("identity",))

    @property
    def scale(self) -> MLPSpec:
        return MLPSpec((self.d_z, self.d_z), ("softplus",))

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for side in ("rnn.left", "rnn.right"):
            shapes[f"{side}.wx"] = (self.n_workers, self.hidden)
            shapes[f"{side}.wh"] = (self.hidden, self.hidden)
            shapes[f"{side}.b"] = (self.hidden,)
        for prefix, spec in (("comb.z", self.z_proj), ("loc", self.loc), ("scale", self.scale)):
            shapes[f"{prefix}.w0"] = spec.widths
            shapes[f"{prefix}.b0"] = (spec.widths[1],)
        return shapes


@dataclass(frozen=True, eq=False)
class PosteriorSample:
    z_seq: list[Node]
    log_q: Node

    @property
    def z_values(self) -> np.ndarray:
        """Sampled latents as an array of shape (steps, batch, d_z)."""
        return np.stack([z.value for z in self.z_seq])


def init_guide_params(config: GuideConfig, rng: np.random.Generator | int) -> ParameterStore:
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    store = ParameterStore()
    nd.init_rnn(store, "rnn.left", config.rnn, rng)
    nd.init_rnn(store, "rnn.right", config.rnn, rng)
    nd.init_mlp(store, "comb.z", config.z_proj, rng)
    nd.init_mlp(store, "loc", config.loc, rng)
    nd.init_mlp(store, "scale", config.scale, rng)
    return store


def _batched_window(window) -> np.ndarray:
    x = np.asarray(getattr(window, "observations", window), dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ModelError(f"window must be (lag, n) or (batch, lag, n), got {x.shape}")
    return x


class LeftRightGuide:
    def __init__(self, config: GuideConfig, params: ParameterStore, model: DeepMarkovModel):
        self.config = config
        self.params = params
        self.model = model

    def context(self, x: np.ndarray) -> tuple[list[Node], list[Node]]:
        """Left and right summaries for every step of a (batch, L, n) window."""
        batch, length, n = x.shape
        if n != self.config.n_workers:
            raise ModelError(f"window has {n} workers, guide expects {self.config.n_workers}")
        rows = [x[:, i, :] for i in range(length)]
        zeros = Node(np.zeros((batch, self.config.hidden)))
        if length == 1:
            return [zeros], [zeros]
        _, fwd = nd.rnn_forward(self.params, "rnn.left", rows[:-1], "forward")
        _, bwd = nd.rnn_forward(self.params, "rnn.right", rows[1:], "backward")
        lefts = [zeros] + fwd
        rights = bwd + [zeros]
        return lefts, rights

    def step(self, z_prev, h_left, h_right) -> GaussianNode:
        cfg, p = self.config, self.params
        z_prev = nd.as_node(z_prev)
        if z_prev.value.ndim != 2 or z_prev.shape[1] != cfg.d_z:
            raise ModelError(f"z_prev must be (batch, {cfg.d_z}), got {z_prev.shape}")
        h_left, h_right = nd.as_node(h_left), nd.as_node(h_right)
        if h_left.shape != h_right.shape or h_left.shape[-1] != cfg.hidden:
            raise ModelError(f"context widths {h_left.shape}, {h_right.shape} != hidden {cfg.hidden}")
        h_out = (nd.mlp_forward(cfg.z_proj, p, "comb.z", z_prev) + h_left + h_right) * (1.0 / 3.0)
        loc = nd.mlp_forward(cfg.loc, p, "loc", h_out)
        scale = nd.mlp_forward(cfg.scale, p, "scale", loc) + nd.STD_FLOOR
        return GaussianNode(loc, scale)

    def _first_z_prev(self, batch: int) -> Node:
        return self.model.params.node("init.mu") + np.zeros((batch, self.config.d_z))

    def sample(self, window, noise: np.ndarray | None = None, rng=None) -> PosteriorSample:
        """Reparameterized draw of the latent path and its total log-density.

        ``noise`` (shape (L, batch, d_z)) overrides ``rng`` when given.
        """
        x = _batched_window(window)
        batch, length, _ = x.shape
        if noise is None:
            rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
            noise = rng.standard_normal((length, batch, self.config.d_z))
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != (length, batch, self.config.d_z):
            raise ModelError(f"noise shape {noise.shape} != {(length, batch, self.config.d_z)}")
        lefts, rights = self.context(x)
        z_prev = self._first_z_prev(batch)
        z_seq, log_q = [], None
        for t in range(length):
            q = self.step(z_prev, lefts[t], rights[t])
            z = nd.gaussian_reparameterized_sample(q.mean, q.std, noise[t])
            term = nd.gaussian_log_prob(z, q.mean, q.std)
            log_q = term if log_q is None else log_q + term
            z_seq.append(z)
            z_prev = z
        return PosteriorSample(z_seq, log_q)

    def log_prob(self, window, z_seq) -> Node:
        """Score a given latent path under the guide."""
        x = _batched_window(window)
        batch, length, _ = x.shape
        if len(z_seq) != length:
            raise ModelError(f"{len(z_seq)} latents for a window of {length}")
        lefts, rights = self.context(x)
        z_prev = self._first_z_prev(batch)
        log_q = None
        for t in range(length):
            q = self.step(z_prev, lefts[t], rights[t])
            z = nd.as_node(z_seq[t])
            term = nd.gaussian_log_prob(z, q.mean, q.std)
            log_q = term if log_q is None else log_q + term
            z_prev = z
        return log_q


def posterior_sample(guide: LeftRightGuide, window, seed) -> PosteriorSample:
    return guide.sample(window, rng=np.random.default_rng(seed))
