"""LSTM rollout head emitting a bivariate Gaussian per future step.

The head predicts per-step mean displacements; absolute means are their
running sum from the origin. Links: ``sigma = exp(raw)``,
``rho = 0.999 * tanh(raw)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import ModelConfig
from .data import FUT_LEN
from .numerics import Tensor

RHO_LIMIT = 0.999
_CUMSUM = np.tril(np.ones((FUT_LEN, FUT_LEN)))


@dataclass
class GaussianOutputs:
    """Batched decoder output; all tensors share the (B, 25) leading shape."""

    mu: Tensor  # (B, 25, 2) absolute mean positions, meters
    log_sigma: Tensor  # (B, 25, 2)
    rho: Tensor  # (B, 25)

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma.data)

    def rows(self, b: int) -> np.ndarray:
        """(25, 5) rows of mu_x, mu_y, sigma_x, sigma_y, rho for scene ``b``."""
        return np.concatenate(
            [self.mu.data[b], self.sigma[b], self.rho.data[b][:, None]], axis=1
        )


@dataclass
class PredictedTrajectory:
    scene_id: str
    sample_index: int
    mu: np.ndarray  # (25, 2)
    sigma: np.ndarray  # (25, 2)
    rho: np.ndarray  # (25,)

    def rows(self) -> np.ndarray:
        return np.concatenate([self.mu, self.sigma, self.rho[:, None]], axis=1)

    def to_record(self) -> dict:
        return {"sceneId": self.scene_id, "sampleIndex": self.sample_index, "params": self.rows().tolist()}


def add_params(store: nx.ParamStore, cfg: ModelConfig, rng: np.random.Generator) -> None:
    d = H = cfg.d
    if cfg.ablate == "decoder":
        store.add("dec.W_lin", nx.glorot(rng, d, FUT_LEN * 5, gain=0.5))
        store.add("dec.b_lin", np.zeros(FUT_LEN * 5))
        return
    store.add("dec.W_ctx", nx.glorot(rng, d, 4 * H))
    store.add("dec.W_prev", nx.glorot(rng, 2, 4 * H))
    store.add("dec.U", nx.glorot(rng, H, 4 * H))
    b = np.zeros(4 * H)
    b[H : 2 * H] = 1.0  # forget gate open at init
    store.add("dec.b", b)
    store.add("dec.W_out", nx.glorot(rng, H, 5, gain=0.5))
    store.add("dec.b_out", np.zeros(5))


def decode_step(ctx_gates: Tensor, prev: Tensor, state, P, cfg: ModelConfig):
    """One LSTM step on input ``[S ; prev]``.

    ``ctx_gates`` is the context's input-to-gate product, computed once per
    rollout since the context is constant over steps. ``prev`` is the previous
    mean displacement in scaled units. Returns ``(raw, (h, c))`` where raw is
    (B, 5): displacement x/y, log sigma x/y, pre-tanh rho.
    """
    h, c = state
    H = cfg.d
    gates = ctx_gates + nx.linear(prev, P["dec.W_prev"]) + nx.linear(h, P["dec.U"])
    i = nx.sigmoid(gates[:, :H])
    f = nx.sigmoid(gates[:, H : 2 * H])
    g = nx.tanh(gates[:, 2 * H : 3 * H])
    o = nx.sigmoid(gates[:, 3 * H :])
    c = f * c + i * g
    h = o * nx.tanh(c)
    return nx.linear(h, P["dec.W_out"], P["dec.b_out"]), (h, c)


def decode_rollout(context: Tensor, P, cfg: ModelConfig) -> GaussianOutputs:
    """25 chained steps from the (B, d) context."""
    B = context.shape[0]
    if cfg.ablate == "decoder":
        raw = nx.reshape(nx.linear(context, P["dec.W_lin"], P["dec.b_lin"]), (B, FUT_LEN, 5))
    else:
        ctx_gates = nx.linear(context, P["dec.W_ctx"], P["dec.b"])
        zeros = np.zeros((B, cfg.d))
        state = (Tensor(zeros), Tensor(zeros))
        prev = Tensor(np.zeros((B, 2)))
        raws = []
        for _ in range(FUT_LEN):
            raw_t, state = decode_step(ctx_gates, prev, state, P, cfg)
            raws.append(raw_t)
            prev = raw_t[:, :2]
        raw = nx.stack(raws, axis=1)  # (B, 25, 5)
    disp = raw[:, :, :2] * cfg.pos_scale
    mu = nx.matmul(_CUMSUM, disp)
    return GaussianOutputs(mu, raw[:, :, 2:4], nx.tanh(raw[:, :, 4]) * RHO_LIMIT)
