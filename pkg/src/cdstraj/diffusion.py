"""Conditional diffusion over per-neighbor future features.

Level 0 is the clean feature C0, level gamma is (nearly) pure noise.
Schedule arrays are stored 0-based: ``sched.alpha[l - 1]`` is the alpha of
level ``l``. A reverse step with index ``delta`` in ``[0, gamma - 1]`` maps
level ``delta + 1`` to level ``delta``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import ModelConfig
from .data import FUT_LEN
from .errors import ConfigError, ContractError, DimensionError
from .numerics import Tensor
from .stencoder import temporal_encode


@dataclass(frozen=True)
class NoiseSchedule:
    gamma: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray


def make_schedule(gamma: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    if gamma < 1 or not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigError(f"bad schedule: gamma={gamma}, beta_min={beta_min}, beta_max={beta_max}")
    beta = np.linspace(beta_min, beta_max, gamma)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(gamma, beta, alpha, alpha_bar)


def schedule_for(cfg: ModelConfig) -> NoiseSchedule:
    return make_schedule(cfg.gamma, cfg.beta_min, cfg.beta_max)


def _check_level(level: int, sched: NoiseSchedule) -> None:
    if not 1 <= level <= sched.gamma:
        raise ContractError(f"diffusion level {level} outside [1, {sched.gamma}]")


def forward_step(c_prev, level: int, sched: NoiseSchedule, noise):
    """One noising step: ``sqrt(a) * c_prev + sqrt(1 - a) * noise`` with a = alpha of ``level``."""
    _check_level(level, sched)
    a = float(sched.alpha[level - 1])
    return np.sqrt(a) * np.asarray(c_prev) + np.sqrt(1.0 - a) * np.asarray(noise)


def forward_closed_form(c0, level: int, sched: NoiseSchedule, noise):
    _check_level(level, sched)
    ab = float(sched.alpha_bar[level - 1])
    return np.sqrt(ab) * np.asarray(c0) + np.sqrt(1.0 - ab) * np.asarray(noise)


def reverse_step(c_next, eps_hat, delta: int, sched: NoiseSchedule, z):
    """Adaptive denoising update from level ``delta + 1`` to level ``delta``.

    ``(c_next - (1 - a) / sqrt(1 - abar) * eps_hat) / sqrt(a) + sqrt((1 - a) / a) * z``
    with a, abar taken at level ``delta + 1``.
    """
    if not 0 <= delta <= sched.gamma - 1:
        raise ContractError(f"reverse step {delta} outside [0, {sched.gamma - 1}]")
    a = float(sched.alpha[delta])
    ab = float(sched.alpha_bar[delta])
    c_next = np.asarray(c_next)
    out = (c_next - (1.0 - a) / np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(a)
    return out + np.sqrt((1.0 - a) / a) * np.asarray(z)


def step_embedding(levels, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer diffusion levels, shape (len(levels), dim)."""
    levels = np.atleast_1d(np.asarray(levels, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = levels[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(levels), 1))], axis=1)
    return emb


# ----------------------------------------------------------------------------
# learned parts


def add_params(store: nx.ParamStore, cfg: ModelConfig, rng: np.random.Generator) -> None:
    d, dc = cfg.d, cfg.d_c
    store.add("fut.W", nx.glorot(rng, FUT_LEN * 2, dc))
    store.add("fut.b", np.zeros(dc))
    store.add("eps.W_c", nx.glorot(rng, dc, d))
    store.add("eps.W_t", nx.glorot(rng, d, d))
    store.add("eps.W_n", nx.glorot(rng, d, d))
    store.add("eps.W_e", nx.glorot(rng, dc, d))
    store.add("eps.b1", np.zeros(d))
    store.add("eps.W2", nx.glorot(rng, d, d))
    store.add("eps.b2", np.zeros(d))
    store.add("eps.W3", nx.glorot(rng, d, dc))
    store.add("eps.b3", np.zeros(dc))


def future_feature_encode(neighbor_futures, mask, P, cfg: ModelConfig) -> Tensor:
    """Linear map of each flattened (25, 2) neighbor future to d_c dims; masked rows zero."""
    nf = np.asarray(neighbor_futures, dtype=np.float64)
    flat = nf.reshape(nf.shape[:-2] + (FUT_LEN * 2,)) / cfg.pos_scale
    m = np.asarray(mask, dtype=np.float64)[..., None]
    return nx.linear(flat, P["fut.W"], P["fut.b"]) * m


def predict_noise(c_next, target_enc, neighbor_enc, level, P, cfg: ModelConfig) -> Tensor:
    """Noise estimate for latents ``c_next`` (B, N, d_c) sitting at ``level``.

    A two-hidden-layer network over the latent, the target encoding
    (broadcast over slots), the slot's history encoding and a sinusoidal
    embedding of the level. ``level`` is an int or a length-B array.
    """
    c_next = nx.as_tensor(c_next)
    target_enc = nx.as_tensor(target_enc)
    neighbor_enc = nx.as_tensor(neighbor_enc)
    if c_next.ndim != 3 or c_next.shape[-1] != cfg.d_c:
        raise DimensionError(f"latent must be (B, N, {cfg.d_c}), got {c_next.shape}")
    B, N, _ = c_next.shape
    if target_enc.shape != (B, cfg.d) or neighbor_enc.shape != (B, N, cfg.d):
        raise DimensionError(
            f"encodings {target_enc.shape} / {neighbor_enc.shape} do not match latent {c_next.shape}"
        )
    levels = np.broadcast_to(np.asarray(level), (B,))
    emb = step_embedding(levels, cfg.d_c)[:, None, :]  # (B, 1, d_c)
    tgt = nx.reshape(nx.linear(target_enc, P["eps.W_t"]), (B, 1, cfg.d))
    h = (
        nx.linear(c_next, P["eps.W_c"])
        + nx.linear(neighbor_enc, P["eps.W_n"])
        + tgt
        + nx.linear(emb, P["eps.W_e"])
        + P["eps.b1"]
    )
    h = nx.leaky_relu(h, cfg.leaky_slope)
    h = nx.leaky_relu(nx.linear(h, P["eps.W2"], P["eps.b2"]), cfg.leaky_slope)
    return nx.linear(h, P["eps.W3"], P["eps.b3"])


def chain_rng(seed: int, key: int, k: int) -> np.random.Generator:
    """Noise stream of chain ``k`` for the scene with ``key``; independent of K and batching."""
    return np.random.default_rng([int(seed), int(key), int(k)])


def reverse_sample(target_enc, neighbor_enc, mask, K: int, sched: NoiseSchedule, P, cfg: ModelConfig, seed: int, keys=None) -> np.ndarray:
    """Draw K denoised latents per scene, shape (K, B, N, d_c).

    Each chain starts from N(0, I), runs ``reverse_step`` with the learned
    noise estimate from delta = gamma - 1 down to 0 (z = 0 on the last step)
    and re-zeroes masked slots after every step. Runs without a tape.
    """
    if K < 1:
        raise ContractError("K must be >= 1")
    t_enc = np.asarray(target_enc.data if isinstance(target_enc, Tensor) else target_enc)
    n_enc = np.asarray(neighbor_enc.data if isinstance(neighbor_enc, Tensor) else neighbor_enc)
    B, N = n_enc.shape[0], n_enc.shape[1]
    keys = np.zeros(B, dtype=np.int64) if keys is None else np.asarray(keys)
    G, dc = sched.gamma, cfg.d_c
    m = np.asarray(mask, dtype=np.float64)[None, :, :, None]

    # (K, B, G + 1, N, d_c): slot 0 seeds the chain, slots 1.. feed z per step
    draws = np.empty((K, B, G + 1, N, dc))
    for k in range(K):
        for b in range(B):
            draws[k, b] = chain_rng(seed, keys[b], k).standard_normal((G + 1, N, dc))

    c = draws[:, :, 0] * m
    t_rep = np.broadcast_to(t_enc, (K,) + t_enc.shape).reshape(K * B, -1)
    n_rep = np.broadcast_to(n_enc, (K,) + n_enc.shape).reshape(K * B, N, -1)
    for delta in range(G - 1, -1, -1):
        eps = predict_noise(c.reshape(K * B, N, dc), t_rep, n_rep, delta + 1, P, cfg).data
        z = draws[:, :, G - delta] if delta > 0 else 0.0
        c = reverse_step(c, eps.reshape(K, B, N, dc), delta, sched, z) * m
    return c


def diffusion_loss_from(c0, target_enc, neighbor_enc, mask, sched: NoiseSchedule, P, cfg: ModelConfig, rng: np.random.Generator) -> Tensor:
    """epsilon-prediction MSE over unmasked slots.

    Gradients reach the predictor, the encodings it is conditioned on and,
    through ``c0``, the future feature map.
    """
    c0 = nx.as_tensor(c0)
    B, N, dc = c0.shape
    m = np.asarray(mask, dtype=np.float64)[:, :, None]
    levels = rng.integers(1, sched.gamma + 1, size=B)
    eps = rng.standard_normal(c0.shape) * m
    ab = sched.alpha_bar[levels - 1][:, None, None]
    noisy = c0 * np.sqrt(ab) + np.sqrt(1.0 - ab) * eps
    pred = predict_noise(noisy, target_enc, neighbor_enc, levels, P, cfg)
    count = m.sum() * dc
    if count == 0:
        return nx.sum(pred * 0.0)
    return nx.sum(nx.square((pred - eps) * m)) * (1.0 / count)


def diffusion_loss(neighbor_futures, target_history, neighbor_histories, mask, sched, P, cfg: ModelConfig, seed: int) -> Tensor:
    """Standalone loss for a batch: encodes histories, then :func:`diffusion_loss_from`."""
    th = np.asarray(target_history, dtype=np.float64)
    nh = np.asarray(neighbor_histories, dtype=np.float64)
    enc = temporal_encode(np.concatenate([th[:, None], nh], axis=1), P, cfg)
    c0 = future_feature_encode(neighbor_futures, mask, P, cfg)
    return diffusion_loss_from(c0, enc[:, 0, :], enc[:, 1:, :], mask, sched, P, cfg, np.random.default_rng(seed))
