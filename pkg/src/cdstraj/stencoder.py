"""Spatial-temporal interaction encoder.

Per-step embedding plus a GRU over the 16 observed steps, multi-head cross
attention from the target to its neighbors, and a two-gate fusion chain.
All functions take batched inputs: a leading batch axis B over scenes, and
N = n_max neighbor slots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import ModelConfig
from .data import HIST_LEN
from .errors import ContractError
from .numerics import Tensor


@dataclass
class EncodedScene:
    target_enc: Tensor  # (B, d)
    neighbor_enc: Tensor  # (B, N, d)
    fused: Tensor  # (B, d)
    context: Tensor  # (B, d), decoder input
    attention: np.ndarray  # (B, n_heads, 1, N)


def add_params(store: nx.ParamStore, cfg: ModelConfig, rng: np.random.Generator) -> None:
    d, dc = cfg.d, cfg.d_c
    store.add("tem.W_emb", nx.glorot(rng, 2, d))
    store.add("tem.W", nx.glorot(rng, d, 3 * d))
    store.add("tem.U", nx.glorot(rng, d, 3 * d))
    store.add("tem.b", np.zeros(3 * d))
    store.add("tem.h0", np.zeros(d))
    store.add("nbr.W", nx.glorot(rng, d + dc, d))
    store.add("nbr.b", np.zeros(d))
    for name in ("att.W_q", "att.W_k", "att.W_v", "att.W_o"):
        store.add(name, nx.glorot(rng, d, d))
    store.add("fus.W_a", nx.glorot(rng, d, d))
    store.add("fus.b_a", np.zeros(d))
    store.add("fus.W_g", nx.glorot(rng, d, d))
    store.add("fus.b_g", np.zeros(d))
    store.add("ctx.W", nx.glorot(rng, 2 * d, d))
    store.add("ctx.b", np.zeros(d))


def temporal_encode(history, P, cfg: ModelConfig) -> Tensor:
    """Encode histories of shape (..., 16, 2) into (..., d).

    Each step is embedded with ``leaky_relu(x W_emb)``; a GRU whose initial
    hidden state is the learned ``tem.h0`` consumes the 16 embeddings and the
    final hidden state is returned.
    """
    hist = np.asarray(history, dtype=np.float64)
    if hist.ndim < 2 or hist.shape[-2:] != (HIST_LEN, 2):
        raise ContractError(f"temporal_encode needs (..., {HIST_LEN}, 2) histories, got {hist.shape}")
    lead = hist.shape[:-2]
    x = hist.reshape(-1, HIST_LEN, 2) / cfg.pos_scale
    M, d = x.shape[0], cfg.d
    F = nx.leaky_relu(nx.linear(x, P["tem.W_emb"]), cfg.leaky_slope)  # (M, 16, d)

    if cfg.ablate == "temporal":
        h = nx.mean(F, axis=1)
        return nx.reshape(h, lead + (d,))

    gx = nx.linear(F, P["tem.W"], P["tem.b"])  # (M, 16, 3d)
    h = P["tem.h0"] * np.ones((M, 1))
    U = P["tem.U"]
    for t in range(HIST_LEN):
        gt = gx[:, t, :]
        gh = nx.linear(h, U)
        z = nx.sigmoid(gt[:, :d] + gh[:, :d])
        r = nx.sigmoid(gt[:, d : 2 * d] + gh[:, d : 2 * d])
        n = nx.tanh(gt[:, 2 * d :] + r * gh[:, 2 * d :])
        h = n + z * (h - n)
    return nx.reshape(h, lead + (d,))


def encode_neighbors(neighbor_histories, latent, mask, P, cfg: ModelConfig, history_enc: Tensor | None = None) -> Tensor:
    """Per-slot ``[temporal_encode(history) ; latent] W + b``, masked rows zeroed.

    ``latent`` is the (B, N, d_c) future feature (diffused or teacher).
    ``history_enc`` may carry precomputed (B, N, d) temporal encodings.
    """
    m = np.asarray(mask, dtype=np.float64)[..., None]
    if history_enc is None:
        history_enc = temporal_encode(neighbor_histories, P, cfg)
    feats = nx.concat([history_enc, latent], axis=-1)
    return nx.linear(feats, P["nbr.W"], P["nbr.b"]) * m


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    # (B, L, d) -> (B, H, L, d_h)
    B, L, d = x.shape
    return nx.transpose(nx.reshape(x, (B, L, n_heads, d // n_heads)), (0, 2, 1, 3))


def spatial_attention(h, neighbor_enc, mask, P, cfg: ModelConfig) -> tuple[Tensor, np.ndarray]:
    """Target-to-neighbor multi-head attention.

    Query from the target encoding, keys and values from neighbor rows;
    masked slots get exactly zero weight. Returns ``(upsilon, weights)`` with
    weights shaped (B, n_heads, 1, N). A scene whose slots are all masked
    yields ``upsilon = 0``.
    """
    h = nx.as_tensor(h)
    B, d = h.shape
    N = neighbor_enc.shape[1]
    H = cfg.n_heads
    if N == 0:
        return Tensor(np.zeros((B, d))), np.zeros((B, H, 1, 0))
    q = _split_heads(nx.reshape(nx.linear(h, P["att.W_q"]), (B, 1, d)), H)  # (B,H,1,dh)
    k = _split_heads(nx.linear(neighbor_enc, P["att.W_k"]), H)  # (B,H,N,dh)
    v = _split_heads(nx.linear(neighbor_enc, P["att.W_v"]), H)
    logits = nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(cfg.d_h))  # (B,H,1,N)
    keep = np.asarray(mask, dtype=bool)[:, None, None, :]
    w = nx.softmax_rows(logits, keep)
    ctx = nx.matmul(w, v)  # (B,H,1,dh)
    ctx = nx.reshape(nx.transpose(ctx, (0, 2, 1, 3)), (B, d))
    return nx.linear(ctx, P["att.W_o"]), w.data


def gated_fusion(upsilon, P) -> Tensor:
    """``H_a = sigmoid(U W_a + b_a)``, ``H_g = sigmoid(H_a W_g + b_g)``, ``S = H_a * H_g``."""
    ha = nx.sigmoid(nx.linear(upsilon, P["fus.W_a"], P["fus.b_a"]))
    hg = nx.sigmoid(nx.linear(ha, P["fus.W_g"], P["fus.b_g"]))
    return ha * hg


def encode_scene(target_history, neighbor_histories, mask, latent, P, cfg: ModelConfig) -> EncodedScene:
    """Temporal, spatial and fusion stages for a batch of scenes.

    The decoder context is ``[S ; h] W_ctx + b_ctx`` so the target's own
    encoding survives when there are no neighbors.
    """
    th = np.asarray(target_history, dtype=np.float64)
    nh = np.asarray(neighbor_histories, dtype=np.float64)
    enc = temporal_encode(np.concatenate([th[:, None], nh], axis=1), P, cfg)  # (B, 1+N, d)
    h = enc[:, 0, :]
    nbr_hist = enc[:, 1:, :]
    return encode_from_temporal(h, nbr_hist, mask, latent, P, cfg)


def encode_from_temporal(h, nbr_hist_enc, mask, latent, P, cfg: ModelConfig) -> EncodedScene:
    B = h.shape[0]
    N = nbr_hist_enc.shape[1]
    hat = encode_neighbors(None, latent, mask, P, cfg, history_enc=nbr_hist_enc)
    if cfg.ablate == "spatial":
        upsilon = Tensor(np.zeros((B, cfg.d)))
        weights = np.zeros((B, cfg.n_heads, 1, N))
    else:
        upsilon, weights = spatial_attention(h, hat, mask, P, cfg)
    S = upsilon if cfg.ablate == "fusion" else gated_fusion(upsilon, P)
    context = nx.linear(nx.concat([S, h], axis=-1), P["ctx.W"], P["ctx.b"])
    return EncodedScene(h, hat, S, context, weights)
