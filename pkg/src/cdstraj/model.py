"""Full model: parameter initialisation, teacher-mode forward, sampling predict."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import decoder, diffusion, stencoder
from . import numerics as nx
from .config import ModelConfig
from .data import Scene, pad_neighbors, scene_key
from .decoder import GaussianOutputs, PredictedTrajectory
from .diffusion import NoiseSchedule
from .numerics import Tensor


@dataclass
class SceneBatch:
    ids: list[str]
    keys: np.ndarray
    target_history: np.ndarray  # (B, 16, 2)
    target_future: np.ndarray  # (B, 25, 2)
    neighbor_histories: np.ndarray  # (B, N, 16, 2)
    neighbor_futures: np.ndarray  # (B, N, 25, 2)
    mask: np.ndarray  # (B, N) bool

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_scenes(cls, scenes: Sequence[Scene], n_max: int) -> "SceneBatch":
        sc = [pad_neighbors(s, n_max) for s in scenes]
        return cls(
            ids=[s.scene_id for s in sc],
            keys=np.array([scene_key(s.scene_id) for s in sc], dtype=np.int64),
            target_history=np.stack([s.target_history for s in sc]),
            target_future=np.stack([s.target_future for s in sc]),
            neighbor_histories=np.stack([s.neighbor_histories for s in sc]),
            neighbor_futures=np.stack([s.neighbor_futures for s in sc]),
            mask=np.stack([s.neighbor_mask for s in sc]).astype(bool),
        )


def init_params(cfg: ModelConfig) -> nx.ParamStore:
    rng = np.random.default_rng(cfg.init_seed)
    store = nx.ParamStore()
    stencoder.add_params(store, cfg, rng)
    diffusion.add_params(store, cfg, rng)
    decoder.add_params(store, cfg, rng)
    return store


def encode_histories(batch: SceneBatch, P, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Temporal encodings of target (B, d) and neighbor (B, N, d) histories in one pass."""
    hist = np.concatenate([batch.target_history[:, None], batch.neighbor_histories], axis=1)
    enc = stencoder.temporal_encode(hist, P, cfg)
    return enc[:, 0, :], enc[:, 1:, :]


@dataclass
class ForwardResult:
    outputs: GaussianOutputs
    encoded: stencoder.EncodedScene
    diffusion_loss: Tensor | None


def forward(
    batch: SceneBatch,
    P,
    cfg: ModelConfig,
    sched: NoiseSchedule,
    rng: np.random.Generator | None = None,
    latent=None,
    sample_seed: int | None = None,
) -> ForwardResult:
    """Training forward pass.

    The neighbor latent is the feature map of the true neighbor futures
    (teacher mode) unless ``latent`` is supplied or ``sample_seed`` is set, in
    which case one reverse-diffusion sample is drawn as at inference and
    treated as a constant. With ``rng`` the diffusion epsilon loss is also
    computed on the same encodings.
    """
    h, nbr = encode_histories(batch, P, cfg)
    if sample_seed is not None and latent is None and cfg.ablate != "diffusion":
        plain = {k: Tensor(v.data) for k, v in P.items()}
        latent = Tensor(diffusion.reverse_sample(h.data, nbr.data, batch.mask, 1, sched, plain, cfg, sample_seed, batch.keys)[0])
    dloss = None
    if cfg.ablate == "diffusion":
        latent = Tensor(np.zeros(batch.mask.shape + (cfg.d_c,)))
    else:
        c0 = diffusion.future_feature_encode(batch.neighbor_futures, batch.mask, P, cfg)
        if latent is None:
            latent = c0
        if rng is not None:
            dloss = diffusion.diffusion_loss_from(c0, h, nbr, batch.mask, sched, P, cfg, rng)
    enc = stencoder.encode_from_temporal(h, nbr, batch.mask, latent, P, cfg)
    return ForwardResult(decoder.decode_rollout(enc.context, P, cfg), enc, dloss)


def sample_outputs(batch: SceneBatch, params: nx.ParamStore, cfg: ModelConfig, sched: NoiseSchedule, K: int, seed: int) -> GaussianOutputs:
    """Inference path: K diffused latents per scene, each decoded.

    Returned tensors are stacked k-major: row ``k * B + b`` is sample k of
    scene b.
    """
    P = params.bind(None)
    h, nbr = encode_histories(batch, P, cfg)
    B, N = batch.mask.shape
    if cfg.ablate == "diffusion":
        lat = np.zeros((K, B, N, cfg.d_c))
    else:
        lat = diffusion.reverse_sample(h, nbr, batch.mask, K, sched, P, cfg, seed, batch.keys)
    rep = lambda x: np.broadcast_to(x, (K,) + x.shape).reshape((K * x.shape[0],) + x.shape[1:])  # noqa: E731
    mask = rep(batch.mask)
    enc = stencoder.encode_from_temporal(
        Tensor(rep(h.data)), Tensor(rep(nbr.data)), mask, Tensor(lat.reshape(K * B, N, cfg.d_c)), P, cfg
    )
    return decoder.decode_rollout(enc.context, P, cfg)


def predict_batch(scenes: Sequence[Scene], params: nx.ParamStore, cfg: ModelConfig, K: int, seed: int, chunk: int = 128) -> dict[str, list[PredictedTrajectory]]:
    """K predicted trajectories per scene, keyed by scene id.

    The noise driving sample k of a scene depends only on (seed, scene id, k),
    so sample 0 is the same whatever K is.
    """
    sched = diffusion.schedule_for(cfg)
    out: dict[str, list[PredictedTrajectory]] = {}
    for lo in range(0, len(scenes), chunk):
        batch = SceneBatch.from_scenes(scenes[lo : lo + chunk], cfg.n_max)
        res = sample_outputs(batch, params, cfg, sched, K, seed)
        B = len(batch)
        sigma = res.sigma
        for b, sid in enumerate(batch.ids):
            out[sid] = [
                PredictedTrajectory(sid, k, res.mu.data[k * B + b].copy(), sigma[k * B + b].copy(), res.rho.data[k * B + b].copy())
                for k in range(K)
            ]
    return out


def predict(scene: Scene, params: nx.ParamStore, cfg: ModelConfig, K: int, seed: int) -> list[PredictedTrajectory]:
    return predict_batch([scene], params, cfg, K, seed)[scene.scene_id]


def predicted_means(preds: dict[str, list[PredictedTrajectory]], ids: Sequence[str]) -> np.ndarray:
    """(B, K, 25, 2) array of mean positions in ``ids`` order."""
    return np.stack([np.stack([p.mu for p in preds[i]]) for i in ids])
