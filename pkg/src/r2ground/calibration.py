"""Granularity calibration: contrastive constraints aligning pooled visual
and query features per refinement step.

The video-level loss contrasts samples within a batch (per step, averaged
over steps); the layer-wise loss contrasts refinement steps within a sample
(averaged over the batch). Features are L2-normalized before similarity and
compared at a fixed temperature.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, matmul, stack


class PositiveSetError(ValueError):
    """No positive frames exist for a sample, so it cannot be calibrated."""


@dataclass
class CalibrationConfig:
    lambda_video: float = 0.1
    lambda_layer: float = 0.1
    nce_temperature: float = 0.07
    symmetric_nce: bool = True
    omega_threshold_mode: str = "relative"  # or "absolute"


def positive_frames(labels, num_frames: int, mode: str = "relative") -> np.ndarray:
    """Indices of positive frames: inside any moment, saliency above the
    threshold, or flagged as summary.

    "relative" thresholds saliency at half its per-video max (scale-free);
    "absolute" uses a fixed 0.5.
    """
    keep = np.zeros(num_frames, dtype=bool)
    for start, end in labels.moments:
        lo = int(np.ceil(start))
        hi = int(np.floor(end))
        keep[lo : hi + 1] = True
    if labels.saliency is not None:
        s = np.asarray(labels.saliency, dtype=float)
        thr = 0.5 * s.max() if mode == "relative" else 0.5
        if s.max() > 0:
            keep |= s >= thr
    if labels.summary is not None:
        keep |= np.asarray(labels.summary) == 1
    return np.nonzero(keep)[0]


def pool_positive_video(pools, omega) -> Tensor:
    """Average per-step pooled frame features over the positive set.

    ``pools`` holds K tensors of shape [T, C]; returns [K, C].
    """
    omega = np.asarray(omega, dtype=np.intp)
    if omega.size == 0:
        raise PositiveSetError("positive frame set is empty")
    return stack([p.take_rows(omega).mean(axis=0) for p in pools], axis=0)


def adaptive_pool_query(queries, query_mask, weight: Tensor) -> Tensor:
    """Token-wise adaptive pooling: a learned map scores each token, a masked
    softmax turns scores into weights, and tokens are averaged.

    ``queries`` holds K tensors of shape [L, C]; returns [K, C]. The scorer
    carries no bias: a constant shift of every score is cancelled by the
    softmax, so such a parameter could never affect the output.
    """
    from .tensor import softmax  # local import keeps module surface tidy

    mask = np.asarray(query_mask, dtype=bool)
    if not mask.any():
        raise PositiveSetError("query has no unmasked tokens")
    pooled = []
    for q in queries:
        scores = matmul(q, weight).reshape(q.shape[0])  # [L]
        w = softmax(scores, axis=0, mask=mask)
        pooled.append(matmul(w.reshape(1, -1), q).reshape(q.shape[1]))
    return stack(pooled, axis=0)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    norm = ((x * x).sum(axis=-1, keepdims=True) + eps).sqrt()
    return x / norm


def info_nce(sim: Tensor) -> Tensor:
    """One-directional InfoNCE over a square similarity matrix: mean over
    rows of -log softmax(row) at the diagonal."""
    n = sim.shape[0]
    shift = np.max(sim.data, axis=1, keepdims=True)  # detached; softmax shift-invariant
    z = sim - Tensor(shift)
    log_probs = z - z.exp().sum(axis=1, keepdims=True).log()
    eye = Tensor(np.eye(n, dtype=sim.dtype))
    return -(log_probs * eye).sum() * (1.0 / n)


def _paired_nce(a: Tensor, b: Tensor, temperature: float, symmetric: bool) -> Tensor:
    sim = matmul(a, b.swapaxes(0, 1)) * (1.0 / temperature)
    if symmetric:
        return (info_nce(sim) + info_nce(sim.swapaxes(0, 1))) * 0.5
    return info_nce(sim)


def calibration_losses(video_feats: Tensor, query_feats: Tensor,
                       cfg: CalibrationConfig):
    """Compute (video-level, layer-wise) losses from [B, K, C] feature stacks.

    Either loss degenerates to 0 (with a warning) when its contrast axis has
    a single element; both come back already scaled by their lambda.
    """
    b, k, _ = video_feats.shape
    v = l2_normalize(video_feats)
    q = l2_normalize(query_feats)

    if b < 2:
        warnings.warn("video-level loss needs a batch of >= 2; returning 0")
        video_loss = Tensor(0.0)
    else:
        per_step = [
            _paired_nce(v[:, s, :], q[:, s, :], cfg.nce_temperature, cfg.symmetric_nce)
            for s in range(k)
        ]
        video_loss = sum(per_step[1:], per_step[0]) * (cfg.lambda_video / k)

    if k < 2:
        warnings.warn("layer-wise loss needs >= 2 refinement steps; returning 0")
        layer_loss = Tensor(0.0)
    else:
        per_sample = [
            _paired_nce(v[i], q[i], cfg.nce_temperature, cfg.symmetric_nce)
            for i in range(b)
        ]
        layer_loss = sum(per_sample[1:], per_sample[0]) * (cfg.lambda_layer / b)

    return video_loss, layer_loss
