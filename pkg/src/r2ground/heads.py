"""Temporal feature pyramid and the three prediction heads.

The pyramid repeatedly halves the time axis with strided convolutions; all
levels are concatenated along time and the classification/regression heads
predict once over the combined sequence. Saliency is a cosine score between
level-1 frame features and the pooled query.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .block import _ACTIVATIONS, _xavier
from .tensor import CounterRng, Tensor, concat, conv1d, matmul

log = logging.getLogger(__name__)


class PyramidDepthError(ValueError):
    """The clip is too short for the requested number of pyramid levels."""


class LabelError(ValueError):
    """A target label is outside its documented domain."""


@dataclass
class PyramidMeta:
    level: np.ndarray        # 1-based level index per position
    stride: np.ndarray       # frames per position step
    center: np.ndarray       # source-frame center per position
    level_sizes: list

    @property
    def total(self) -> int:
        return int(self.level.size)


@dataclass
class PyramidFeatures:
    levels: list             # per-level [T_l, C] tensors
    combined: Tensor         # concatenation along time, [sum(T_l), C]
    meta: PyramidMeta


class Conv:
    def __init__(self, rng, kernel, c_in, c_out):
        fan_in, fan_out = kernel * c_in, kernel * c_out
        self.w = Tensor(_xavier(rng, fan_in, fan_out, (kernel, c_in, c_out)),
                        requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)

    def params(self, prefix):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class HeadParams:
    """Downsampling convolutions plus the two convolutional heads."""

    def __init__(self, cfg, rng: CounterRng):
        c = cfg.hidden_size
        self.downsample = [Conv(rng, 3, c, c) for _ in range(cfg.pyramid_levels - 1)]
        self.cls_conv1 = Conv(rng, 3, c, c)
        self.cls_conv2 = Conv(rng, 3, c, 1)
        self.reg_conv1 = Conv(rng, 3, c, c)
        self.reg_conv2 = Conv(rng, 3, c, 2)
        self.pool_weight = Tensor(_xavier(rng, c, 1, (c, 1)), requires_grad=True)

    def named_parameters(self):
        for i, conv in enumerate(self.downsample):
            yield from conv.params(f"heads.down{i}")
        yield from self.cls_conv1.params("heads.cls_conv1")
        yield from self.cls_conv2.params("heads.cls_conv2")
        yield from self.reg_conv1.params("heads.reg_conv1")
        yield from self.reg_conv2.params("heads.reg_conv2")
        yield "heads.pool_weight", self.pool_weight

    def count(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())


def build_pyramid(h: Tensor, params: HeadParams, num_levels: int) -> PyramidFeatures:
    """Level 1 is ``h`` itself; level l applies one more stride-2 convolution,
    so level l has ceil(T / 2^(l-1)) positions."""
    t = h.shape[0]
    if t < 2 ** (num_levels - 1):
        raise PyramidDepthError(
            f"T={t} supports at most {int(math.log2(t)) + 1 if t > 0 else 0} "
            f"pyramid levels; requested {num_levels} - use fewer levels"
        )
    levels = [h]
    for l in range(2, num_levels + 1):
        conv = params.downsample[l - 2]
        levels.append(conv1d(levels[-1], conv.w, conv.b, stride=2, padding=1))
    level_idx, strides, centers, sizes = [], [], [], []
    for l, feat in enumerate(levels, start=1):
        s = 2 ** (l - 1)
        n = feat.shape[0]
        sizes.append(n)
        level_idx.extend([l] * n)
        strides.extend([s] * n)
        centers.extend(j * s + (s - 1) / 2.0 for j in range(n))
    meta = PyramidMeta(
        level=np.asarray(level_idx),
        stride=np.asarray(strides, dtype=float),
        center=np.asarray(centers, dtype=float),
        level_sizes=sizes,
    )
    return PyramidFeatures(levels=levels, combined=concat(levels, axis=0), meta=meta)


def _conv_head(x: Tensor, conv1: Conv, conv2: Conv, act) -> Tensor:
    hidden = act(conv1d(x, conv1.w, conv1.b, stride=1, padding=1))
    return conv1d(hidden, conv2.w, conv2.b, stride=1, padding=1)


def classification_probs(pyr: PyramidFeatures, params: HeadParams,
                         activation: str = "gelu") -> Tensor:
    """Foreground probability per pyramid position, in (0, 1)."""
    logits = _conv_head(pyr.combined, params.cls_conv1, params.cls_conv2,
                        _ACTIVATIONS[activation])
    return logits.reshape(pyr.meta.total).sigmoid()


def regression_displacements(pyr: PyramidFeatures, params: HeadParams,
                             activation: str = "gelu") -> Tensor:
    """Non-negative (start, end) displacements per position, in units of the
    position's stride (softplus squashing)."""
    raw = _conv_head(pyr.combined, params.reg_conv1, params.reg_conv2,
                     _ACTIVATIONS[activation])
    return raw.softplus()


@dataclass
class TargetAssignment:
    foreground: np.ndarray   # {0,1} per position
    displacements: np.ndarray  # [total, 2], stride units, zero outside
    inside: np.ndarray       # boolean regression mask


def assign_targets(meta: PyramidMeta, moments, length_band=(2.0, 16.0)) -> TargetAssignment:
    """A position is positive when its center lies inside a moment whose
    length falls in the level's band [stride*lo, stride*hi]; the top level
    has no upper bound. Targets are stride-normalized displacements."""
    lo, hi = length_band
    top = meta.level.max() if meta.level.size else 1
    fg = np.zeros(meta.total)
    disp = np.zeros((meta.total, 2))
    inside = np.zeros(meta.total, dtype=bool)
    for i in range(meta.total):
        s = meta.stride[i]
        c = meta.center[i]
        for start, end in moments:
            length = end - start
            if not (start <= c <= end):
                continue
            if length < lo * s:
                continue
            if meta.level[i] != top and length > hi * s:
                continue
            fg[i] = 1.0
            disp[i] = ((c - start) / s, (end - c) / s)
            inside[i] = True
            break
    return TargetAssignment(foreground=fg, displacements=disp, inside=inside)


def focal_cls_loss(probs: Tensor, targets, alpha: float = 0.9,
                   gamma: float = 2.0, lam: float = 1.0) -> Tensor:
    """Alpha-balanced focal loss, mean over positions.

    Positives contribute -alpha*(1-p)^gamma*log(p); negatives the mirrored
    -(1-alpha)*p^gamma*log(1-p) term, without which the classifier would
    collapse to predicting foreground everywhere.
    """
    t = np.asarray(targets, dtype=float)
    if not np.all((t == 0.0) | (t == 1.0)):
        raise LabelError("classification targets must be in {0, 1}")
    tt = Tensor(t)
    pos = tt * alpha * ((1.0 - probs) ** gamma) * probs.log()
    neg = (1.0 - tt) * (1.0 - alpha) * (probs**gamma) * (1.0 - probs).log()
    return -(pos + neg).mean() * lam


def boundary_l1_loss(pred: Tensor, target, inside, lam: float = 0.1) -> Tensor:
    """L1 distance between predicted and target displacements, averaged over
    positions inside ground-truth moments; 0 when there are none."""
    inside = np.asarray(inside, dtype=bool)
    if not inside.any():
        return Tensor(0.0)
    idx = np.nonzero(inside)[0]
    diff = pred.take_rows(idx) - Tensor(np.asarray(target, dtype=float)[idx])
    return diff.abs().sum(axis=1).mean() * lam


def predict_saliency(h: Tensor, query_vec: Tensor) -> Tensor:
    """Cosine similarity between each frame feature and the pooled query."""
    dots = matmul(h, query_vec.reshape(-1, 1)).reshape(h.shape[0])
    h_norm = (h * h).sum(axis=1).sqrt()
    q_norm = (query_vec * query_vec).sum().sqrt()
    return dots / (h_norm * q_norm + 1e-8)


def saliency_loss(scores: Tensor, label_saliency, pos_index: int,
                  tau: float = 0.07, lam: float = 0.1) -> Tensor:
    """Contrast the sampled positive frame against every frame whose labeled
    saliency is strictly lower. No negatives means no signal: returns 0."""
    s = np.asarray(label_saliency, dtype=float)
    theta = np.nonzero(s < s[pos_index])[0]
    if theta.size == 0:
        log.debug("saliency loss skipped: no frames rank below the positive")
        return Tensor(0.0)
    z = scores * (1.0 / tau)
    pos = z[int(pos_index)]
    neg_sum = z.take_rows(theta).exp().sum()
    return -(pos - (pos.exp() + neg_sum).log()) * lam


def binarize_summary(scores, ratio: float = 0.2) -> np.ndarray:
    """Top-fraction rule for summary output: the highest-scoring ceil(ratio*T)
    frames are selected."""
    scores = np.asarray(scores, dtype=float)
    n = scores.size
    k = max(1, int(math.ceil(ratio * n)))
    order = np.argsort(-scores, kind="stable")
    out = np.zeros(n, dtype=int)
    out[order[:k]] = 1
    return out
