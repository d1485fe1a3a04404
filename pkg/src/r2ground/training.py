"""Joint-loss optimization, checkpoints, and the evaluation drivers.

Training is deterministic given (config, seed, data): the RNG is counter
based, data order is a seeded permutation, and all math runs single-threaded
in the configured float width.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from .block import BlockConfig, BlockParams, run_recurrent
from .calibration import (
    CalibrationConfig,
    adaptive_pool_query,
    calibration_losses,
    pool_positive_video,
    positive_frames,
)
from .features import GroundingLabels, LayerFeatureSet, load_features
from .heads import (
    HeadParams,
    assign_targets,
    binarize_summary,
    boundary_l1_loss,
    build_pyramid,
    classification_probs,
    focal_cls_loss,
    predict_saliency,
    regression_displacements,
    saliency_loss,
)
from .metrics import decode_moments, nms
from .tensor import CounterRng, RunContext, Tensor, stack, zero_grads

log = logging.getLogger(__name__)

ARCH_KEYS = (
    "d_v", "d_q", "hidden_size", "num_heads", "K", "reversed", "share_params",
    "attn_order", "num_temporal_layers", "activation", "pyramid_levels",
)


class ConfigError(ValueError):
    """A training configuration violates its invariants."""


class CompatibilityError(RuntimeError):
    """A checkpoint does not match the requested configuration."""


@dataclass
class TrainConfig:
    # architecture
    d_v: int = 768
    d_q: int = 512
    hidden_size: int = 256
    num_heads: int = 8
    K: int = 4
    reversed: bool = True
    share_params: bool = True
    droppath_p: float = 0.1
    attn_order: str = "cross_first"
    num_temporal_layers: int = 1
    activation: str = "gelu"
    pyramid_levels: int = 4
    level_bands: tuple = (2.0, 16.0)
    vs_ratio: float = 0.2
    # loss weights (QVHighlights-style defaults)
    lambda_video: float = 0.1
    lambda_layer: float = 0.1
    lambda_cls: float = 1.0
    lambda_reg: float = 0.1
    lambda_sal: float = 0.1
    nce_temperature: float = 0.07
    symmetric_nce: bool = True
    omega_threshold_mode: str = "relative"
    alpha_cls: float = 0.9
    gamma_cls: float = 2.0
    # optimization (QVHighlights row of the hyperparameter table)
    batch_size: int = 128
    lr: float = 5e-4
    warmup_steps: int = 500
    lr_drop_epoch: int = 20
    epochs: int = 30
    max_steps: int = 0
    seed: int = 0
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    clip_norm: float = 0.0
    reshuffle_each_epoch: bool = True

    def validate(self) -> None:
        for name in ("lambda_video", "lambda_layer", "lambda_cls",
                     "lambda_reg", "lambda_sal"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.epochs < 0 or self.max_steps < 0:
            raise ConfigError("epochs/max_steps must be >= 0")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def block_config(self) -> BlockConfig:
        return BlockConfig(
            d_v=self.d_v, d_q=self.d_q, hidden_size=self.hidden_size,
            num_heads=self.num_heads, k=self.K, reversed_order=self.reversed,
            share_params=self.share_params, droppath_p=self.droppath_p,
            attn_order=self.attn_order,
            num_temporal_layers=self.num_temporal_layers,
            activation=self.activation,
        )

    def calibration_config(self) -> CalibrationConfig:
        return CalibrationConfig(
            lambda_video=self.lambda_video, lambda_layer=self.lambda_layer,
            nce_temperature=self.nce_temperature,
            symmetric_nce=self.symmetric_nce,
            omega_threshold_mode=self.omega_threshold_mode,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["level_bands"] = list(self.level_bands)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "level_bands" in d:
            d["level_bands"] = tuple(d["level_bands"])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def arch_hash(self) -> str:
        arch = {k: self.to_dict()[k] for k in ARCH_KEYS}
        return hashlib.sha256(
            json.dumps(arch, sort_keys=True).encode()
        ).hexdigest()[:16]


@dataclass
class ModelOutput:
    recurrent: object
    pyramid: object
    fg_probs: Tensor
    displacements: Tensor
    query_pooled: Tensor  # [K, C]
    saliency: Tensor      # [T]


class GroundingModel:
    """Recurrent fusion block, query pooling, pyramid, and heads."""

    def __init__(self, cfg: TrainConfig, rng: CounterRng | None = None):
        cfg.validate()
        self.cfg = cfg
        rng = rng if rng is not None else CounterRng(cfg.seed)
        self.block = BlockParams(cfg.block_config(), rng.spawn(1))
        self.heads = HeadParams(cfg, rng.spawn(2))

    def named_parameters(self):
        yield from self.block.named_parameters()
        yield from self.heads.named_parameters()

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def check_features(self, fs: LayerFeatureSet) -> None:
        if fs.n_layers < self.cfg.K:
            raise ValueError(
                f"feature stack has {fs.n_layers} layers but the model was "
                f"built with K={self.cfg.K}"
            )

    def forward(self, fs: LayerFeatureSet, ctx: RunContext) -> ModelOutput:
        self.check_features(fs)
        rec = run_recurrent(fs, self.block, ctx)
        q_pooled = adaptive_pool_query(
            rec.queries, fs.query_mask, self.heads.pool_weight
        )
        pyr = build_pyramid(rec.hidden, self.heads, self.cfg.pyramid_levels)
        probs = classification_probs(pyr, self.heads, self.cfg.activation)
        disp = regression_displacements(pyr, self.heads, self.cfg.activation)
        sal = predict_saliency(rec.hidden, q_pooled[self.cfg.K - 1])
        return ModelOutput(rec, pyr, probs, disp, q_pooled, sal)

    def sample_losses(self, out: ModelOutput, labels: GroundingLabels,
                      num_frames: int, ctx: RunContext):
        """Per-sample loss terms plus pooled calibration features (None when
        the sample has no positive frames)."""
        cfg = self.cfg
        assignment = assign_targets(out.pyramid.meta, labels.moments,
                                    cfg.level_bands)
        cls = focal_cls_loss(out.fg_probs, assignment.foreground,
                             alpha=cfg.alpha_cls, gamma=cfg.gamma_cls,
                             lam=cfg.lambda_cls)
        reg = boundary_l1_loss(out.displacements, assignment.displacements,
                               assignment.inside, lam=cfg.lambda_reg)
        omega = positive_frames(labels, num_frames, cfg.omega_threshold_mode)
        if omega.size == 0:
            sal = Tensor(0.0)
            pooled_v = None
        else:
            label_sal = labels.effective_saliency(num_frames)
            pos = int(omega[int(ctx.rng.integers(0, omega.size))])
            sal = saliency_loss(out.saliency, label_sal, pos,
                                tau=cfg.nce_temperature, lam=cfg.lambda_sal)
            pooled_v = pool_positive_video(out.recurrent.pools, omega)
        return {"cls": cls, "reg": reg, "sal": sal}, pooled_v

    def predict(self, fs: LayerFeatureSet, nms_threshold: float = 0.7):
        """Decoded moments after suppression, saliency curve, summary mask."""
        ctx = RunContext(train=False)
        out = self.forward(fs, ctx)
        preds = decode_moments(out.fg_probs.data, out.displacements.data,
                               out.pyramid.meta, fs.num_frames)
        kept = nms(preds, nms_threshold)
        sal = out.saliency.data.copy()
        summary = binarize_summary(sal, self.cfg.vs_ratio)
        return kept, sal, summary


def joint_loss(terms) -> Tensor:
    """Plain sum of the five loss terms; each already carries its weight."""
    terms = list(terms)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def lr_schedule(step: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warmup from 0, constant afterwards, tenthed from the drop epoch."""
    base = cfg.lr
    if cfg.lr_drop_epoch > 0 and steps_per_epoch > 0:
        if step // steps_per_epoch >= cfg.lr_drop_epoch:
            base = cfg.lr * 0.1
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return base * step / cfg.warmup_steps
    return base


class AdamW:
    """Adaptive moment estimation with decoupled weight decay."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=1e-4):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1**self.t)
            v_hat = self.v[i] / (1 - b2**self.t)
            p.data = p.data - lr * (
                m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data
            )


def clip_gradients(params, max_norm: float) -> float:
    total = math.sqrt(
        sum(float((p.grad**2).sum()) for p in params if p.grad is not None)
    )
    if total > max_norm > 0:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def load_samples(manifest):
    return [(load_features(rec.features_path), rec) for rec in manifest.samples]


@dataclass
class StepLog:
    step: int
    lr: float
    loss: float
    terms: dict


def train(cfg: TrainConfig, samples, callback=None):
    """Optimize a fresh model over (LayerFeatureSet, SampleRecord|labels)
    pairs. Returns (model, history). Deterministic given (cfg, seed, data)."""
    cfg.validate()
    model = GroundingModel(cfg)
    for fs, _ in samples:
        model.check_features(fs)
    n = len(samples)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total_steps = cfg.max_steps or cfg.epochs * steps_per_epoch
    if total_steps and cfg.warmup_steps >= total_steps:
        raise ConfigError(
            f"warmup_steps ({cfg.warmup_steps}) must be smaller than the "
            f"total step count ({total_steps})"
        )
    opt = AdamW(model.parameters(), beta1=cfg.beta1, beta2=cfg.beta2,
                weight_decay=cfg.weight_decay)
    data_rng = CounterRng(cfg.seed).spawn(101)
    step_rng = CounterRng(cfg.seed).spawn(102)
    cal_cfg = cfg.calibration_config()
    history = []
    order = []
    skipped_calibration = 0
    for step in range(total_steps):
        if step % steps_per_epoch == 0 and (cfg.reshuffle_each_epoch or not order):
            order = list(data_rng.permutation(n))
        lo = (step % steps_per_epoch) * cfg.batch_size
        batch = [samples[i] for i in order[lo : lo + cfg.batch_size]]
        # fixed-cycle mode uses common random numbers: stochastic choices are
        # keyed by epoch position, so epochs are directly comparable
        rng_key = step if cfg.reshuffle_each_epoch else step % steps_per_epoch
        ctx = RunContext(rng=step_rng.spawn(rng_key), train=True)

        zero_grads(model.parameters())
        per_term = {"cls": [], "reg": [], "sal": []}
        pooled_v, pooled_q = [], []
        for fs, rec in batch:
            labels = rec.labels if hasattr(rec, "labels") else rec
            out = model.forward(fs, ctx)
            terms, pv = model.sample_losses(out, labels, fs.num_frames, ctx)
            for name, t in terms.items():
                per_term[name].append(t)
            if pv is not None:
                pooled_v.append(pv)
                pooled_q.append(out.query_pooled)
            else:
                skipped_calibration += 1
        scale = 1.0 / len(batch)
        mean_terms = {
            name: joint_loss(vals) * scale for name, vals in per_term.items()
        }
        if pooled_v:
            video_loss, layer_loss = calibration_losses(
                stack(pooled_v, axis=0), stack(pooled_q, axis=0), cal_cfg
            )
        else:
            video_loss, layer_loss = Tensor(0.0), Tensor(0.0)
        loss = joint_loss(
            [video_loss, layer_loss, mean_terms["cls"], mean_terms["reg"],
             mean_terms["sal"]]
        )
        value = loss.item()
        term_values = {
            "video": video_loss.item(), "layer": layer_loss.item(),
            "cls": mean_terms["cls"].item(), "reg": mean_terms["reg"].item(),
            "sal": mean_terms["sal"].item(),
        }
        if not math.isfinite(value):
            raise RuntimeError(
                f"non-finite loss at step {step}: {term_values}"
            )
        loss.backward()
        if cfg.clip_norm > 0:
            clip_gradients(model.parameters(), cfg.clip_norm)
        lr = lr_schedule(step, cfg, steps_per_epoch)
        opt.step(lr)
        entry = StepLog(step=step, lr=lr, loss=value, terms=term_values)
        history.append(entry)
        if callback is not None:
            callback(entry)
    if skipped_calibration:
        log.info("samples skipped from calibration (empty positive set): %d",
                 skipped_calibration)
    return model, history


def validation_loss(model: GroundingModel, samples, seed: int = 0) -> float:
    """Eval-mode joint loss over a sample set (one big calibration batch)."""
    ctx = RunContext(rng=CounterRng(seed), train=False)
    per_term = {"cls": [], "reg": [], "sal": []}
    pooled_v, pooled_q = [], []
    for fs, rec in samples:
        labels = rec.labels if hasattr(rec, "labels") else rec
        out = model.forward(fs, ctx)
        terms, pv = model.sample_losses(out, labels, fs.num_frames, ctx)
        for name, t in terms.items():
            per_term[name].append(t)
        if pv is not None:
            pooled_v.append(pv)
            pooled_q.append(out.query_pooled)
    scale = 1.0 / len(samples)
    parts = [joint_loss(vals) * scale for vals in per_term.values()]
    if len(pooled_v) >= 1:
        video, layer = calibration_losses(
            stack(pooled_v, axis=0), stack(pooled_q, axis=0),
            model.cfg.calibration_config(),
        )
        parts.extend([video, layer])
    return joint_loss(parts).item()


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(model: GroundingModel, path, step: int = 0) -> None:
    """One JSON header line, then the parameter tensors in an R2FT container."""
    from .features import write_container

    named = list(model.named_parameters())
    header = {
        "format": "r2ground-checkpoint",
        "version": 1,
        "step": step,
        "config": model.cfg.to_dict(),
        "config_hash": model.cfg.arch_hash(),
        "names": [n for n, _ in named],
    }
    tmp = Path(str(path) + ".tensors")
    write_container(tmp, [p.data for _, p in named])
    blob = tmp.read_bytes()
    tmp.unlink()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(blob)


def load_checkpoint(path, cfg: TrainConfig | None = None):
    """Rebuild the model from a checkpoint; returns (model, step).

    When ``cfg`` is given its architecture hash must match the stored one.
    """
    from .features import parse_container

    raw = Path(path).read_bytes()
    newline = raw.index(b"\n")
    header = json.loads(raw[:newline].decode())
    if header.get("format") != "r2ground-checkpoint":
        raise CompatibilityError("not a checkpoint file")
    stored_cfg = TrainConfig.from_dict(header["config"])
    if cfg is not None and cfg.arch_hash() != header["config_hash"]:
        raise CompatibilityError(
            f"checkpoint architecture hash {header['config_hash']} does not "
            f"match requested configuration {cfg.arch_hash()}"
        )
    arrays, _ = parse_container(raw[newline + 1 :])
    model = GroundingModel(stored_cfg)
    named = list(model.named_parameters())
    if [n for n, _ in named] != header["names"]:
        raise CompatibilityError("checkpoint parameter names do not match model")
    if len(arrays) != len(named):
        raise CompatibilityError("checkpoint tensor count does not match model")
    for (name, p), arr in zip(named, arrays):
        if p.data.shape != arr.shape:
            raise CompatibilityError(f"parameter {name} shape mismatch")
        p.data = arr.astype(p.data.dtype)
    return model, int(header["step"])


# -- evaluation ---------------------------------------------------------------


def evaluate(model: GroundingModel, samples, saliency_threshold: float = 0.8,
             vs_budget: int = 5):
    """Run inference and score every task whose labels are present."""
    preds_all, gts_all = [], []
    hd_aps, hd_hits, vs_aps = [], [], []
    for fs, rec in samples:
        labels = rec.labels if hasattr(rec, "labels") else rec
        kept, sal, _ = model.predict(fs)
        if labels.moments:
            preds_all.append(kept)
            gts_all.append([tuple(m) for m in labels.moments])
        if labels.saliency is not None:
            positives = np.asarray(labels.saliency) >= saliency_threshold
            if positives.any():
                hd_aps.append(metrics_mod.ranking_ap(sal, positives))
                hd_hits.append(metrics_mod.hit_at_1(sal, positives))
        if labels.annotators:
            vs_aps.append(metrics_mod.top5_map(sal, labels.annotators,
                                               budget=vs_budget))
    report = {}
    if preds_all:
        recalls = metrics_mod.recall_at_1(preds_all, gts_all)
        report.update({f"R1@{t}": v for t, v in recalls.items()})
        report["mIoU"] = metrics_mod.mean_iou(preds_all, gts_all)
        report["mAP"] = metrics_mod.mean_ap(preds_all, gts_all)
    if hd_aps:
        report["HD-mAP"] = float(np.mean(hd_aps))
        report["HIT@1"] = float(np.mean(hd_hits))
    if vs_aps:
        report["Top5-mAP"] = float(np.mean(vs_aps))
    return report


def predictions_record(sample_id: str, kept, sal, summary,
                       frame_rate: float = 1.0, unit: str = "frames") -> dict:
    moments = [[p.start, p.end, p.confidence] for p in kept]
    if unit == "seconds":
        moments = [[s / frame_rate, e / frame_rate, c] for s, e, c in moments]
    return {
        "sample_id": sample_id,
        "unit": unit,
        "frame_rate": frame_rate,
        "moments": moments,
        "saliency": [float(v) for v in sal],
        "summary": [int(v) for v in summary],
    }


def write_predictions(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def _read_jsonl(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines()
            if line.strip()]


def score_files(pred_path, gt_path, saliency_threshold: float = 0.8):
    """Score a predictions file against a ground-truth file (both JSONL,
    keyed by sample id)."""
    preds = {r["sample_id"]: r for r in _read_jsonl(pred_path)}
    report = {}
    preds_all, gts_all = [], []
    hd_aps, hd_hits = [], []
    for rec in _read_jsonl(gt_path):
        sid = rec["sample_id"]
        if sid not in preds:
            raise ValueError(f"prediction missing for sample {sid}")
        p = preds[sid]
        if rec.get("moments"):
            preds_all.append(
                [metrics_mod.MomentPrediction(m[0], m[1], m[2] if len(m) > 2 else 1.0)
                 for m in p.get("moments", [])]
            )
            gts_all.append([(m[0], m[1]) for m in rec["moments"]])
        if rec.get("saliency") and p.get("saliency"):
            positives = np.asarray(rec["saliency"], dtype=float) >= saliency_threshold
            if positives.any():
                hd_aps.append(metrics_mod.ranking_ap(p["saliency"], positives))
                hd_hits.append(metrics_mod.hit_at_1(p["saliency"], positives))
    if preds_all:
        recalls = metrics_mod.recall_at_1(preds_all, gts_all)
        report.update({f"R1@{t}": v for t, v in recalls.items()})
        report["mIoU"] = metrics_mod.mean_iou(preds_all, gts_all)
        report["mAP"] = metrics_mod.mean_ap(preds_all, gts_all)
    if hd_aps:
        report["HD-mAP"] = float(np.mean(hd_aps))
        report["HIT@1"] = float(np.mean(hd_hits))
    return report
