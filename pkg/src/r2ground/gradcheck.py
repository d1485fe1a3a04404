"""Finite-difference audits for every differentiable subsystem.

Each check builds a deterministic scalar loss (DropPath forced off, the
saliency positive re-sampled identically per evaluation) and compares the
analytic gradients of every parameter against central differences.
"""

from __future__ import annotations

import numpy as np

from .calibration import calibration_losses
from .features import SynthSpec, generate_synthetic
from .tensor import CounterRng, RunContext, Tensor, finite_diff_check, matmul, softmax, stack
from .training import GroundingModel, TrainConfig, joint_loss

TOLERANCE = 1e-4


def check_tensor_ops() -> float:
    rng = np.random.default_rng(0)
    w = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=4), requires_grad=True)
    x = Tensor(rng.normal(size=(6, 5)))

    def f():
        h = matmul(x, w) + b
        return (softmax(h.tanh(), axis=1) * h.sigmoid()).mean()

    return finite_diff_check(f, [w, b])


def check_attention() -> float:
    from .block import BlockConfig, BlockParams, multi_head_attention

    cfg = BlockConfig(d_v=6, d_q=5, hidden_size=8, num_heads=2, k=1,
                      droppath_p=0.0)
    params = BlockParams(cfg, CounterRng(1))
    layer = params.step(1).temporal[0]
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(3, 8)))
    kv = Tensor(rng.normal(size=(2, 8)))
    tensors = [p for _, p in layer.cross.params("cross")]

    def f():
        return (multi_head_attention(x, kv, layer.cross, 2) ** 2).mean()

    return finite_diff_check(f, tensors)


def check_block() -> float:
    from .block import BlockConfig, BlockParams, run_recurrent
    from .features import LayerFeatureSet

    cfg = BlockConfig(d_v=6, d_q=5, hidden_size=8, num_heads=2, k=2,
                      droppath_p=0.0)
    params = BlockParams(cfg, CounterRng(3))
    for s in params.steps:
        s.gamma.data = np.asarray(0.2)
        s.psi.data = np.asarray(0.1)
    rng = np.random.default_rng(4)
    fs = LayerFeatureSet(
        visual=rng.normal(size=(2, 2, 3, 6)),
        query=rng.normal(size=(2, 2, 5)),
        query_mask=np.ones(2, dtype=bool),
    )
    target = rng.normal(size=(2, 8))
    tensors = [p for _, p in params.named_parameters()]

    def f():
        out = run_recurrent(fs, params, RunContext())
        return ((out.hidden - Tensor(target)) ** 2).mean()

    return finite_diff_check(f, tensors)


def check_calibration() -> float:
    from .calibration import CalibrationConfig

    rng = np.random.default_rng(5)
    v = Tensor(rng.normal(size=(2, 2, 4)), requires_grad=True)
    q = Tensor(rng.normal(size=(2, 2, 4)), requires_grad=True)
    cfg = CalibrationConfig()

    def f():
        video, layer = calibration_losses(v, q, cfg)
        return video + layer

    return finite_diff_check(f, [v, q])


def check_heads() -> float:
    from .heads import (
        HeadParams,
        assign_targets,
        boundary_l1_loss,
        build_pyramid,
        classification_probs,
        focal_cls_loss,
        regression_displacements,
    )

    class Cfg:
        hidden_size = 4
        pyramid_levels = 2

    params = HeadParams(Cfg(), CounterRng(6))
    rng = np.random.default_rng(7)
    h = Tensor(rng.normal(size=(4, 4)))
    moments = [(0.0, 2.0)]
    tensors = [p for _, p in params.named_parameters()]

    def f():
        pyr = build_pyramid(h, params, 2)
        assignment = assign_targets(pyr.meta, moments)
        probs = classification_probs(pyr, params)
        disp = regression_displacements(pyr, params)
        return focal_cls_loss(probs, assignment.foreground) + boundary_l1_loss(
            disp, assignment.displacements, assignment.inside
        )

    return finite_diff_check(f, tensors)


def full_graph_instance():
    """The T=4, L=3, P=4, C=8, K=2 two-sample batch used by the acceptance
    gradient audit: recurrent block, calibration, and all three heads feed a
    single joint loss."""
    cfg = TrainConfig(
        d_v=6, d_q=5, hidden_size=8, num_heads=2, K=2, droppath_p=0.0,
        pyramid_levels=2, seed=9,
    )
    model = GroundingModel(cfg)
    spec = SynthSpec(
        n_layers=2, num_frames=4, num_tokens=3, num_patches=4, d_v=6, d_q=5,
        num_moments=1, snr=2.0, min_moment_len=2, max_moment_len=3,
    )
    samples = [generate_synthetic(spec, 100 + i) for i in range(2)]

    def f():
        ctx = RunContext(rng=CounterRng(0), train=False)
        per_term = {"cls": [], "reg": [], "sal": []}
        pooled_v, pooled_q = [], []
        for fs, labels in samples:
            out = model.forward(fs, ctx)
            terms, pv = model.sample_losses(out, labels, fs.num_frames, ctx)
            for name, t in terms.items():
                per_term[name].append(t)
            pooled_v.append(pv)
            pooled_q.append(out.query_pooled)
        video, layer = calibration_losses(
            stack(pooled_v, axis=0), stack(pooled_q, axis=0),
            cfg.calibration_config(),
        )
        half = 0.5
        return joint_loss([
            video, layer,
            (per_term["cls"][0] + per_term["cls"][1]) * half,
            (per_term["reg"][0] + per_term["reg"][1]) * half,
            (per_term["sal"][0] + per_term["sal"][1]) * half,
        ])

    return model, f


def check_full_graph() -> float:
    model, f = full_graph_instance()
    return finite_diff_check(f, model.parameters())


CHECKS = {
    "tensor": check_tensor_ops,
    "attention": check_attention,
    "block": check_block,
    "calibration": check_calibration,
    "heads": check_heads,
    "full": check_full_graph,
}


def run_all(modules=None) -> dict:
    names = modules or list(CHECKS)
    return {name: CHECKS[name]() for name in names}
