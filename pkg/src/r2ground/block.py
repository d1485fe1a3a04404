"""Recurrent coarse-to-fine fusion over multi-layer encoder features.

One shared block performs query-modulated spatial pooling (patch features
attend to query tokens, gated into the frame summary token) followed by
temporal refinement (cross-attention to the query, self-attention over time,
feed-forward; post-norm residuals). The block is applied K times over the
feature stack, normally from the last encoder layer towards earlier ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    CounterRng,
    NumericError,
    RunContext,
    Tensor,
    masked_max,
    matmul,
    softmax,
)


class DegenerateQueryError(ValueError):
    """The query has no unmasked tokens."""


@dataclass
class BlockConfig:
    d_v: int = 768
    d_q: int = 512
    hidden_size: int = 256
    num_heads: int = 8
    k: int = 4                      # refinement steps
    reversed_order: bool = True     # last encoder layer first
    share_params: bool = True
    droppath_p: float = 0.1
    attn_order: str = "cross_first"
    num_temporal_layers: int = 1
    activation: str = "gelu"

    def __post_init__(self):
        if self.hidden_size % self.num_heads:
            raise ValueError(
                f"hidden_size {self.hidden_size} not divisible by "
                f"num_heads {self.num_heads}"
            )
        if self.attn_order not in ("cross_first", "self_first"):
            raise ValueError(f"unknown attn_order: {self.attn_order!r}")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"unknown activation: {self.activation!r}")


# -- small layers -----------------------------------------------------------


def gelu(x: Tensor) -> Tensor:
    # tanh-form smooth gate
    inner = math.sqrt(2.0 / math.pi) * (x + 0.044715 * (x**3))
    return 0.5 * x * (1.0 + inner.tanh())


def relu(x: Tensor) -> Tensor:
    return (x + x.abs()) * 0.5


_ACTIVATIONS = {"gelu": gelu, "relu": relu}


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return gain * (xc / (var + eps).sqrt()) + bias


def _xavier(rng: CounterRng, fan_in: int, fan_out: int, shape) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, shape)


class Affine:
    def __init__(self, rng, d_in, d_out, bias=True):
        self.w = Tensor(_xavier(rng, d_in, d_out, (d_in, d_out)), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.w)
        return out + self.b if self.b is not None else out

    def params(self, prefix):
        yield f"{prefix}.w", self.w
        if self.b is not None:
            yield f"{prefix}.b", self.b


class LayerNormParams:
    def __init__(self, dim):
        self.g = Tensor(np.ones(dim), requires_grad=True)
        self.b = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.g, self.b)

    def params(self, prefix):
        yield f"{prefix}.g", self.g
        yield f"{prefix}.b", self.b


class Mlp:
    """Two affine layers with one nonlinearity and LayerNorm on the output."""

    def __init__(self, rng, d_in, d_out):
        self.fc1 = Affine(rng, d_in, d_out)
        self.fc2 = Affine(rng, d_out, d_out)
        self.ln = LayerNormParams(d_out)

    def __call__(self, x: Tensor, act) -> Tensor:
        return self.ln(self.fc2(act(self.fc1(x))))

    def params(self, prefix):
        yield from self.fc1.params(f"{prefix}.fc1")
        yield from self.fc2.params(f"{prefix}.fc2")
        yield from self.ln.params(f"{prefix}.ln")


class Attention:
    def __init__(self, rng, dim):
        self.wq = Affine(rng, dim, dim)
        # no key bias: it shifts every logit in a row equally, which the
        # softmax cancels, leaving a parameter with no effect on the output
        self.wk = Affine(rng, dim, dim, bias=False)
        self.wv = Affine(rng, dim, dim)
        self.wo = Affine(rng, dim, dim)

    def params(self, prefix):
        for name, layer in (("wq", self.wq), ("wk", self.wk),
                            ("wv", self.wv), ("wo", self.wo)):
            yield from layer.params(f"{prefix}.{name}")


def multi_head_attention(q_in: Tensor, kv_in: Tensor, p: Attention,
                         num_heads: int, key_mask=None) -> Tensor:
    """Standard multi-head attention of q_in [Tq,C] over kv_in [Tk,C].

    ``key_mask`` (boolean over Tk, True = attend) is applied additively as
    -inf inside the softmax, keeping shapes static for padded queries.
    """
    tq, dim = q_in.shape
    tk = kv_in.shape[0]
    hd = dim // num_heads
    q = p.wq(q_in).reshape(tq, num_heads, hd).transpose(1, 0, 2)
    k = p.wk(kv_in).reshape(tk, num_heads, hd).transpose(1, 0, 2)
    v = p.wv(kv_in).reshape(tk, num_heads, hd).transpose(1, 0, 2)
    scores = matmul(q, k.transpose(0, 2, 1)) * (1.0 / math.sqrt(hd))
    mask = None
    if key_mask is not None:
        mask = np.broadcast_to(
            np.asarray(key_mask, dtype=bool)[None, None, :], (num_heads, tq, tk)
        )
    attn = softmax(scores, axis=-1, mask=mask)
    mixed = matmul(attn, v)  # [H, Tq, hd]
    merged = mixed.transpose(1, 0, 2).reshape(tq, dim)
    return p.wo(merged)


class TemporalLayer:
    """Cross-attention, self-attention, feed-forward with post-norm residuals."""

    def __init__(self, rng, dim, ffn_mult=4):
        self.cross = Attention(rng, dim)
        self.self_ = Attention(rng, dim)
        self.ffn1 = Affine(rng, dim, ffn_mult * dim)
        self.ffn2 = Affine(rng, ffn_mult * dim, dim)
        self.ln_cross = LayerNormParams(dim)
        self.ln_self = LayerNormParams(dim)
        self.ln_ffn = LayerNormParams(dim)

    def params(self, prefix):
        yield from self.cross.params(f"{prefix}.cross")
        yield from self.self_.params(f"{prefix}.self")
        yield from self.ffn1.params(f"{prefix}.ffn1")
        yield from self.ffn2.params(f"{prefix}.ffn2")
        yield from self.ln_cross.params(f"{prefix}.ln_cross")
        yield from self.ln_self.params(f"{prefix}.ln_self")
        yield from self.ln_ffn.params(f"{prefix}.ln_ffn")


class StepParams:
    """All learnables used by one refinement step."""

    def __init__(self, rng, cfg: BlockConfig):
        c = cfg.hidden_size
        self.visual_mlp = Mlp(rng, cfg.d_v, c)
        self.query_mlp = Mlp(rng, cfg.d_q, c)
        self.w_q = Tensor(_xavier(rng, c, c, (c, c)), requires_grad=True)
        self.w_v = Tensor(_xavier(rng, c, c, (c, c)), requires_grad=True)
        self.gamma = Tensor(np.zeros(()), requires_grad=True)  # spatial gate, tanh
        self.psi = Tensor(np.zeros(()), requires_grad=True)    # temporal gate, sigmoid
        self.temporal = [
            TemporalLayer(rng, c) for _ in range(cfg.num_temporal_layers)
        ]

    def params(self, prefix):
        yield from self.visual_mlp.params(f"{prefix}.visual_mlp")
        yield from self.query_mlp.params(f"{prefix}.query_mlp")
        yield f"{prefix}.w_q", self.w_q
        yield f"{prefix}.w_v", self.w_v
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.psi", self.psi
        for i, t in enumerate(self.temporal):
            yield from t.params(f"{prefix}.temporal{i}")


class BlockParams:
    """Parameter set for the recurrent block: one shared step when
    ``share_params`` is on, otherwise one independent set per step."""

    def __init__(self, cfg: BlockConfig, rng: CounterRng):
        self.cfg = cfg
        n_sets = 1 if cfg.share_params else cfg.k
        self.steps = [StepParams(rng, cfg) for _ in range(n_sets)]

    def step(self, k: int) -> StepParams:
        """Parameters for step k (1-based)."""
        return self.steps[0] if self.cfg.share_params else self.steps[k - 1]

    def named_parameters(self):
        for i, s in enumerate(self.steps):
            yield from s.params(f"block.step{i}")

    def count(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())


# -- forward operations -------------------------------------------------------


def drop_path(residual: Tensor, branch: Tensor, ctx: RunContext, p: float) -> Tensor:
    """Stochastic skip of a residual branch with inverse-keep rescaling at
    train time; identity at eval time."""
    if not ctx.train or p <= 0.0:
        return residual + branch
    if ctx.rng.uniform() < p:
        return residual
    return residual + branch * (1.0 / (1.0 - p))


def spatial_pool(e_v: Tensor, e_q: Tensor, query_mask, sp: StepParams,
                 cfg: BlockConfig, step: int):
    """Pool patch features into one token per frame, steered by the query.

    e_v is [T, P+1, D_v] with the frame summary token at patch index 0;
    e_q is [L, D_q]. Returns (e_pool [T,C], projected query [L,C],
    attention map [T,L,P] with masked token rows zeroed).

    The per-frame attention runs over the P patch positions only; the summary
    token re-enters through the gated sum, so with the gate at its zero init
    e_pool is exactly the projected summary token.
    """
    query_mask = np.asarray(query_mask, dtype=bool)
    if not query_mask.any():
        raise DegenerateQueryError("query has no unmasked tokens")
    act = _ACTIVATIONS[cfg.activation]
    ev_hat = sp.visual_mlp(e_v, act)             # [T, P+1, C]
    eq_hat = sp.query_mlp(e_q, act)              # [L, C]
    cls = ev_hat[:, 0, :]                        # [T, C]
    patches = ev_hat[:, 1:, :]                   # [T, P, C]
    q_proj = matmul(eq_hat, sp.w_q)              # [L, C]
    v_proj = matmul(patches, sp.w_v)             # [T, P, C]
    scores = matmul(q_proj, v_proj.transpose(0, 2, 1))  # [T, L, P]
    attn = softmax(scores * (1.0 / math.sqrt(cfg.hidden_size)), axis=-1)
    maskf = Tensor(query_mask.astype(ev_hat.dtype)[None, :, None])
    attn = attn * maskf                          # padded token rows contribute nothing
    pooled = matmul(attn, patches) + eq_hat      # [T, L, C], query as residual
    e_token = masked_max(pooled, axis=1, mask=query_mask[None, :, None])  # [T, C]
    gate = sp.gamma.tanh()
    e_pool = cls + gate * e_token
    return e_pool, eq_hat, attn


def temporal_refine(e_pool: Tensor, eq_hat: Tensor, h_prev: Tensor, query_mask,
                    sp: StepParams, cfg: BlockConfig, ctx: RunContext,
                    step: int) -> Tensor:
    """Blend pooled features into the hidden state and refine over time."""
    act = _ACTIVATIONS[cfg.activation]
    phi = sp.psi.sigmoid()
    h = phi * e_pool + (1.0 - phi) * h_prev
    mask = np.asarray(query_mask, dtype=bool)

    def run_cross(x):
        branch = multi_head_attention(x, eq_hat, sp_layer.cross, cfg.num_heads,
                                      key_mask=mask)
        return ln_checked(sp_layer.ln_cross, drop_path(x, branch, ctx, cfg.droppath_p),
                          "cross-attention")

    def run_self(x):
        branch = multi_head_attention(x, x, sp_layer.self_, cfg.num_heads)
        return ln_checked(sp_layer.ln_self, drop_path(x, branch, ctx, cfg.droppath_p),
                          "self-attention")

    def run_ffn(x):
        branch = sp_layer.ffn2(act(sp_layer.ffn1(x)))
        return ln_checked(sp_layer.ln_ffn, drop_path(x, branch, ctx, cfg.droppath_p),
                          "feed-forward")

    def ln_checked(ln, x, name):
        try:
            return ln(x)
        except NumericError as exc:
            raise NumericError(f"{name} sublayer (step {step}): {exc}") from exc

    for sp_layer in sp.temporal:
        if cfg.attn_order == "cross_first":
            h = run_ffn(run_self(run_cross(h)))
        else:
            h = run_ffn(run_cross(run_self(h)))
    return h


def initial_hidden_state(num_frames: int, hidden_size: int) -> Tensor:
    """The hidden state before the first refinement step: exactly zero."""
    return Tensor(np.zeros((num_frames, hidden_size)))


@dataclass
class RecurrentOutput:
    hidden: Tensor                 # [T, C] final state
    pools: list                    # K tensors [T, C], one per step (gated summary)
    queries: list                  # K tensors [L, C], projected query per step
    feature_tensors: list = field(default_factory=list)  # frozen inputs, for audits


def run_recurrent(fs, params: BlockParams, ctx: RunContext) -> RecurrentOutput:
    """Apply the block K times over the feature stack.

    ``fs`` provides visual [N,T,P+1,D_v], query [N,L,D_q] and query_mask [L]
    (see features.LayerFeatureSet). Slab 0 is the last encoder layer; with
    ``reversed_order`` the walk starts there and moves to earlier layers,
    otherwise it runs the other way. The hidden state starts at exactly zero.
    """
    cfg = params.cfg
    if fs.n_layers < cfg.k:
        raise ValueError(
            f"feature stack has {fs.n_layers} layers but refinement depth "
            f"k={cfg.k} requires at least that many"
        )
    order = range(cfg.k) if cfg.reversed_order else range(cfg.k - 1, -1, -1)
    h = initial_hidden_state(fs.num_frames, cfg.hidden_size)
    pools, queries, frozen = [], [], []
    for step, slab in enumerate(order, start=1):
        e_v = Tensor(np.asarray(fs.visual[slab], dtype=float))
        e_q = Tensor(np.asarray(fs.query[slab], dtype=float))
        frozen.extend([e_v, e_q])
        sp = params.step(step)
        e_pool, eq_hat, _ = spatial_pool(e_v, e_q, fs.query_mask, sp, cfg, step)
        h = temporal_refine(e_pool, eq_hat, h, fs.query_mask, sp, cfg, ctx, step)
        pools.append(e_pool)
        queries.append(eq_hat)
    return RecurrentOutput(hidden=h, pools=pools, queries=queries,
                           feature_tensors=frozen)
