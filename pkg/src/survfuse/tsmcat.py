"""Two-stream co-attention transformer over phenotype and gene-module tokens.

At every level each modality goes through two blocks: a standard transformer
block (intra-modal) and a co-attention block whose keys and values come from
the other modality (inter-modal).  The two outputs are concatenated along the
feature axis, so a ``C x d_model`` input becomes ``C x 2*d_model``; a learned
linear map brings it back to ``d_model`` before the next level.

Blocks are post-norm: ``x = LN(q + MHA(q, kv))`` then ``LN(x + MLP(x))`` with a
GELU MLP.  All functions accept arbitrary leading batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .layers import init_layer_norm, init_linear, init_mlp, mlp


def scaled_dot_attention(Q, K, V, trace: list | None = None) -> Tensor:
    Q, K, V = ag.as_tensor(Q), ag.as_tensor(K), ag.as_tensor(V)
    if Q.shape[-1] != K.shape[-1]:
        raise ShapeError(f"query/key widths differ: {Q.shape} vs {K.shape}")
    if K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"key/value counts differ: {K.shape} vs {V.shape}")
    scores = ag.matmul(Q, ag.transpose(K)) * (1.0 / np.sqrt(Q.shape[-1]))
    att = ag.softmax(scores, axis=-1)
    if trace is not None:
        trace.append(att.data)
    return ag.matmul(att, V)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, D = x.shape
    x = ag.reshape(x, (*lead, n, heads, D // heads))
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return ag.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    x = ag.transpose(x, axes)
    *lead, n, h, dh = x.shape
    return ag.reshape(x, (*lead, n, h * dh))


def init_attention(rng, dim: int) -> dict:
    return {
        "q": init_linear(rng, dim, dim),
        "k": init_linear(rng, dim, dim),
        "v": init_linear(rng, dim, dim),
        "o": init_linear(rng, dim, dim),
    }


def multi_head_attention(params: dict, q_in, kv_in, heads: int, trace: list | None = None) -> Tensor:
    q_in, kv_in = ag.as_tensor(q_in), ag.as_tensor(kv_in)
    D = params["q"]["W"].shape[-2]
    if q_in.shape[-1] != D or kv_in.shape[-1] != D:
        raise ShapeError(f"inputs {q_in.shape}, {kv_in.shape} do not have model width {D}")
    if heads < 1 or D % heads:
        raise ValueError(f"model width {D} is not divisible by {heads} heads")
    Q = _split_heads(ag.linear(q_in, params["q"]["W"], params["q"]["b"]), heads)
    K = _split_heads(ag.linear(kv_in, params["k"]["W"], params["k"]["b"]), heads)
    V = _split_heads(ag.linear(kv_in, params["v"]["W"], params["v"]["b"]), heads)
    out = _merge_heads(scaled_dot_attention(Q, K, V, trace))
    return ag.linear(out, params["o"]["W"], params["o"]["b"])


def init_block(rng, dim: int, mlp_hidden: int) -> dict:
    return {
        "attn": init_attention(rng, dim),
        "norm1": init_layer_norm(dim),
        "mlp": init_mlp(rng, [dim, mlp_hidden, dim]),
        "norm2": init_layer_norm(dim),
    }


def _block(params: dict, q_in, kv_in, heads: int, trace=None) -> Tensor:
    a = multi_head_attention(params["attn"], q_in, kv_in, heads, trace)
    x = ag.layer_norm(ag.add(q_in, a), params["norm1"]["gamma"], params["norm1"]["beta"])
    m = mlp(params["mlp"], x, act=ag.gelu)
    return ag.layer_norm(ag.add(x, m), params["norm2"]["gamma"], params["norm2"]["beta"])


def transformer_block(params: dict, X, heads: int, trace: list | None = None) -> Tensor:
    return _block(params, X, X, heads, trace)


def co_attention_block(params_img: dict, params_gene: dict, P, G, heads: int, trace=None):
    """Image queries over gene keys/values, and gene queries over image keys/values."""
    P, G = ag.as_tensor(P), ag.as_tensor(G)
    if P.shape[-1] != G.shape[-1]:
        raise ShapeError(f"modality widths differ: {P.shape} vs {G.shape}")
    return _block(params_img, P, G, heads, trace), _block(params_gene, G, P, heads, trace)


@dataclass
class FusionState:
    depth: int
    P_tr: Tensor
    P_ctr: Tensor
    G_tr: Tensor
    G_ctr: Tensor

    @property
    def P(self) -> Tensor:
        return ag.concat([self.P_tr, self.P_ctr], axis=-1)

    @property
    def G(self) -> Tensor:
        return ag.concat([self.G_tr, self.G_ctr], axis=-1)


def init_tsmcat(rng, d_k: int, d_model: int, depth: int, mlp_hidden: int | None = None) -> dict:
    if depth < 1:
        raise ValueError("depth must be at least 1")
    mlp_hidden = mlp_hidden or 2 * d_model
    levels = []
    for t in range(depth):
        level = {}
        if t > 0:
            level["reproj_p"] = init_linear(rng, 2 * d_model, d_model)
            level["reproj_g"] = init_linear(rng, 2 * d_model, d_model)
        for name in ("tr_p", "tr_g", "co_p", "co_g"):
            level[name] = init_block(rng, d_model, mlp_hidden)
        levels.append(level)
    return {
        "in_p": init_linear(rng, d_k, d_model),
        "in_g": init_linear(rng, d_k, d_model),
        "levels": levels,
    }


def tsmcat_forward(params: dict, P0, G0, heads: int, states: list | None = None):
    """Returns the final ``(P, G)``, each ``(..., C, 2*d_model)``.

    ``P0``/``G0`` are the encoder outputs (width ``d_k``).  Pass a list as
    ``states`` to collect a :class:`FusionState` per level.
    """
    levels = params["levels"]
    if not levels:
        raise ValueError("depth must be at least 1")
    P = ag.linear(P0, params["in_p"]["W"], params["in_p"]["b"])
    G = ag.linear(G0, params["in_g"]["W"], params["in_g"]["b"])
    for t, lv in enumerate(levels):
        if t > 0:
            P = ag.linear(P, lv["reproj_p"]["W"], lv["reproj_p"]["b"])
            G = ag.linear(G, lv["reproj_g"]["W"], lv["reproj_g"]["b"])
        P_tr = transformer_block(lv["tr_p"], P, heads)
        G_tr = transformer_block(lv["tr_g"], G, heads)
        P_ctr, G_ctr = co_attention_block(lv["co_p"], lv["co_g"], P, G, heads)
        state = FusionState(t + 1, P_tr, P_ctr, G_tr, G_ctr)
        if states is not None:
            states.append(state)
        P, G = state.P, state.G
    return P, G
