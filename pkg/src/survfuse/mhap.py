"""Multi-head attention pooling with top-rank token masking.

One pooling head projects the token matrix ``Z`` (N x d_in) to queries (through
a GELU MLP that halves the width), keys and values, and forms
``att = softmax(Q K^T / sqrt(d))``.  Tokens are ranked by the attention mass
they receive (column sums of ``att``); the top ``ceil(k N)`` are kept, the other
columns and rows of ``att`` are zeroed, and the retained rows of
``att_mask @ V`` are averaged into one ``d_in`` vector.  Heads are concatenated.

The selection itself is a constant mask: no gradient flows into the ranking,
and dropped tokens' values get exactly zero gradient.
"""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .layers import init_linear, init_mlp, mlp


def retained_count(n: int, ratio: float) -> int:
    if not 0 < ratio <= 1:
        raise ValueError(f"pooling ratio must lie in (0, 1], got {ratio}")
    # guard against k*N landing a hair above an integer
    return max(1, min(n, math.ceil(round(ratio * n, 9))))


def top_rank(att: np.ndarray, ratio: float) -> np.ndarray:
    """Boolean (..., N) mask of the tokens receiving the most attention mass.

    Ties go to the lower token index.
    """
    n = att.shape[-1]
    keep = retained_count(n, ratio)
    mass = att.sum(axis=-2)
    order = np.argsort(-mass, axis=-1, kind="stable")
    mask = np.zeros(mass.shape, dtype=bool)
    np.put_along_axis(mask, order[..., :keep], True, axis=-1)
    return mask


def init_pool_head(rng, d_in: int) -> dict:
    d_q = max(1, d_in // 2)
    return {
        "Wq": init_linear(rng, d_in, d_in, bias=False),
        "Wk": init_linear(rng, d_in, d_q, bias=False),
        "Wv": init_linear(rng, d_in, d_in, bias=False),
        "mlp": init_mlp(rng, [d_in, d_in, d_q]),
    }


def self_attention_pool(
    params: dict,
    Z,
    ratio: float,
    renormalize: bool = False,
    trace: dict | None = None,
) -> Tensor:
    """Pool ``Z`` of shape (..., N, d_in) to (..., d_in)."""
    Z = ag.as_tensor(Z)
    n = Z.shape[-2]
    if n < 1:
        raise ValueError("cannot pool an empty token set")
    Q = mlp(params["mlp"], ag.linear(Z, params["Wq"]["W"]), act=ag.gelu)
    K = ag.linear(Z, params["Wk"]["W"])
    V = ag.linear(Z, params["Wv"]["W"])
    att = ag.softmax(ag.matmul(Q, ag.transpose(K)) * (1.0 / math.sqrt(Q.shape[-1])), axis=-1)
    keep = top_rank(att.data, ratio)
    kf = keep.astype(np.float64)
    # zero dropped columns (keys) and dropped rows (queries)
    att_mask = ag.mul(att, kf[..., None, :] * kf[..., :, None])
    if renormalize:
        att_mask = ag.div(att_mask, ag.add(ag.sum(att_mask, axis=-1, keepdims=True), 1.0 - kf[..., :, None]))
    y = ag.matmul(att_mask, V)
    if trace is not None:
        trace.update(att=att.data, keep=keep, att_mask=att_mask.data, V=V)
    retained = kf.sum(axis=-1)
    return ag.div(ag.sum(y, axis=-2), retained[..., None])


def init_mhap(rng, d_in: int, heads: int) -> list[dict]:
    if heads < 1:
        raise ValueError("need at least one pooling head")
    return [init_pool_head(rng, d_in) for _ in range(heads)]


def mhap_forward(params: list[dict], Z, ratio: float, renormalize: bool = False) -> Tensor:
    outs = [self_attention_pool(p, Z, ratio, renormalize) for p in params]
    return outs[0] if len(outs) == 1 else ag.concat(outs, axis=-1)
