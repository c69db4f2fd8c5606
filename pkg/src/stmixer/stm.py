"""Spatial-temporal mixer and the concatenation baseline.

The mixer lets the current lesion embedding query two keys, the current
global embedding (spatial) and the prior lesion embedding (temporal). Each
key's vector is weighted by the cosine similarity of its query-key pair,
the two are summed, linearly projected, and added back onto the current
lesion embedding.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Param, Tensor
from .encoder import INIT_STD


def init_stm_params(D: int, rng: np.random.Generator, mlp_ratio: int = 4,
                    shared_pre_block: bool = True) -> dict[str, Param]:
    h = D * mlp_ratio

    def gauss(*shape):
        return rng.normal(0.0, INIT_STD, size=shape)

    params = {}
    for tag in ("pre",) if shared_pre_block else ("pre_l1", "pre_g1", "pre_l0"):
        params.update({
            f"stm.{tag}.ln.gamma": Param(np.ones(D)),
            f"stm.{tag}.ln.beta": Param(np.zeros(D)),
            f"stm.{tag}.mlp.W1": Param(gauss(D, h)),
            f"stm.{tag}.mlp.b1": Param(np.zeros(h)),
            f"stm.{tag}.mlp.W2": Param(gauss(h, D)),
            f"stm.{tag}.mlp.b2": Param(np.zeros(D)),
        })
    params.update({
        "stm.Wq": Param(gauss(D, D)),
        "stm.Wk": Param(gauss(D, D)),
        "stm.lp.W": Param(gauss(D, D)),
        "stm.lp.b": Param(np.zeros(D)),
    })
    for name, p in params.items():
        p.name = name
    return params


def init_concat_params(D: int, rng: np.random.Generator) -> dict[str, Param]:
    params = {
        "concat.W": Param(rng.normal(0.0, INIT_STD, size=(3 * D, D))),
        "concat.b": Param(np.zeros(D)),
    }
    for name, p in params.items():
        p.name = name
    return params


def pre_block(F: Tensor, params: dict, tag: str = "pre") -> Tensor:
    """F + MLP(LayerNorm(F))."""
    P = lambda k: params[f"stm.{tag}.{k}"]  # noqa: E731
    h = dc.layer_norm(F, P("ln.gamma"), P("ln.beta"))
    return F + dc.mlp_block(h, P("mlp.W1"), P("mlp.b1"), P("mlp.W2"), P("mlp.b2"))


def _pre_tags(params: dict) -> tuple[str, str, str]:
    if "stm.pre.ln.gamma" in params:
        return "pre", "pre", "pre"
    return "pre_l1", "pre_g1", "pre_l0"


def similarities(F_L1: Tensor, F_G1: Tensor, F_L0: Tensor, params: dict):
    """Pre-blocked embeddings plus the spatial and temporal similarity scalars."""
    for F in (F_L1, F_G1, F_L0):
        if F.shape[-1] != params["stm.Wq"].shape[0]:
            raise ValueError(f"embedding dim {F.shape[-1]} != mixer dim {params['stm.Wq'].shape[0]}")
    t_l1, t_g1, t_l0 = _pre_tags(params)
    l1 = pre_block(F_L1, params, t_l1)
    g1 = pre_block(F_G1, params, t_g1)
    l0 = pre_block(F_L0, params, t_l0)
    q = dc.linear(l1, params["stm.Wq"])
    s_spatial = dc.cosine_sim(q, dc.linear(g1, params["stm.Wk"]))
    s_temporal = dc.cosine_sim(q, dc.linear(l0, params["stm.Wk"]))
    return l1, g1, l0, s_spatial, s_temporal


def mix(F_L1: Tensor, F_G1: Tensor, F_L0: Tensor, params: dict) -> Tensor:
    """Fuse (B, D) or (D,) embeddings into the mixed lesion embedding."""
    l1, g1, l0, s_g, s_t = similarities(F_L1, F_G1, F_L0, params)
    s_g = dc.reshape(s_g, (*s_g.shape, 1))
    s_t = dc.reshape(s_t, (*s_t.shape, 1))
    fused = s_g * g1 + s_t * l0
    return l1 + dc.linear(fused, params["stm.lp.W"], params["stm.lp.b"])


def concat_mix(F_L1: Tensor, F_G1: Tensor, F_L0: Tensor, params: dict) -> Tensor:
    """Linear projection of [F_L1; F_G1; F_L0]."""
    return dc.linear(dc.concat([F_L1, F_G1, F_L0], axis=-1), params["concat.W"], params["concat.b"])
