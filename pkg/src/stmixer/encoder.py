"""Siamese transformer-lite encoder for cubic ROIs.

One set of weights encodes every time point. A scan yields a global vector
(the output at a learnable global token) and a local vector (mean over the
patch-token outputs). Only the T1 scan contributes a global vector; a missing
T0 scan is replaced by a learnable placeholder for its local vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Param, Tensor
from .volume import Volume3D

# Intensities inside [WINDOW_LO, WINDOW_HI] map linearly onto [-1, 1].
WINDOW_LO = 0.0
WINDOW_HI = 1.0
INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    roi_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 2
    heads: int = 1
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.roi_size % self.patch_size:
            raise ValueError(f"roi_size {self.roi_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def n_patches(self) -> int:
        return (self.roi_size // self.patch_size) ** 3

    @property
    def patch_voxels(self) -> int:
        return self.patch_size ** 3


@dataclass
class EmbeddingTriple:
    """Encoder outputs for a batch of cases, each of shape (B, D)."""

    F_G1: Tensor
    F_L1: Tensor
    F_L0: Tensor
    t0_present: np.ndarray


def patchify(v, patch_size: int) -> np.ndarray:
    """Split volumes into non-overlapping cubes in row-major (z, y, x) patch order.

    Accepts a :class:`Volume3D` (returns ``(n_patches, patch_voxels)``) or an
    array whose last three axes are spatial (returns ``(..., n_patches, patch_voxels)``).
    """
    arr = v.voxels if isinstance(v, Volume3D) else np.asarray(v)
    *lead, Z, Y, X = arr.shape
    p = patch_size
    if Z % p or Y % p or X % p:
        raise ValueError(f"volume dims {(Z, Y, X)} not divisible by patch size {p}")
    a = arr.reshape(*lead, Z // p, p, Y // p, p, X // p, p)
    n = len(lead)
    a = a.transpose(*range(n), n, n + 2, n + 4, n + 1, n + 3, n + 5)
    return a.reshape(*lead, (Z // p) * (Y // p) * (X // p), p ** 3)


def unpatchify(patches: np.ndarray, dims, patch_size: int) -> np.ndarray:
    Z, Y, X = dims
    p = patch_size
    *lead, _, _ = patches.shape
    n = len(lead)
    a = patches.reshape(*lead, Z // p, Y // p, X // p, p, p, p)
    a = a.transpose(*range(n), n, n + 3, n + 1, n + 4, n + 2, n + 5)
    return a.reshape(*lead, Z, Y, X)


def normalize_intensity(voxels: np.ndarray) -> np.ndarray:
    v = np.clip(voxels, WINDOW_LO, WINDOW_HI)
    return (2.0 * (v - WINDOW_LO) / (WINDOW_HI - WINDOW_LO) - 1.0).astype(np.float32)


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Param]:
    D, h = cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio

    def gauss(*shape):
        return rng.normal(0.0, INIT_STD, size=shape)

    params = {
        "enc.patch_W": Param(gauss(cfg.patch_voxels, D)),
        "enc.patch_b": Param(np.zeros(D)),
        "enc.pos": Param(gauss(cfg.n_patches, D)),
        "enc.global_token": Param(gauss(D)),
        "enc.t0_placeholder": Param(gauss(D)),
    }
    for i in range(cfg.depth):
        pre = f"enc.block{i}."
        params.update({
            pre + "ln1.gamma": Param(np.ones(D)),
            pre + "ln1.beta": Param(np.zeros(D)),
            pre + "attn.Wq": Param(gauss(D, D)),
            pre + "attn.bq": Param(np.zeros(D)),
            pre + "attn.Wk": Param(gauss(D, D)),
            pre + "attn.bk": Param(np.zeros(D)),
            pre + "attn.Wv": Param(gauss(D, D)),
            pre + "attn.bv": Param(np.zeros(D)),
            pre + "attn.Wo": Param(gauss(D, D)),
            pre + "attn.bo": Param(np.zeros(D)),
            pre + "ln2.gamma": Param(np.ones(D)),
            pre + "ln2.beta": Param(np.zeros(D)),
            pre + "mlp.W1": Param(gauss(D, h)),
            pre + "mlp.b1": Param(np.zeros(h)),
            pre + "mlp.W2": Param(gauss(h, D)),
            pre + "mlp.b2": Param(np.zeros(D)),
        })
    for name, p in params.items():
        p.name = name
    return params


def _block(x: Tensor, params: dict, i: int, heads: int) -> Tensor:
    pre = f"enc.block{i}."
    P = lambda k: params[pre + k]  # noqa: E731
    h = dc.layer_norm(x, P("ln1.gamma"), P("ln1.beta"))
    x = x + dc.self_attention(h, P("attn.Wq"), P("attn.bq"), P("attn.Wk"), P("attn.bk"),
                              P("attn.Wv"), P("attn.bv"), P("attn.Wo"), P("attn.bo"), heads=heads)
    h = dc.layer_norm(x, P("ln2.gamma"), P("ln2.beta"))
    return x + dc.mlp_block(h, P("mlp.W1"), P("mlp.b1"), P("mlp.W2"), P("mlp.b2"))


def _as_batch(volumes) -> tuple[np.ndarray, bool]:
    if isinstance(volumes, Volume3D):
        return volumes.voxels[None], True
    arr = np.asarray(volumes, dtype=np.float32)
    if arr.ndim == 3:
        return arr[None], True
    return arr, False


def encode(volumes, params: dict, cfg: EncoderConfig) -> tuple[Tensor, Tensor]:
    """Return (global_emb, local_emb) for one volume or a batch ``(B, Z, Y, X)``."""
    batch, single = _as_batch(volumes)
    s = cfg.roi_size
    if batch.shape[1:] != (s, s, s):
        raise ValueError(f"ROI dims {batch.shape[1:]} do not match configured roi_size {s}")
    B, D = batch.shape[0], cfg.embed_dim
    patches = dc.constant(patchify(normalize_intensity(batch), cfg.patch_size))
    tokens = dc.linear(patches, params["enc.patch_W"], params["enc.patch_b"]) + params["enc.pos"]
    glob = dc.broadcast_to(params["enc.global_token"], (B, 1, D))
    x = dc.concat([glob, tokens], axis=1)
    for i in range(cfg.depth):
        x = _block(x, params, i, cfg.heads)
    global_emb = dc.index(x, (slice(None), 0))
    local_emb = dc.mean(dc.index(x, (slice(None), slice(1, None))), axis=1)
    if single:
        return dc.index(global_emb, 0), dc.index(local_emb, 0)
    return global_emb, local_emb


def encode_pair(roi_t1, roi_t0, params: dict, cfg: EncoderConfig,
                t0_present: np.ndarray | None = None) -> EmbeddingTriple:
    """Siamese encoding of T1 (and T0 where present) with shared weights.

    For a batch, ``roi_t0`` holds only the present T0 volumes, in case order,
    and ``t0_present`` flags which cases they belong to. For single volumes
    pass ``roi_t0=None`` when T0 is missing.
    """
    t1, single = _as_batch(roi_t1)
    B = t1.shape[0]
    if t0_present is None:
        t0_present = np.full(B, roi_t0 is not None)
    t0_present = np.asarray(t0_present, dtype=bool)
    t0 = _as_batch(roi_t0)[0] if roi_t0 is not None else np.zeros((0, *t1.shape[1:]), np.float32)
    if len(t0) != int(t0_present.sum()):
        raise ValueError(f"{len(t0)} T0 volumes for {int(t0_present.sum())} flagged cases")

    # one pass over T1 and T0 together so both paths see identical arithmetic
    g_all, l_all = encode(np.concatenate([t1, t0]), params, cfg)
    F_G1 = dc.index(g_all, slice(0, B))
    F_L1 = dc.index(l_all, slice(0, B))
    F_L0 = dc.broadcast_to(params["enc.t0_placeholder"], (B, cfg.embed_dim))
    if len(t0):
        F_L0 = dc.fill_rows(F_L0, np.flatnonzero(t0_present), dc.index(l_all, slice(B, None)))
    if single:
        F_G1, F_L1, F_L0 = (dc.index(t, 0) for t in (F_G1, F_L1, F_L0))
    return EmbeddingTriple(F_G1, F_L1, F_L0, t0_present)
