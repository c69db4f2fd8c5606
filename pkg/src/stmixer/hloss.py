"""Two-layer hierarchical weighted cross-entropy and its decision rule.

H1 is a two-way head (dilatation vs. not); H2 is a three-way head over the
evolution classes. Training minimises ``alpha * WCE(H1) + WCE(H2)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


class EvolutionLabel(IntEnum):
    STABILITY = 0
    DILATATION = 1
    SHRINKAGE = 2

    @classmethod
    def parse(cls, value) -> "EvolutionLabel":
        if isinstance(value, str):
            return cls[value.strip().upper()]
        return cls(int(value))

    def __str__(self):
        return self.name.lower()


@dataclass
class HeadOutputs:
    logits_h1: Tensor  # (..., 2); index 1 = dilatation
    logits_h2: Tensor  # (..., 3); indexed by EvolutionLabel


@dataclass(frozen=True)
class HLossConfig:
    alpha: float = 1.0
    h2_weights: tuple[float, float, float] = (0.1, 1.0, 1.0)  # stability, dilatation, shrinkage
    h1_weights: tuple[float, float] = (1.0, 1.0)  # not-dilatation, dilatation

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        if min(self.h2_weights) <= 0 or min(self.h1_weights) <= 0:
            raise ValueError("class weights must be positive")


def _logits(x) -> Tensor:
    return dc.constant(np.asarray(x, dtype=np.float32)) if not isinstance(x, Tensor) else x


def wce(logits, y, weights) -> Tensor:
    """Per-case ``-weights[y] * log softmax(logits)[y]``.

    ``logits`` is ``(k,)`` or ``(B, k)``; ``y`` a class index or ``(B,)`` indices.
    """
    logits = _logits(logits)
    k = logits.shape[-1]
    y = np.asarray(y, dtype=np.intp)
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"class index {y.tolist()} out of range for {k} classes")
    w = np.asarray(weights, dtype=logits.data.dtype)
    logp = dc.log_softmax(logits)
    if logp.data.ndim == 1:
        picked = dc.index(logp, int(y))
    else:
        picked = dc.index(logp, (np.arange(len(y)), y))
    return dc.mul(picked, -w[y])


def h1_target(y):
    """1 for dilatation, 0 otherwise (works on scalars and arrays)."""
    out = (np.asarray(y) == EvolutionLabel.DILATATION).astype(np.intp)
    return int(out) if out.ndim == 0 else out


def hloss(out: HeadOutputs, y, cfg: HLossConfig = HLossConfig()) -> Tensor:
    """Batch-mean of ``alpha * WCE(H1) + WCE(H2)``."""
    y = np.asarray(y, dtype=np.intp)
    loss = wce(out.logits_h2, y, cfg.h2_weights)
    if cfg.alpha:
        h1 = wce(out.logits_h1, h1_target(y), cfg.h1_weights)
        loss = dc.add(dc.scale(h1, cfg.alpha), loss)
    return dc.mean(loss)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def predict(out: HeadOutputs, use_h1: bool = True):
    """H1 gates dilatation; otherwise H2 picks between stability and shrinkage.

    Exact ties go to the lower class code. With ``use_h1=False`` (an H1 head
    that was never trained) the plain H2 argmax is returned.
    """
    h1, h2 = _data(out.logits_h1), _data(out.logits_h2)
    if not use_h1:
        pred = np.argmax(h2, axis=-1)
    else:
        dil = h1[..., 1] > h1[..., 0]
        shrink = h2[..., EvolutionLabel.SHRINKAGE] > h2[..., EvolutionLabel.STABILITY]
        pred = np.where(dil, EvolutionLabel.DILATATION,
                        np.where(shrink, EvolutionLabel.SHRINKAGE, EvolutionLabel.STABILITY))
    if np.ndim(pred) == 0:
        return EvolutionLabel(int(pred))
    return pred.astype(np.intp)


def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def h1_score(out: HeadOutputs):
    """Probability of dilatation from H1."""
    p = _softmax_np(_data(out.logits_h1))[..., 1]
    return float(p) if np.ndim(p) == 0 else p


def h2_probs(out: HeadOutputs) -> np.ndarray:
    return _softmax_np(_data(out.logits_h2))
