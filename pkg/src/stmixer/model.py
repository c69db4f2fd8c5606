"""Siamese encoder + mixer + H1/H2 heads assembled into one model."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Param
from .encoder import EncoderConfig, encode_pair, init_encoder_params
from .hloss import HeadOutputs
from .stm import concat_mix, init_concat_params, init_stm_params, mix

MIXERS = ("stm", "concat")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    mixer: str = "stm"
    shared_pre_block: bool = True

    def __post_init__(self):
        if self.mixer not in MIXERS:
            raise ValueError(f"mixer must be one of {MIXERS}, got {self.mixer!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d.get("encoder", {}))
        return cls(**d)


class STMixerModel:
    """Parameters live in ``self.params`` (name -> Param), in a fixed order."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        D = cfg.encoder.embed_dim
        self.params: dict[str, Param] = init_encoder_params(cfg.encoder, rng)
        if cfg.mixer == "stm":
            self.params.update(init_stm_params(D, rng, cfg.encoder.mlp_ratio, cfg.shared_pre_block))
        else:
            self.params.update(init_concat_params(D, rng))
        # zero heads: both start at uniform probabilities
        for name, shape in (("head.h1.W", (D, 2)), ("head.h1.b", (2,)),
                            ("head.h2.W", (D, 3)), ("head.h2.b", (3,))):
            self.params[name] = Param(np.zeros(shape), name=name)

    def parameters(self) -> list[Param]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def embed(self, roi_t1, roi_t0, t0_present=None):
        return encode_pair(roi_t1, roi_t0, self.params, self.cfg.encoder, t0_present)

    def fuse(self, emb):
        fn = mix if self.cfg.mixer == "stm" else concat_mix
        return fn(emb.F_L1, emb.F_G1, emb.F_L0, self.params)

    def forward(self, roi_t1, roi_t0, t0_present=None) -> HeadOutputs:
        z = self.fuse(self.embed(roi_t1, roi_t0, t0_present))
        P = self.params
        return HeadOutputs(dc.linear(z, P["head.h1.W"], P["head.h1.b"]),
                           dc.linear(z, P["head.h2.W"], P["head.h2.b"]))

    __call__ = forward
