"""Deterministic synthetic longitudinal nodule ROIs.

Each case is a soft-edged ellipsoid rendered at T0 and, rescaled by the
class's diameter change, at T1. Every case draws from its own random stream
derived from ``(seed, index)``, so datasets are reproducible regardless of
how many workers render them. Labels always agree with
:func:`stmixer.dataprep.label_evolution` on diameters measured from the
generated masks; draws that would disagree are rejected and redrawn.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataprep import GROWTH_THRESHOLD_MM, Texture, label_evolution, measure_diameter
from .encoder import WINDOW_HI, WINDOW_LO
from .hloss import EvolutionLabel
from .volume import Volume3D

BACKGROUND = 0.2
FOREGROUND = 0.8
EDGE_MM = 0.5
MIN_DIAMETER_MM = 2.0
MAX_TRIES = 200
SPLITS = (("train", 70), ("val", 85), ("test", 100))


@dataclass(frozen=True)
class SynthConfig:
    roi_size: int = 32
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    radius_range: tuple[float, float] = (3.0, 8.0)
    axis_ratio_range: tuple[float, float] = (0.8, 1.25)
    jitter_voxels: float = 2.0
    # diameter change in mm, by class
    dilatation_delta: tuple[float, float] = (2.0, 4.0)
    shrinkage_delta: tuple[float, float] = (-4.0, -2.0)
    stability_delta: tuple[float, float] = (-1.0, 1.0)
    priors: tuple[float, float, float] = (0.92, 0.06, 0.02)  # stability, dilatation, shrinkage
    noise_std: float = 0.1
    missing_t0_prob: float = 0.3

    def __post_init__(self):
        t = GROWTH_THRESHOLD_MM
        lo, hi = self.dilatation_delta
        if not (t < lo <= hi):
            raise ValueError(f"dilatation delta {self.dilatation_delta} must lie above +{t} mm")
        lo, hi = self.shrinkage_delta
        if not (lo <= hi < -t):
            raise ValueError(f"shrinkage delta {self.shrinkage_delta} must lie below -{t} mm")
        lo, hi = self.stability_delta
        if not (-t < lo <= hi < t):
            raise ValueError(f"stability delta {self.stability_delta} must lie inside +-{t} mm")
        if len(self.priors) != 3 or min(self.priors) < 0 or not math.isclose(sum(self.priors), 1.0):
            raise ValueError(f"priors must be three non-negative values summing to 1, got {self.priors}")
        if not 0.0 <= self.missing_t0_prob <= 1.0:
            raise ValueError(f"missing_t0_prob must be in [0, 1], got {self.missing_t0_prob}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        r_lo, r_hi = self.radius_range
        if not 0 < r_lo <= r_hi:
            raise ValueError(f"bad radius range {self.radius_range}")
        # largest T1 semi-axis must stay inside the ROI after jitter
        largest = r_hi * self.axis_ratio_range[1] + self.dilatation_delta[1] / 2
        half_extent = min(self.spacing) * (self.roi_size / 2 - self.jitter_voxels - 1)
        if largest > half_extent:
            raise ValueError(f"nodules up to {largest:.1f} mm semi-axis do not fit a "
                             f"{self.roi_size}-voxel ROI")

    @classmethod
    def balanced(cls, **kw) -> "SynthConfig":
        return cls(priors=(1 / 3, 1 / 3, 1 / 3), **kw)

    @classmethod
    def acceptance(cls, **kw) -> "SynthConfig":
        return cls(priors=(0.80, 0.12, 0.08), noise_std=0.1, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class SynthCase:
    id: str
    index: int
    split: str
    label: EvolutionLabel
    texture: Texture
    roi_t1: Volume3D
    mask_t1: Volume3D
    d_t1: float  # true (analytic) diameter, mm
    measured_d_t1: float
    roi_t0: Volume3D | None = None
    mask_t0: Volume3D | None = None
    d_t0: float | None = None
    measured_d_t0: float | None = None

    @property
    def t0_present(self) -> bool:
        return self.roi_t0 is not None


@dataclass
class _Geometry:
    center: np.ndarray  # (z, y, x) mm
    axes: np.ndarray  # semi-axes (z, y, x) mm
    angle: float  # in-plane rotation

    @property
    def diameter(self) -> float:
        return 2.0 * float(max(self.axes[1], self.axes[2]))

    def scaled(self, s: float) -> "_Geometry":
        return _Geometry(self.center, self.axes * s, self.angle)


def split_for_index(index: int) -> str:
    bucket = int.from_bytes(hashlib.blake2b(str(index).encode(), digest_size=8).digest(), "little") % 100
    for name, upper in SPLITS:
        if bucket < upper:
            return name
    raise AssertionError("unreachable")


def case_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def _grid(cfg: SynthConfig) -> np.ndarray:
    n = cfg.roi_size
    idx = np.arange(n, dtype=np.float64)
    zz, yy, xx = np.meshgrid(idx, idx, idx, indexing="ij")
    return np.stack([zz * cfg.spacing[0], yy * cfg.spacing[1], xx * cfg.spacing[2]])


def _render(geo: _Geometry, cfg: SynthConfig, grid: np.ndarray):
    d = grid - geo.center[:, None, None, None]
    c, s = math.cos(geo.angle), math.sin(geo.angle)
    x_r = c * d[2] + s * d[1]
    y_r = -s * d[2] + c * d[1]
    r = np.sqrt((d[0] / geo.axes[0]) ** 2 + (y_r / geo.axes[1]) ** 2 + (x_r / geo.axes[2]) ** 2)
    mask = (r <= 1.0).astype(np.float32)
    # signed distance to the surface, approximated along the mean axis
    sd = (1.0 - r) * float(geo.axes.mean())
    soft = BACKGROUND + (FOREGROUND - BACKGROUND) / (1.0 + np.exp(-sd / EDGE_MM))
    return soft, mask


def _finish(soft: np.ndarray, rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    if cfg.noise_std:
        soft = soft + rng.normal(0.0, cfg.noise_std, soft.shape)
    return np.clip(soft, WINDOW_LO, WINDOW_HI).astype(np.float32)


def _delta_range(cfg: SynthConfig, label: EvolutionLabel) -> tuple[float, float]:
    return {EvolutionLabel.STABILITY: cfg.stability_delta,
            EvolutionLabel.DILATATION: cfg.dilatation_delta,
            EvolutionLabel.SHRINKAGE: cfg.shrinkage_delta}[label]


def generate_case(rng: np.random.Generator, cfg: SynthConfig, index: int = 0,
                  grid: np.ndarray | None = None) -> SynthCase:
    """Draw one labelled case from ``rng``."""
    grid = _grid(cfg) if grid is None else grid
    label = EvolutionLabel(int(rng.choice(3, p=cfg.priors)))
    texture = list(Texture)[int(rng.integers(3))]
    t0_present = bool(rng.random() >= cfg.missing_t0_prob)
    mid = (cfg.roi_size - 1) / 2.0
    for _ in range(MAX_TRIES):
        center = (mid + rng.uniform(-cfg.jitter_voxels, cfg.jitter_voxels, 3)) * np.array(cfg.spacing)
        radius = rng.uniform(*cfg.radius_range)
        axes = radius * rng.uniform(*cfg.axis_ratio_range, 3)
        geo0 = _Geometry(center, axes, float(rng.uniform(0.0, math.pi)))
        delta = rng.uniform(*_delta_range(cfg, label))
        d0 = geo0.diameter
        d1 = d0 + delta
        if d1 < MIN_DIAMETER_MM or label_evolution(d0, d1) != label:
            continue
        geo1 = geo0.scaled(d1 / d0)
        soft1, mask1 = _render(geo1, cfg, grid)
        if not mask1.any():
            continue
        m1 = Volume3D(mask1, cfg.spacing)
        md1 = measure_diameter(m1).value_mm
        if not t0_present:
            return SynthCase(f"case{index:05d}", index, split_for_index(index), label, texture,
                             Volume3D(_finish(soft1, rng, cfg), cfg.spacing), m1, d1, md1)
        soft0, mask0 = _render(geo0, cfg, grid)
        if not mask0.any():
            continue
        m0 = Volume3D(mask0, cfg.spacing)
        md0 = measure_diameter(m0).value_mm
        if label_evolution(md0, md1) != label:
            continue
        # one noise draw per time point, T0 first
        roi0 = _finish(soft0, rng, cfg)
        roi1 = _finish(soft1, rng, cfg)
        return SynthCase(f"case{index:05d}", index, split_for_index(index), label, texture,
                         Volume3D(roi1, cfg.spacing), m1, d1, md1,
                         Volume3D(roi0, cfg.spacing), m0, d0, md0)
    raise RuntimeError(f"could not draw a consistent {label} case in {MAX_TRIES} tries")


@dataclass
class SynthDataset:
    cfg: SynthConfig
    seed: int
    cases: list[SynthCase] = field(default_factory=list)

    def split(self, name: str) -> list[SynthCase]:
        return [c for c in self.cases if c.split == name]

    def manifest(self) -> dict:
        return {
            "version": 1,
            "seed": self.seed,
            "config": self.cfg.to_dict(),
            "cases": [case_record(c) for c in self.cases],
        }


def case_record(c: SynthCase) -> dict:
    return {
        "id": c.id,
        "split": c.split,
        "label": int(c.label),
        "texture": c.texture.value,
        "roi_t0": f"{c.id}_t0.raw" if c.t0_present else None,
        "roi_t1": f"{c.id}_t1.raw",
        "dims": list(c.roi_t1.dims),
        "spacing": list(c.roi_t1.spacing),
        "d_t0": c.d_t0,
        "d_t1": c.d_t1,
        "measured_d_t0": c.measured_d_t0,
        "measured_d_t1": c.measured_d_t1,
    }


def generate_dataset(cfg: SynthConfig, n: int, seed: int, workers: int = 1) -> SynthDataset:
    if n < 1:
        raise ValueError(f"need at least one case, got n={n}")
    grid = _grid(cfg)

    def one(i):
        return generate_case(case_rng(seed, i), cfg, i, grid)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            cases = list(pool.map(one, range(n)))
    else:
        cases = [one(i) for i in range(n)]
    return SynthDataset(cfg, seed, cases)
