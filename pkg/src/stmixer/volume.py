"""3D scalar volume with voxel spacing; axis order is (z, y, x)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Volume3D:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"volume needs three positive dims, got {self.voxels.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def to_bytes(self) -> bytes:
        return self.voxels.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes, dims, spacing=(1.0, 1.0, 1.0)) -> "Volume3D":
        dims = tuple(int(d) for d in dims)
        expected = 4 * int(np.prod(dims))
        if len(raw) != expected:
            raise ValueError(f"raw volume has {len(raw)} bytes, dims {dims} need {expected}")
        return cls(np.frombuffer(raw, dtype="<f4").reshape(dims), spacing)
