"""Dataset-construction geometry for longitudinal nodule data.

Pairs detections across registered scans, measures nodule diameter from a
segmentation mask, and labels the evolution class from two diameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .hloss import EvolutionLabel
from .volume import Volume3D

PAIR_THRESHOLD_MM = 1.5
GROWTH_THRESHOLD_MM = 1.5
TIMEPOINTS = ("T0", "T1", "T2")


class Texture(str, Enum):
    GGN = "GGN"
    SOLID = "solid"
    PART_SOLID = "part-solid"


@dataclass
class NoduleDetection:
    id: str
    timepoint: str
    center: tuple[float, float, float]  # (x, y, z) mm, registered frame
    mask: Volume3D | None = None
    texture: Texture = Texture.SOLID

    def __post_init__(self):
        if self.timepoint not in TIMEPOINTS:
            raise ValueError(f"unknown timepoint {self.timepoint!r}")
        self.center = tuple(float(c) for c in self.center)
        if len(self.center) != 3 or not all(math.isfinite(c) for c in self.center):
            raise ValueError(f"center must be three finite coordinates, got {self.center}")
        if self.mask is not None and not np.any(self.mask.voxels > 0.5):
            raise ValueError(f"detection {self.id} has an empty mask")


@dataclass
class NodulePair:
    earlier: NoduleDetection
    later: NoduleDetection
    distance_mm: float


@dataclass
class PairingResult:
    pairs: list[NodulePair] = field(default_factory=list)
    disappeared: list[NoduleDetection] = field(default_factory=list)  # earlier, unmatched
    new: list[NoduleDetection] = field(default_factory=list)  # later, unmatched


@dataclass
class DiameterMeasurement:
    value_mm: float
    slice_index: int
    rect_angle: float


def _timepoint(dets: list[NoduleDetection]) -> str | None:
    tps = {d.timepoint for d in dets}
    if len(tps) > 1:
        raise ValueError(f"detections in one list must share a timepoint, got {sorted(tps)}")
    return tps.pop() if tps else None


def pair_nodules(a: list[NoduleDetection], b: list[NoduleDetection],
                 threshold_mm: float = PAIR_THRESHOLD_MM) -> PairingResult:
    """Match detections of two scans by iterated mutual-nearest neighbours.

    Only cross-scan pairs closer than ``threshold_mm`` are eligible. Each
    round pairs every (i, j) that are each other's nearest eligible partner
    (ties to the lower list index), removes them, and repeats until no new
    pair forms.
    """
    ta, tb = _timepoint(a), _timepoint(b)
    if ta is not None and ta == tb:
        raise ValueError(f"both lists are at timepoint {ta}")
    swap = ta is not None and tb is not None and TIMEPOINTS.index(ta) > TIMEPOINTS.index(tb)
    if swap:
        a, b = b, a
    result = PairingResult()
    if a and b:
        ca = np.array([d.center for d in a])
        cb = np.array([d.center for d in b])
        dist = np.sqrt(((ca[:, None, :] - cb[None, :, :]) ** 2).sum(axis=-1))
        live = dist < threshold_mm
        matched_a: dict[int, int] = {}
        while live.any():
            masked = np.where(live, dist, np.inf)
            best_b = masked.argmin(axis=1)
            best_a = masked.argmin(axis=0)
            found = [(i, int(best_b[i])) for i in range(len(a))
                     if live[i].any() and best_a[best_b[i]] == i]
            if not found:
                break
            for i, j in found:
                matched_a[i] = j
                live[i, :] = False
                live[:, j] = False
        for i in sorted(matched_a):
            j = matched_a[i]
            result.pairs.append(NodulePair(a[i], b[j], float(dist[i, j])))
        used_b = set(matched_a.values())
        result.disappeared = [d for i, d in enumerate(a) if i not in matched_a]
        result.new = [d for j, d in enumerate(b) if j not in used_b]
    else:
        result.disappeared, result.new = list(a), list(b)
    return result


def max_area_slice(mask: Volume3D) -> int:
    """Axial (z) slice with the most set voxels; ties go to the lowest index."""
    counts = (mask.voxels > 0.5).reshape(mask.dims[0], -1).sum(axis=1)
    if counts.max() == 0:
        raise ValueError("mask is empty")
    return int(np.argmax(counts))


def voxel_corners(points, spacing=(1.0, 1.0)) -> np.ndarray:
    """Corner points in mm of the unit cells at integer (row, col) voxel indices.

    Returns (x, y) pairs: column maps to x with ``spacing[1]``, row to y with ``spacing[0]``.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    offsets = np.array([[-0.5, -0.5], [-0.5, 0.5], [0.5, -0.5], [0.5, 0.5]])
    corners = (pts[:, None, :] + offsets[None]).reshape(-1, 2)
    corners = np.unique(corners, axis=0)
    return np.column_stack([corners[:, 1] * spacing[1], corners[:, 0] * spacing[0]])


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Counter-clockwise hull vertices (monotone chain), collinear points dropped."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=np.float64))))
    if len(pts) <= 2:
        return np.array(pts)

    def cross(o, p, q):
        return (p[0] - o[0]) * (q[1] - o[1]) - (p[1] - o[1]) * (q[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def min_area_rect(hull: np.ndarray) -> tuple[float, float, float, float]:
    """Rotating calipers over a CCW hull: (area, width, height, angle).

    ``width`` runs along the hull edge the rectangle is flush with, whose
    direction is ``angle`` (radians). Four calipers (the edge itself, the
    farthest point along it, the farthest point away from it, the farthest
    point behind it) each advance monotonically around the hull.
    """
    h = len(hull)
    if h < 3:
        raise ValueError("need a hull with at least three vertices")

    def edge(i):
        d = hull[(i + 1) % h] - hull[i]
        u = d / math.hypot(d[0], d[1])
        return u, np.array([-u[1], u[0]])

    u, n = edge(0)
    right = int(np.argmax(hull @ u))
    top = int(np.argmax(hull @ n))
    left = int(np.argmin(hull @ u))
    best = None
    for i in range(h):
        u, n = edge(i)
        while hull[(right + 1) % h] @ u > hull[right] @ u + 1e-12:
            right = (right + 1) % h
        while hull[(top + 1) % h] @ n > hull[top] @ n + 1e-12:
            top = (top + 1) % h
        while hull[(left + 1) % h] @ u < hull[left] @ u - 1e-12:
            left = (left + 1) % h
        width = float(hull[right] @ u - hull[left] @ u)
        height = float(hull[top] @ n - hull[i] @ n)
        area = width * height
        if best is None or area < best[0] - 1e-12:
            best = (area, width, height, math.atan2(u[1], u[0]))
    return best


def min_rect_longest_side(points, spacing=(1.0, 1.0)) -> tuple[float, float]:
    """Longest side (mm) and orientation of the min-area rectangle around voxels.

    ``points`` are integer (row, col) voxel indices; every voxel contributes
    its four corners so a single voxel measures one voxel edge.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("no points to measure")
    corners = voxel_corners(pts, spacing)
    # only the row extremes can be hull vertices
    order = np.lexsort((corners[:, 0], corners[:, 1]))
    corners = corners[order]
    _, first = np.unique(corners[:, 1], return_index=True)
    last = np.r_[first[1:] - 1, len(corners) - 1]
    hull = convex_hull(corners[np.union1d(first, last)])
    _, width, height, angle = min_area_rect(hull)
    return max(width, height), angle


def measure_diameter(mask: Volume3D) -> DiameterMeasurement:
    """Longest side of the min-area rectangle on the largest axial mask slice."""
    z = max_area_slice(mask)
    rows, cols = np.nonzero(mask.voxels[z] > 0.5)
    value, angle = min_rect_longest_side(np.column_stack([rows, cols]), mask.spacing[1:])
    return DiameterMeasurement(value, z, angle)


def label_evolution(d_prev_mm: float, d_curr_mm: float,
                    threshold_mm: float = GROWTH_THRESHOLD_MM) -> EvolutionLabel:
    """Stable within +-threshold (inclusive); beyond it, growth or shrinkage."""
    if not (d_prev_mm > 0 and d_curr_mm > 0):
        raise ValueError(f"diameters must be positive, got {d_prev_mm}, {d_curr_mm}")
    delta = d_curr_mm - d_prev_mm
    if delta > threshold_mm:
        return EvolutionLabel.DILATATION
    if delta < -threshold_mm:
        return EvolutionLabel.SHRINKAGE
    return EvolutionLabel.STABILITY
