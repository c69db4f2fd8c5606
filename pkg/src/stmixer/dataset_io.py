"""On-disk dataset layout: ``manifest.json`` plus raw float32 volumes.

Each case record lists its split, label code, texture, the raw file names
(``<id>_t0.raw`` may be null), dims, spacing and diameters. Volumes are
little-endian float32 in (z, y, x) row-major order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .dataprep import Texture
from .hloss import EvolutionLabel
from .synthdata import SynthDataset
from .volume import Volume3D

MANIFEST = "manifest.json"
MANIFEST_VERSION = 1


class DataError(Exception):
    pass


@dataclass
class LabeledCase:
    id: str
    split: str
    label: EvolutionLabel
    texture: Texture
    roi_t1: Volume3D
    roi_t0: Volume3D | None = None
    d_t0: float | None = None
    d_t1: float | None = None


def write_dataset(ds: SynthDataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for c in ds.cases:
        (out / f"{c.id}_t1.raw").write_bytes(c.roi_t1.to_bytes())
        if c.roi_t0 is not None:
            (out / f"{c.id}_t0.raw").write_bytes(c.roi_t0.to_bytes())
    path = out / MANIFEST
    path.write_text(json.dumps(ds.manifest(), indent=1, sort_keys=True) + "\n")
    return path


def _volume(path: Path, dims, spacing) -> Volume3D:
    if not path.is_file():
        raise DataError(f"missing volume file {path}")
    try:
        return Volume3D.from_bytes(path.read_bytes(), dims, spacing)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def load_dataset(root) -> tuple[dict, list[LabeledCase]]:
    root = Path(root)
    path = root / MANIFEST
    if not path.is_file():
        raise DataError(f"no {MANIFEST} in {root}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise DataError(f"{path}: unsupported manifest version {manifest.get('version')}")
    cases = []
    for n, rec in enumerate(manifest["cases"]):
        try:
            dims, spacing = rec["dims"], rec["spacing"]
            t0 = _volume(root / rec["roi_t0"], dims, spacing) if rec.get("roi_t0") else None
            cases.append(LabeledCase(
                rec["id"], rec["split"], EvolutionLabel(int(rec["label"])), Texture(rec["texture"]),
                _volume(root / rec["roi_t1"], dims, spacing), t0, rec.get("d_t0"), rec.get("d_t1")))
        except (KeyError, ValueError) as exc:
            raise DataError(f"{path}: case record {n}: {exc!r}") from exc
    return manifest, cases
