"""Shape collections on disk: generated categories or plain folders of cloud files."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import PointCloud, farthest_point_sample
from .io import TEXT_SUFFIXES, load_cloud, read_keypoints


@dataclass
class ShapeDataset:
    clouds: list
    names: list
    keypoints: list | None = None  # per shape: (labels, positions)
    family: str | None = None

    def __len__(self):
        return len(self.clouds)

    def split(self, val_fraction: float = 0.1, seed: int = 0):
        """Seeded shape-level split into (train, val) index arrays."""
        n = len(self)
        order = np.random.default_rng([seed, 7]).permutation(n)
        n_val = max(1, int(round(val_fraction * n))) if n > 2 else 0
        return np.sort(order[n_val:]), np.sort(order[:n_val])

    def resample(self, points_per_shape: int) -> "ShapeDataset":
        """Farthest-point downsampling of every shape to a fixed size."""
        out = []
        for c in self.clouds:
            if len(c) == points_per_shape:
                out.append(c)
            elif len(c) > points_per_shape:
                out.append(c.subset(np.sort(farthest_point_sample(c, points_per_shape, 0))))
            else:
                raise ValueError(f"shape with {len(c)} points is smaller than points_per_shape={points_per_shape}")
        return ShapeDataset(out, self.names, self.keypoints, self.family)


def load_dataset(path) -> ShapeDataset:
    """Read a generated category (meta.json + shapes/) or every cloud file in a folder."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {path}")
    meta_file = path / "meta.json"
    if meta_file.exists():
        meta = json.loads(meta_file.read_text())
        files = sorted((path / "shapes").glob("*.xyz"))
        kps = []
        for f in files:
            kp = path / "keypoints" / (f.stem + ".kp")
            kps.append(read_keypoints(kp) if kp.exists() else None)
        family = meta.get("family")
    else:
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in TEXT_SUFFIXES | {".ply"})
        kps, family = None, None
    if not files:
        raise FileNotFoundError(f"no point-cloud files in {path}")
    clouds = [load_cloud(f) for f in files]
    return ShapeDataset(clouds, [f.stem for f in files], kps, family)


def from_clouds(clouds, keypoints=None, family=None) -> ShapeDataset:
    clouds = list(clouds)
    if not all(isinstance(c, PointCloud) for c in clouds):
        raise TypeError("expected PointCloud instances")
    return ShapeDataset(clouds, [f"shape_{i:04d}" for i in range(len(clouds))], keypoints, family)
