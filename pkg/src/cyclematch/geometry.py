"""Point-cloud containers, sampling, distances, rigid transforms and partial truncation."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

_NORMAL_TOL = 1e-6
_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class PointCloud:
    """N points with optional unit normals and integer semantic ids."""

    points: np.ndarray
    normals: np.ndarray | None = None
    ids: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError(f"points must be an (N>=1, 3) array, got shape {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("points must be finite")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise ValueError(f"normals shape {nrm.shape} does not match points {pts.shape}")
            lengths = np.linalg.norm(nrm, axis=1)
            if np.any(np.abs(lengths - 1.0) > _NORMAL_TOL):
                raise ValueError("normals must have unit length")
            object.__setattr__(self, "normals", nrm)
        if self.ids is not None:
            ids = np.asarray(self.ids)
            if ids.shape != (pts.shape[0],):
                raise ValueError(f"ids must have length {pts.shape[0]}, got shape {ids.shape}")
            object.__setattr__(self, "ids", ids.astype(np.int64))

    def __len__(self):
        return self.points.shape[0]

    def subset(self, index) -> "PointCloud":
        index = np.asarray(index, dtype=np.int64)
        return PointCloud(
            self.points[index],
            None if self.normals is None else self.normals[index],
            None if self.ids is None else self.ids[index],
        )

    def with_points(self, points, normals=None) -> "PointCloud":
        return replace(self, points=points, normals=normals if normals is not None else self.normals)


@dataclass(frozen=True)
class AugmentConfig:
    """Uniform sampling ranges for random pose perturbations.

    Rotation angles are in degrees and drawn independently per axis.
    """

    rotation_deg: tuple[float, float] = (-15.0, 15.0)
    translation: tuple[float, float] = (-0.2, 0.2)
    scale: tuple[float, float] = (0.8, 1.25)

    def __post_init__(self):
        for name in ("rotation_deg", "translation", "scale"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range must satisfy lo <= hi, got ({lo}, {hi})")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.scale[0] <= 0:
            raise ValueError("scale range must be positive")

    @classmethod
    def none(cls) -> "AugmentConfig":
        return cls((0.0, 0.0), (0.0, 0.0), (1.0, 1.0))


def euler_to_matrix(angles_deg) -> np.ndarray:
    """Rotation matrix from XYZ Euler angles in degrees."""
    return Rotation.from_euler("xyz", angles_deg, degrees=True).as_matrix()


def matrix_to_euler(rotation) -> np.ndarray:
    return Rotation.from_matrix(rotation).as_euler("xyz", degrees=True)


@dataclass(frozen=True)
class RigidTransform:
    """x -> scale * R x + t."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if rot.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {rot.shape}")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation must have determinant +1")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def apply_points(self, pts) -> np.ndarray:
        return self.scale * np.asarray(pts) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -(rt @ self.translation) / self.scale, 1.0 / self.scale)

    def compose(self, first: "RigidTransform") -> "RigidTransform":
        """Transform equal to applying `first`, then `self`."""
        return RigidTransform(
            self.rotation @ first.rotation,
            self.scale * self.rotation @ first.translation + self.translation,
            self.scale * first.scale,
        )


def pairwise_distance_matrix(cloud) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    sq = np.sum(pts * pts, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * pts @ pts.T
    np.maximum(d2, 0.0, out=d2)
    dist = np.sqrt(d2)
    # the Gram expansion is not exactly symmetric nor exactly zero on the diagonal
    dist = 0.5 * (dist + dist.T)
    np.fill_diagonal(dist, 0.0)
    return dist


def farthest_point_sample(cloud, k: int, seed: int = 0) -> np.ndarray:
    """Greedy max-min subset of `k` indices starting at `seed`."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if not 0 <= seed < n:
        raise ValueError(f"seed must be in [0, {n}), got {seed}")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = seed
    min_d = np.sum((pts - pts[seed]) ** 2, axis=1)
    min_d[seed] = -1.0
    for i in range(1, k):
        nxt = int(np.argmax(min_d))
        chosen[i] = nxt
        d = np.sum((pts - pts[nxt]) ** 2, axis=1)
        np.minimum(min_d, d, out=min_d)
        min_d[chosen[: i + 1]] = -1.0
    return chosen


def sample_rigid_transform(rng: np.random.Generator, ranges: AugmentConfig = AugmentConfig()) -> RigidTransform:
    angles = rng.uniform(ranges.rotation_deg[0], ranges.rotation_deg[1], size=3)
    trans = rng.uniform(ranges.translation[0], ranges.translation[1], size=3)
    scale = rng.uniform(ranges.scale[0], ranges.scale[1])
    return RigidTransform(euler_to_matrix(angles), trans, scale)


def apply_transform(cloud: PointCloud, T: RigidTransform) -> PointCloud:
    normals = None
    if cloud.normals is not None:
        normals = cloud.normals @ T.rotation.T
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(T.apply_points(cloud.points), normals, cloud.ids)


def truncate_partial(cloud: PointCloud, keep: int, rng: np.random.Generator) -> PointCloud:
    """Keep the `keep` points nearest to a random anchor point (simulated occlusion)."""
    n = len(cloud)
    if not 1 <= keep <= n:
        raise ValueError(f"keep must be in [1, {n}], got {keep}")
    anchor = cloud.points[rng.integers(n)]
    d = np.sum((cloud.points - anchor) ** 2, axis=1)
    order = np.argsort(d, kind="stable")[:keep]
    return cloud.subset(np.sort(order))


def knn_indices(cloud, k: int) -> np.ndarray:
    """(N, k) table of nearest neighbours; self first, ties by lower index."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    d = pairwise_distance_matrix(pts)
    rows = np.arange(n)
    # partial selection, then order the k winners by (distance, index)
    if k < n:
        part = np.argpartition(d, k - 1, axis=1)[:, :k]
    else:
        part = np.tile(rows, (n, 1))
    dp = np.take_along_axis(d, part, axis=1)
    key = np.lexsort((part, dp), axis=1)
    order = np.take_along_axis(part, key, axis=1)
    # a tie at the k-th distance may have dropped a lower index; redo those rows exactly
    kth = np.take_along_axis(d, order[:, -1:], axis=1)
    tied = np.nonzero((d <= kth).sum(axis=1) > k)[0]
    for i in tied:
        order[i] = np.argsort(d[i], kind="stable")[:k]
    # duplicated points at distance 0 can precede self; force self into column 0
    not_first = order[:, 0] != rows
    if np.any(not_first):
        for i in np.nonzero(not_first)[0]:
            row = [i] + [j for j in np.argsort(d[i], kind="stable") if j != i][: k - 1]
            order[i] = row
    return order


def normalize_cloud(cloud: PointCloud) -> PointCloud:
    """Centre at the centroid and scale to unit bounding-sphere diameter."""
    centred = cloud.points - cloud.points.mean(axis=0)
    radius = np.max(np.linalg.norm(centred, axis=1))
    if radius == 0:
        return cloud.with_points(centred)
    return cloud.with_points(centred / (2.0 * radius))
