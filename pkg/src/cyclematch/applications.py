"""Downstream uses of learned features: partial registration, keypoint transfer, feature export."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import featurize
from .geometry import PointCloud, RigidTransform, apply_transform, matrix_to_euler
from .io import ensure_dir, write_matrix, write_ply


class DegenerateConfigurationError(ValueError):
    """Point pairs do not determine a rotation (too few or colinear)."""


def estimate_rigid(src_pts, tgt_pts, rank_tol: float = 1e-10) -> RigidTransform:
    """Least-squares rotation and translation taking src onto tgt (Arun's SVD method).

    The determinant correction keeps the result a proper rotation even when
    the best orthogonal fit is a reflection.
    """
    src = np.asarray(src_pts, dtype=np.float64)
    tgt = np.asarray(tgt_pts, dtype=np.float64)
    if src.shape != tgt.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"expected two (n, 3) arrays of equal shape, got {src.shape} and {tgt.shape}")
    if src.shape[0] < 3:
        raise DegenerateConfigurationError(f"need at least 3 point pairs, got {src.shape[0]}")
    mu_s, mu_t = src.mean(axis=0), tgt.mean(axis=0)
    a, b = src - mu_s, tgt - mu_t
    # a rank-1 source (colinear points) leaves the rotation about that line free
    sv_src = np.linalg.svd(a, compute_uv=False)
    sv_tgt = np.linalg.svd(b, compute_uv=False)
    for sv, which in ((sv_src, "source"), (sv_tgt, "target")):
        if sv[0] == 0 or sv[1] <= rank_tol * sv[0]:
            raise DegenerateConfigurationError(f"{which} points are colinear or coincident")
    h = a.T @ b
    u, _, vt = np.linalg.svd(h)
    v = vt.T
    d = np.sign(np.linalg.det(v @ u.T))
    d = 1.0 if d == 0 else d
    r = v @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, mu_t - r @ mu_s)


def _matches(f_src: np.ndarray, f_tgt: np.ndarray) -> np.ndarray:
    # argmax of the row softmax equals argmax of the raw scores for any tau
    return np.argmax(f_src @ f_tgt.T, axis=1)


@dataclass
class RegistrationResult:
    estimated: RigidTransform
    iterations: list = field(default_factory=list)  # per-iteration increments
    matches: np.ndarray | None = None  # (m, 2) source/target index pairs of the last iteration
    status: str = "ok"
    message: str = ""

    def cumulative(self) -> list:
        """Estimate after each iteration: increments composed in order."""
        out, acc = [], RigidTransform.identity()
        for step in self.iterations:
            acc = step.compose(acc)
            out.append(acc)
        return out


def register_partial(model, src: PointCloud, tgt: PointCloud, iters: int = 3, tau: float | None = None) -> RegistrationResult:
    """Iterated match-and-transform alignment of src onto tgt.

    Each iteration features both clouds, hard-matches every source point to
    its best target, fits a rigid transform to the pairs and moves the
    source. `tau` is accepted for symmetry with training; hard matches do not
    depend on it. Degenerate matches end the loop with status "degenerate".
    """
    if len(src) == 0 or len(tgt) == 0:
        raise ValueError("registration needs non-empty clouds")
    if iters < 1:
        raise ValueError("iters must be at least 1")
    if tau is not None and not tau > 0:
        raise ValueError("tau must be positive")
    f_tgt = featurize(model, tgt)
    current = src
    steps, pairs = [], None
    for _ in range(iters):
        m = _matches(featurize(model, current), f_tgt)
        pairs = np.stack([np.arange(len(current)), m], axis=1)
        try:
            step = estimate_rigid(current.points, tgt.points[m])
        except DegenerateConfigurationError as exc:
            result = RegistrationResult(RigidTransform.identity(), steps, pairs, "degenerate", str(exc))
            if steps:
                result.estimated = result.cumulative()[-1]
            return result
        steps.append(step)
        current = apply_transform(current, step)
    result = RegistrationResult(RigidTransform.identity(), steps, pairs)
    result.estimated = result.cumulative()[-1]
    return result


def rotation_errors(est: RigidTransform, gt: RigidTransform) -> tuple[np.ndarray, float]:
    """Per-axis XYZ Euler angles of R_est R_gt^T and the total rotation angle, degrees."""
    delta = est.rotation @ gt.rotation.T
    angle = np.degrees(np.arccos(np.clip((np.trace(delta) - 1.0) / 2.0, -1.0, 1.0)))
    return matrix_to_euler(delta), float(angle)


def registration_metrics(estimates, ground_truths) -> dict:
    """RMSE and MAE of rotation (degrees) and translation errors.

    The headline rotation numbers pool the three per-axis Euler errors; the
    `rot_angle_*` entries use the angle of the residual rotation instead.
    """
    estimates, ground_truths = list(estimates), list(ground_truths)
    if len(estimates) != len(ground_truths):
        raise ValueError("estimates and ground truths differ in length")
    if not estimates:
        raise ValueError("no registrations to score")
    eul, ang, trans = [], [], []
    for e, g in zip(estimates, ground_truths):
        axes, angle = rotation_errors(e, g)
        eul.append(axes)
        ang.append(angle)
        trans.append(e.translation - g.translation)
    eul, ang, trans = np.array(eul), np.array(ang), np.array(trans)

    def rmse(x):
        return float(np.sqrt(np.mean(np.square(x))))

    def mae(x):
        return float(np.mean(np.abs(x)))

    return {
        "rot_rmse": rmse(eul),
        "rot_mae": mae(eul),
        "trans_rmse": rmse(trans),
        "trans_mae": mae(trans),
        "rot_angle_rmse": rmse(ang),
        "rot_angle_mae": mae(ang),
    }


# ----------------------------------------------------------------------------
# keypoints


@dataclass(frozen=True)
class KeypointSet:
    labels: tuple
    positions: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        labels = tuple(str(l) for l in self.labels)
        if len(labels) == 0:
            raise ValueError("a keypoint set needs at least one keypoint")
        if len(labels) != pos.shape[0]:
            raise ValueError(f"{len(labels)} labels for {pos.shape[0]} positions")
        if not np.isfinite(pos).all():
            raise ValueError("keypoint positions must be finite")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "positions", pos)

    def __len__(self):
        return len(self.labels)

    def transformed(self, T: RigidTransform) -> "KeypointSet":
        return KeypointSet(self.labels, T.apply_points(self.positions))


def transfer_keypoints(model, src: PointCloud, src_kps: KeypointSet, tgt: PointCloud, neighbors: int = 5, tau: float | None = None) -> KeypointSet:
    """Carry keypoints from src to tgt through hard feature matches.

    Each keypoint takes its `neighbors` nearest source points, maps them to
    their matched target points and averages those positions.
    """
    if len(src) == 0 or len(tgt) == 0:
        raise ValueError("keypoint transfer needs non-empty clouds")
    if not 1 <= neighbors <= len(src):
        raise ValueError(f"neighbors must be in [1, {len(src)}], got {neighbors}")
    m = _matches(featurize(model, src), featurize(model, tgt))
    d = np.linalg.norm(src_kps.positions[:, None, :] - src.points[None, :, :], axis=2)
    near = np.argsort(d, axis=1, kind="stable")[:, :neighbors]
    return KeypointSet(src_kps.labels, tgt.points[m[near]].mean(axis=1))


def keypoint_hit_rate(pred: KeypointSet, gt: KeypointSet, threshold: float = 0.05) -> float:
    """Percentage of keypoints predicted within `threshold` of the truth."""
    if pred.labels != gt.labels:
        raise ValueError("keypoint labels differ between prediction and ground truth")
    err = np.linalg.norm(pred.positions - gt.positions, axis=1)
    return 100.0 * np.count_nonzero(err < threshold) / len(err)


# ----------------------------------------------------------------------------
# feature export


def pca_colors(feature_sets) -> list:
    """Joint PCA of several feature matrices, top three components mapped to 0..255.

    Fitting one basis for all clouds keeps colours comparable between them.
    Each component is mapped affinely with its joint min and max; a
    component without spread maps to mid grey.
    """
    feature_sets = [np.asarray(f, dtype=np.float64) for f in feature_sets]
    stacked = np.concatenate(feature_sets, axis=0)
    centred = stacked - stacked.mean(axis=0)
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    basis = np.zeros((stacked.shape[1], 3))
    keep = min(3, vt.shape[0])
    basis[:, :keep] = vt[:keep].T
    # fix each component's sign so the export is deterministic
    for c in range(keep):
        j = np.argmax(np.abs(basis[:, c]))
        if basis[j, c] < 0:
            basis[:, c] *= -1
    proj = centred @ basis
    scale = s[0] if s.size else 0.0
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    span = hi - lo
    flat = span <= 1e-12 * max(scale, 1.0)
    unit = np.where(flat, 0.5, (proj - lo) / np.where(flat, 1.0, span))
    rgb = np.rint(255.0 * unit).astype(np.uint8)
    out, start = [], 0
    for f in feature_sets:
        out.append(rgb[start : start + len(f)])
        start += len(f)
    return out


def export_features(model, clouds, out_dir, names=None) -> list:
    """Write "<name>.features.txt" (one row per point) and "<name>.ply" coloured by joint PCA."""
    if isinstance(clouds, PointCloud):
        clouds = [clouds]
    clouds = list(clouds)
    names = [f"cloud_{i:03d}" for i in range(len(clouds))] if names is None else list(names)
    if len(names) != len(clouds):
        raise ValueError("one name per cloud is required")
    out = ensure_dir(out_dir)
    feats = [featurize(model, c) for c in clouds]
    colors = pca_colors(feats)
    written = []
    for name, cloud, f, rgb in zip(names, clouds, feats, colors):
        fpath, ppath = Path(out) / f"{name}.features.txt", Path(out) / f"{name}.ply"
        write_matrix(f, fpath)
        write_ply(cloud, ppath, colors=rgb)
        written.append((fpath, ppath))
    return written
