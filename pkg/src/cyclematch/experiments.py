"""Benchmark protocols on synthetic data: registration and keypoint transfer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .applications import KeypointSet, keypoint_hit_rate, register_partial, registration_metrics, transfer_keypoints
from .geometry import AugmentConfig, RigidTransform, apply_transform, sample_rigid_transform, truncate_partial

POSE = AugmentConfig(rotation_deg=(-15.0, 15.0), translation=(-0.2, 0.2), scale=(1.0, 1.0))
# an iteration whose matches do not change re-estimates the identity, which moves
# the error only by round-off; such steps count as non-increasing
ROUNDOFF = 1e-12


def pose_error(est: RigidTransform, gt: RigidTransform, points) -> float:
    """Mean distance between the points moved by the estimate and by the truth."""
    return float(np.mean(np.linalg.norm(est.apply_points(points) - gt.apply_points(points), axis=1)))


@dataclass
class RegistrationPair:
    src: object
    tgt: object
    truth: RigidTransform  # maps src coordinates onto tgt coordinates


def make_registration_pairs(shapes, n_pairs: int, keep_fraction: float = 0.75, seed: int = 0, pose: AugmentConfig = POSE):
    """Two independent poses of one shape, each cropped to `keep_fraction` of its points."""
    rng = np.random.default_rng([seed, 5])
    shapes = list(shapes)
    out = []
    for _ in range(n_pairs):
        shape = shapes[int(rng.integers(len(shapes)))]
        keep = int(round(keep_fraction * len(shape)))
        ta, tb = sample_rigid_transform(rng, pose), sample_rigid_transform(rng, pose)
        src = truncate_partial(apply_transform(shape, ta), keep, rng)
        tgt = truncate_partial(apply_transform(shape, tb), keep, rng)
        out.append(RegistrationPair(src, tgt, tb.compose(ta.inverse())))
    return out


def registration_benchmark(model, pairs, iters: int = 3) -> dict:
    """Metrics over all pairs plus the share of pairs whose error never grows with iterations."""
    estimates, truths, monotone, traces, failed = [], [], 0, [], 0
    for pair in pairs:
        res = register_partial(model, pair.src, pair.tgt, iters)
        failed += res.status != "ok"
        estimates.append(res.estimated)
        truths.append(pair.truth)
        errs = [pose_error(RigidTransform.identity(), pair.truth, pair.src.points)]
        errs += [pose_error(t, pair.truth, pair.src.points) for t in res.cumulative()]
        traces.append(errs)
        monotone += all(b <= a + ROUNDOFF for a, b in zip(errs, errs[1:]))
    metrics = registration_metrics(estimates, truths)
    complete = [t for t in traces if len(t) == iters + 1]
    metrics.update(
        pairs=len(pairs),
        failed=failed,
        monotone_fraction=monotone / len(pairs),
        mean_error_per_iteration=np.mean(complete, axis=0).tolist() if complete else [],
    )
    return metrics


def keypoint_benchmark(model, dataset, n_pairs: int = 50, seed: int = 0, neighbors: int = 5, threshold: float = 0.05, pose: AugmentConfig = POSE, indices=None):
    """Mean hit rate of transferring keypoints between posed instances of a category.

    `indices` restricts the shapes used (for example to a held-out split).
    """
    if dataset.keypoints is None:
        raise ValueError("dataset has no keypoints")
    rng = np.random.default_rng([seed, 6])
    pool = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    if len(pool) < 2:
        raise ValueError("need at least two shapes with keypoints")
    rates = []
    for _ in range(n_pairs):
        i, j = rng.choice(pool, size=2, replace=False)
        ta, tb = sample_rigid_transform(rng, pose), sample_rigid_transform(rng, pose)
        (la, pa), (lb, pb) = dataset.keypoints[i], dataset.keypoints[j]
        src = apply_transform(dataset.clouds[i], ta)
        tgt = apply_transform(dataset.clouds[j], tb)
        pred = transfer_keypoints(model, src, KeypointSet(la, ta.apply_points(pa)), tgt, neighbors)
        rates.append(keypoint_hit_rate(pred, KeypointSet(lb, tb.apply_points(pb)), threshold))
    return float(np.mean(rates))
