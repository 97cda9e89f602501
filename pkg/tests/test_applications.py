import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy.spatial.transform import Rotation

from cyclematch.applications import (
    DegenerateConfigurationError,
    KeypointSet,
    estimate_rigid,
    export_features,
    keypoint_hit_rate,
    pca_colors,
    register_partial,
    registration_metrics,
    transfer_keypoints,
)
from cyclematch.encoder import id_features
from cyclematch.geometry import PointCloud, RigidTransform, apply_transform, euler_to_matrix, truncate_partial
from cyclematch.io import read_matrix, read_ply
from cyclematch.synthetic import SyntheticCategoryConfig, sample_instances

from conftest import random_cloud

seeds = st.integers(0, 2**31 - 1)


def random_rigid(rng):
    return RigidTransform(Rotation.random(random_state=rng.integers(2**31)).as_matrix(), rng.normal(size=3))


def oracle(n):
    return lambda cloud: id_features(cloud, n)


def test_estimate_rigid_identity(rng):
    x = rng.normal(size=(20, 3))
    t = estimate_rigid(x, x)
    assert_allclose(t.rotation, np.eye(3), atol=1e-12)
    assert_allclose(t.translation, 0, atol=1e-12)


@given(seeds)
def test_estimate_rigid_recovers_exact_transform(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(30, 3))
    t = random_rigid(rng)
    est = estimate_rigid(x, t.apply_points(x))
    assert np.linalg.norm(est.rotation - t.rotation) < 1e-9
    assert np.linalg.norm(est.translation - t.translation) < 1e-9


@given(seeds)
def test_estimate_rigid_agrees_with_scipy_on_noisy_pairs(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(25, 3))
    y = random_rigid(rng).apply_points(x) + rng.normal(scale=0.05, size=x.shape)
    est = estimate_rigid(x, y)
    ref, _ = Rotation.align_vectors(y - y.mean(0), x - x.mean(0))
    assert_allclose(est.rotation, ref.as_matrix(), atol=1e-8)


@given(seeds)
def test_mirrored_input_still_gives_a_rotation(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(15, 3))
    y = x * np.array([1.0, 1.0, -1.0])
    est = estimate_rigid(x, y)
    assert_allclose(np.linalg.det(est.rotation), 1.0, atol=1e-12)


def test_degenerate_inputs():
    with pytest.raises(DegenerateConfigurationError):
        estimate_rigid(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.outer(np.arange(6.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateConfigurationError):
        estimate_rigid(line, line + 1)
    with pytest.raises(DegenerateConfigurationError):
        estimate_rigid(np.random.default_rng(0).normal(size=(5, 3)), np.ones((5, 3)))


def test_register_self_is_identity(rng):
    c = random_cloud(rng, 40)
    res = register_partial(oracle(40), c, c)
    assert res.status == "ok"
    assert_allclose(res.estimated.rotation, np.eye(3), atol=1e-6)
    assert_allclose(res.estimated.translation, 0, atol=1e-6)
    assert len(res.iterations) == 3 and res.matches.shape == (40, 2)


def test_register_oracle_recovers_in_one_iteration(rng):
    c = random_cloud(rng, 60)
    t = RigidTransform(euler_to_matrix([12, -9, 14]), [0.1, -0.2, 0.05])
    res = register_partial(oracle(60), c, apply_transform(c, t), iters=1)
    assert_allclose(res.estimated.rotation, t.rotation, atol=1e-10)
    assert_allclose(res.estimated.translation, t.translation, atol=1e-10)


def test_register_partial_oracle_on_truncated_clouds(rng):
    c = random_cloud(rng, 80)
    t = RigidTransform(euler_to_matrix([-14, 5, 10]), [0.05, 0.1, -0.1])
    src = truncate_partial(c, 60, rng)
    # every retained source point still has its partner in the full target
    res = register_partial(oracle(80), src, apply_transform(c, t), iters=1)
    assert res.status == "ok"
    assert_allclose(res.estimated.rotation, t.rotation, atol=1e-10)


def test_estimate_is_composition_of_iterations(rng):
    c = random_cloud(rng, 50)
    feats = rng.normal(size=(50, 8))
    t = RigidTransform(euler_to_matrix([5, 5, 5]))
    res = register_partial(lambda cl: feats[cl.ids], c, apply_transform(c, t))
    acc = RigidTransform.identity()
    for step in res.iterations:
        acc = step.compose(acc)
    assert_allclose(acc.rotation, res.estimated.rotation)


def test_degenerate_matches_are_reported(rng):
    c = random_cloud(rng, 30)
    res = register_partial(lambda cl: np.ones((len(cl), 4)), c, c)
    assert res.status == "degenerate"
    assert res.message


def test_registration_metrics_zero_and_ten_degrees():
    gt = [RigidTransform(euler_to_matrix([3, 4, 5]), [1, 2, 3])]
    zero = registration_metrics(gt, gt)
    assert all(v == 0 for v in zero.values())
    est = [RigidTransform(euler_to_matrix([0, 0, 10]) @ gt[0].rotation, [1, 2, 3])]
    m = registration_metrics(est, gt)
    assert m["rot_mae"] == pytest.approx(10 / 3)
    assert m["rot_rmse"] == pytest.approx(np.sqrt(100 / 3))
    assert m["rot_angle_mae"] == pytest.approx(10)
    assert m["trans_mae"] == 0


@given(seeds)
def test_mae_never_exceeds_rmse(seed):
    rng = np.random.default_rng(seed)
    est = [random_rigid(rng) for _ in range(4)]
    gt = [random_rigid(rng) for _ in range(4)]
    m = registration_metrics(est, gt)
    assert m["rot_mae"] <= m["rot_rmse"] + 1e-12
    assert m["trans_mae"] <= m["trans_rmse"] + 1e-12


def test_registration_metrics_length_mismatch():
    with pytest.raises(ValueError):
        registration_metrics([RigidTransform()], [])


def test_self_transfer_gives_neighbourhood_centroid(rng):
    c = random_cloud(rng, 40)
    kp = KeypointSet(["a"], c.points[:1] + 0.01)
    pred = transfer_keypoints(oracle(40), c, kp, c)
    d = np.linalg.norm(c.points - kp.positions[0], axis=1)
    assert_allclose(pred.positions[0], c.points[np.argsort(d, kind="stable")[:5]].mean(axis=0))


def test_single_neighbour_perfect_match(rng):
    c = random_cloud(rng, 40)
    t = RigidTransform(euler_to_matrix([10, 0, 0]), [0.3, 0, 0])
    tgt = apply_transform(c, t)
    kp = KeypointSet(["a", "b"], c.points[[3, 7]])
    pred = transfer_keypoints(oracle(40), c, kp, tgt, neighbors=1)
    assert_allclose(pred.positions, tgt.points[[3, 7]])


def test_oracle_transfer_on_dense_synthetic_pairs():
    _, inst = sample_instances(SyntheticCategoryConfig(instances=6, points_per_shape=1024))
    rates = []
    for a, b in zip(inst[:3], inst[3:]):
        pred = transfer_keypoints(oracle(1024), a.cloud, KeypointSet(a.keypoint_labels, a.keypoints), b.cloud)
        rates.append(keypoint_hit_rate(pred, KeypointSet(b.keypoint_labels, b.keypoints)))
    assert np.mean(rates) >= 90


def test_hit_rate_edges():
    gt = KeypointSet(["a", "b"], np.zeros((2, 3)))
    assert keypoint_hit_rate(gt, gt) == 100
    far = KeypointSet(["a", "b"], np.full((2, 3), 0.1 / np.sqrt(3)))
    assert keypoint_hit_rate(far, gt) == 0
    with pytest.raises(ValueError):
        keypoint_hit_rate(KeypointSet(["x", "b"], np.zeros((2, 3))), gt)


@given(seeds, st.floats(0.0, 0.5), st.floats(0.0, 0.5))
def test_hit_rate_monotone_in_threshold(seed, t1, t2):
    rng = np.random.default_rng(seed)
    gt = KeypointSet(list("abcdef"), rng.normal(size=(6, 3)))
    pred = KeypointSet(list("abcdef"), gt.positions + rng.normal(scale=0.1, size=(6, 3)))
    lo, hi = sorted((t1, t2))
    assert keypoint_hit_rate(pred, gt, lo) <= keypoint_hit_rate(pred, gt, hi)


def test_keypoint_set_validation():
    with pytest.raises(ValueError):
        KeypointSet([], np.zeros((0, 3)))
    with pytest.raises(ValueError):
        KeypointSet(["a"], np.zeros((2, 3)))


def test_constant_features_give_one_colour():
    (rgb,) = pca_colors([np.ones((10, 64))])
    assert len({tuple(c) for c in rgb}) == 1


def test_joint_pca_colours_match_across_clouds(rng):
    base = rng.normal(size=(30, 16))
    a, b = pca_colors([base, base + rng.normal(scale=1e-3, size=base.shape)])
    assert np.max(np.abs(a.astype(int) - b.astype(int))) <= 2
    assert a.min() == 0 or b.min() == 0
    assert a.max() == 255 or b.max() == 255


def test_export_features_files(rng, tmp_path):
    clouds = [random_cloud(rng, 25), random_cloud(rng, 30)]
    written = export_features(lambda c: c.points @ np.ones((3, 4)) + c.ids[:, None], clouds, tmp_path, names=["a", "b"])
    assert len(written) == 2
    assert read_matrix(tmp_path / "a.features.txt").shape == (25, 4)
    cloud, colors = read_ply(tmp_path / "b.ply", return_colors=True)
    assert len(cloud) == 30 and colors.shape == (30, 3)
