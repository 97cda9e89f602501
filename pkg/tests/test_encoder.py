import numpy as np
import pytest
from numpy.testing import assert_allclose

from cyclematch import autodiff as ad
from cyclematch.encoder import EncoderConfig, attention_block, encode, featurize, id_features, init_params, is_bias
from cyclematch.geometry import RigidTransform, apply_transform, euler_to_matrix

from conftest import random_cloud


@pytest.fixture(scope="module")
def params():
    return init_params(EncoderConfig())


def test_output_shape_and_unit_rows(params, rng):
    f = featurize(params, random_cloud(rng, 40))
    assert f.shape == (40, 64)
    assert_allclose(np.linalg.norm(f, axis=1), 1.0, atol=1e-10)


def test_permutation_equivariance(params, rng):
    c = random_cloud(rng, 40)
    perm = rng.permutation(40)
    assert_allclose(featurize(params, c.subset(perm)), featurize(params, c)[perm], atol=1e-12)


def test_not_rotation_invariant(params, rng):
    c = random_cloud(rng, 32)
    r = apply_transform(c, RigidTransform(euler_to_matrix([40, 10, 70])))
    assert not np.allclose(featurize(params, r), featurize(params, c))


def test_deterministic_init():
    a, b = init_params(EncoderConfig(seed=3)), init_params(EncoderConfig(seed=3))
    for k in a.tensors:
        assert a[k].data.tobytes() == b[k].data.tobytes()
    c = init_params(EncoderConfig(seed=4))
    assert not np.array_equal(a["head.W"].data, c["head.W"].data)


def test_glorot_limits_and_zero_biases(params):
    for name, t in params.items():
        if name.endswith(".W"):
            limit = np.sqrt(6.0 / sum(t.shape))
            assert np.all(np.abs(t.data) <= limit)
        elif is_bias(name):
            assert np.all(t.data == 0)
        else:
            assert np.all(t.data == 1)


def test_parameter_layout(params):
    names = set(params.tensors)
    assert {"lift.W", "stage0.mlp0.W", "stage1.mlp1.W", "stage1.attn.q.W", "stage1.attn.ln.gamma", "head.W"} <= names
    assert params["stage0.mlp0.W"].shape == (3 + 32, 32)
    assert params["stage1.mlp0.W"].shape == (3 + 64, 64)
    assert params["head.W"].shape == (128, 64)


def test_factored_first_layer_equals_grouped_concat(params, rng):
    """The first grouped layer computed on [rel, x_j] directly agrees with encode."""
    from cyclematch.geometry import knn_indices

    c = random_cloud(rng, 24)
    cfg = params.config
    nbrs = knn_indices(c, cfg.neighborhood_k)
    rel = c.points[nbrs] - c.points[:, None, :]
    x = np.maximum(np.concatenate([c.points, c.normals], 1) @ params["lift.W"].data + params["lift.b"].data, 0)
    grouped = np.concatenate([rel, x[nbrs]], axis=2)
    h = np.maximum(grouped @ params["stage0.mlp0.W"].data + params["stage0.mlp0.b"].data, 0)
    h = np.maximum(h @ params["stage0.mlp1.W"].data + params["stage0.mlp1.b"].data, 0).max(axis=1)
    with ad.no_grad():
        ref = attention_block(params, ad.Tensor(h), "stage0.attn").data
    # rerun encode up to stage 0 by truncating the config to one stage
    one = EncoderConfig(stage_widths=((32, 64),), normalize_output=False)
    p1 = init_params(one)
    for k in p1.tensors:
        if k in params.tensors and p1[k].shape == params[k].shape:
            p1.tensors[k] = params[k]
    with ad.no_grad():
        out = encode(p1, c).data
    assert_allclose(out, ref @ p1["head.W"].data + p1["head.b"].data, atol=1e-12)


def test_attention_mixes_all_rows(params, rng):
    x = ad.Tensor(rng.normal(size=(10, 64)))
    base = attention_block(params, x, "stage0.attn").data
    x2 = x.data.copy()
    x2[9] += 1.0
    moved = attention_block(params, ad.Tensor(x2), "stage0.attn").data
    assert not np.allclose(moved[0], base[0])


def test_config_validation_and_digest():
    with pytest.raises(ValueError):
        EncoderConfig(attention_heads=5)
    with pytest.raises(ValueError):
        EncoderConfig(neighborhood_k=0)
    cfg = EncoderConfig()
    assert EncoderConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.digest() != EncoderConfig(out_dim=32).digest()


def test_too_few_points_or_missing_normals(params, rng):
    with pytest.raises(ValueError):
        encode(params, random_cloud(rng, 8))
    c = random_cloud(rng, 20)
    with pytest.raises(ValueError):
        encode(params, type(c)(c.points))


def test_id_features_are_one_hot(rng):
    c = random_cloud(rng, 12)
    f = id_features(c, 20)
    assert f.shape == (12, 20)
    assert np.array_equal(f.argmax(axis=1), c.ids)
    assert np.all(f.sum(axis=1) == 1)


def test_featurize_accepts_callables(rng):
    c = random_cloud(rng, 12)
    assert np.array_equal(featurize(lambda cl: cl.points, c), c.points)
