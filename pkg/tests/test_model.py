import dataclasses

import numpy as np
import pytest

from facesplat import model


def test_synth_determinism():
    a = model.synth_model(seed=3, n_verts_target=162)
    b = model.synth_model(seed=3, n_verts_target=162)
    assert model.assets_equal(a, b)
    c = model.synth_model(seed=4, n_verts_target=162)
    assert not model.assets_equal(a, c)


def test_vertex_count_targets():
    # smallest icosphere level meeting the target
    assert model.synth_model(seed=0, n_verts_target=100).n_verts == 162
    assert model.synth_model(seed=0, n_verts_target=162).n_verts == 162
    assert model.synth_model(seed=0, n_verts_target=163).n_verts == 642
    assert model.synth_model(seed=0).n_verts == 642


def test_template_bounds(default_assets):
    t = default_assets.template
    assert np.abs(t).max() <= 1.0 + 1e-6
    assert np.isclose(np.abs(t).max(), 1.0, atol=1e-6)


def test_bases_orthonormal(default_assets):
    for basis in (default_assets.shape_basis, default_assets.expr_basis):
        g = basis.astype(np.float64).T @ basis.astype(np.float64)
        assert np.allclose(g, np.eye(basis.shape[1]), atol=1e-5)


def test_pose_basis_scale(default_assets):
    norms = np.linalg.norm(default_assets.pose_basis.astype(np.float64), axis=0)
    assert np.allclose(norms, 0.05, rtol=1e-4)


def test_row_stochastic_tensors(default_assets):
    a = default_assets
    assert np.allclose(a.joint_regressor.sum(axis=1), 1.0, atol=1e-6)
    assert np.allclose(a.skin_weights.sum(axis=1), 1.0, atol=1e-6)
    assert np.allclose(a.landmark_bary.sum(axis=1), 1.0, atol=1e-6)
    assert a.skin_weights.min() >= 0.0


def test_jaw_rig_geometry(default_assets):
    a = default_assets
    t = a.template.astype(np.float64)
    jaw = a.joint_regressor.astype(np.float64)[1] @ t
    assert jaw[1] < -0.2  # jaw joint sits in the lower part of the head
    w = a.skin_weights[:, 1]
    assert w[t[:, 1] < -0.8].min() > 0.9  # bottom follows the jaw
    assert w[t[:, 1] > 0.5].max() < 0.05  # crown stays on the root


def test_landmarks_front_facing(default_assets):
    a = default_assets
    centroids = a.template[a.faces[a.landmark_faces]].mean(axis=1)
    assert centroids[:, 2].min() > 0.3


def test_save_load_round_trip(tmp_path, default_assets):
    path = tmp_path / "assets.klrm"
    model.save_assets(default_assets, path)
    back = model.load_assets(path)
    assert model.assets_equal(default_assets, back)
    assert back.faces.dtype == np.int32
    assert back.template.dtype == np.float32


def test_load_missing_tensor(tmp_path, default_assets):
    from facesplat import tensorio

    path = tmp_path / "assets.klrm"
    model.save_assets(default_assets, path)
    tensors = tensorio.load_tensors(path)
    del tensors["skin_weights"]
    tensorio.save_tensors(path, tensors)
    with pytest.raises(model.AssetValidationError, match="skin_weights"):
        model.load_assets(path)


def test_load_non_integral_faces(tmp_path, default_assets):
    from facesplat import tensorio

    path = tmp_path / "assets.klrm"
    model.save_assets(default_assets, path)
    tensors = tensorio.load_tensors(path)
    tensors["faces"] = tensors["faces"] + 0.25
    tensorio.save_tensors(path, tensors)
    with pytest.raises(model.AssetValidationError, match="faces"):
        model.load_assets(path)


@pytest.mark.parametrize(
    "mutate, match",
    [
        (lambda a: a.faces.__setitem__((0, 0), 10**6), "faces"),
        (lambda a: a.joint_regressor.__setitem__((0, 0), 5.0), "joint_regressor"),
        (lambda a: a.skin_weights.__setitem__((0, 0), -0.5), "skin_weights"),
        (lambda a: a.landmark_bary.__setitem__((0, 0), 2.0), "landmark_bary"),
        (lambda a: a.template.__setitem__((0, 0), np.nan), "template"),
        (lambda a: a.kinematic_parents.__setitem__(1, 1), "kinematic_parents"),
    ],
)
def test_validate_rejects_corruption(default_assets, mutate, match):
    broken = dataclasses.replace(
        default_assets,
        **{f.name: getattr(default_assets, f.name).copy() for f in dataclasses.fields(default_assets)},
    )
    mutate(broken)
    with pytest.raises(model.AssetValidationError, match=match):
        model.validate_assets(broken)


def test_params_validation():
    p = model.FlameParams.zeros(8, 4)
    assert p.beta.shape == (8,)
    assert p.scale == 1.0
    with pytest.raises(ValueError, match="theta"):
        model.FlameParams(np.zeros(8), np.zeros(4), theta=np.zeros(3))
    with pytest.raises(ValueError, match="scale"):
        model.FlameParams(np.zeros(8), np.zeros(4), scale=-1.0)
    with pytest.raises(ValueError, match="non-finite"):
        model.FlameParams(np.full(8, np.nan), np.zeros(4))


def test_params_dict_round_trip():
    rng = np.random.default_rng(0)
    p = model.FlameParams(
        beta=rng.standard_normal(8),
        psi=rng.standard_normal(4),
        theta=rng.standard_normal(6) * 0.1,
        scale=1.07,
        translation=rng.standard_normal(3) * 0.02,
    )
    q = model.FlameParams.from_dict(p.to_dict())
    assert np.allclose(p.beta, q.beta)
    assert np.allclose(p.theta, q.theta)
    assert p.scale == q.scale
