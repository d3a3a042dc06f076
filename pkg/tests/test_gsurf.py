import numpy as np
import pytest
from fdtools import assert_close_grads, fd_grad, fd_grad_subset

from facesplat import gsurf, model, morph
from facesplat import triplane as tp_mod


def single_triangle_mesh():
    v = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    f = np.array([[0, 1, 2]], dtype=np.int32)
    return morph.Mesh(vertices=v, faces=f, normals=morph.vertex_normals(v, f))


# ---------------------------------------------------------------------------
# surface sampling


def test_sample_count_and_determinism(small_assets):
    p = model.FlameParams.zeros(small_assets.n_shape, small_assets.n_expr)
    mesh = morph.decode_mesh(small_assets, p)
    s1 = gsurf.sample_points(mesh, 8000, seed=3)
    s2 = gsurf.sample_points(mesh, 8000, seed=3)
    assert len(s1) == 8000
    assert np.array_equal(s1.face_index, s2.face_index)
    assert np.array_equal(s1.bary, s2.bary)
    s3 = gsurf.sample_points(mesh, 8000, seed=4)
    assert not np.array_equal(s1.bary, s3.bary)
    assert np.allclose(s1.bary.sum(axis=1), 1.0, atol=1e-12)
    assert s1.bary.min() >= 0.0


def test_sample_mean_converges_to_centroid():
    mesh = single_triangle_mesh()
    samples = gsurf.sample_points(mesh, 100_000, seed=0)
    pts = samples.positions(mesh)
    centroid = mesh.vertices.mean(axis=0)
    sem = pts.std(axis=0) / np.sqrt(len(pts))
    assert np.all(np.abs(pts.mean(axis=0) - centroid) < 3 * sem + 1e-9)


def test_sample_area_weighting():
    # second triangle has 100x the area of the first
    v = np.array(
        [[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [5.0, 0, 0], [15, 0, 0], [5, 10, 0]]
    )
    f = np.array([[0, 1, 2], [3, 4, 5]], dtype=np.int32)
    mesh = morph.Mesh(vertices=v, faces=f, normals=morph.vertex_normals(v, f))
    samples = gsurf.sample_points(mesh, 50_000, seed=1)
    frac_small = np.mean(samples.face_index == 0)
    expected = 0.5 / 50.5
    sigma = np.sqrt(expected * (1 - expected) / 50_000)
    assert abs(frac_small - expected) < 4 * sigma


def test_sample_corner_weights_hit_vertices():
    mesh = single_triangle_mesh()
    samples = gsurf.SurfaceSamples(
        face_index=np.zeros(3, dtype=np.int64), bary=np.eye(3)
    )
    assert np.allclose(samples.positions(mesh), mesh.vertices, atol=1e-15)


def test_sample_degenerate_mesh_raises():
    v = np.zeros((3, 3))
    f = np.array([[0, 1, 2]], dtype=np.int32)
    mesh = morph.Mesh(vertices=v, faces=f, normals=np.zeros((3, 3)))
    with pytest.raises(ValueError, match="area"):
        gsurf.sample_points(mesh, 10, seed=0)


def test_face_normals_unit(small_assets):
    p = model.FlameParams.zeros(small_assets.n_shape, small_assets.n_expr)
    mesh = morph.decode_mesh(small_assets, p)
    samples = gsurf.sample_points(mesh, 500, seed=2)
    n = samples.face_normals(mesh)
    assert np.allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# activations


def test_activate_reference_values():
    raw = np.zeros((1, 10))
    raw[0, 3] = 1.0  # unit quaternion raw
    opacity, scales, q, color = gsurf.activate(raw)
    assert np.isclose(opacity[0], 0.5)
    assert np.allclose(scales[0], 0.1 * np.log(2.0), atol=1e-12)
    assert np.isclose(scales[0, 0], 0.0693147, atol=1e-7)
    assert np.allclose(q[0], [1, 0, 0, 0])
    assert np.allclose(color[0], 0.5, atol=1e-12)


def test_activate_color_limits():
    raw = np.zeros((2, 10))
    raw[:, 3] = 1.0
    raw[0, 7:10] = 60.0
    raw[1, 7:10] = -60.0
    _, _, _, color = gsurf.activate(raw)
    assert np.allclose(color[0], 1.001, atol=1e-9)
    assert np.allclose(color[1], -0.001, atol=1e-9)


def test_activate_ranges(rng):
    raw = rng.standard_normal((100, 10)) * 3
    opacity, scales, q, color = gsurf.activate(raw)
    assert np.all((opacity > 0) & (opacity < 1))
    assert np.all(scales > 0)
    assert np.allclose(np.linalg.norm(q, axis=1), 1.0, atol=1e-12)
    assert np.all((color > -0.001 - 1e-12) & (color < 1.001 + 1e-12))


def test_activate_zero_quaternion_raises():
    raw = np.zeros((1, 10))
    with pytest.raises(ValueError, match="quaternion"):
        gsurf.activate(raw)


def test_vjp_activate_fd(rng):
    raw = rng.standard_normal((4, 10))
    cots = (
        rng.standard_normal(4),
        rng.standard_normal((4, 2)),
        rng.standard_normal((4, 4)),
        rng.standard_normal((4, 3)),
    )
    analytic = gsurf.vjp_activate(raw, *cots)

    def loss(r):
        opacity, scales, q, color = gsurf.activate(r.reshape(4, 10))
        return float(
            np.sum(cots[0] * opacity) + np.sum(cots[1] * scales)
            + np.sum(cots[2] * q) + np.sum(cots[3] * color)
        )

    numeric = fd_grad(loss, raw.reshape(-1)).reshape(4, 10)
    assert_close_grads(analytic, numeric, rtol=1e-5, atol=1e-9, label="activate")


# ---------------------------------------------------------------------------
# quaternion frames


def test_quat_to_mat_matches_axis_angle(rng):
    for _ in range(10):
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        angle = rng.uniform(0, np.pi)
        q = np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])[None]
        m = gsurf.quat_to_mat(q)[0]
        assert np.allclose(m, morph.rodrigues(angle * axis), atol=1e-12)


def test_quat_to_mat_orthonormal(rng):
    q = rng.standard_normal((20, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    m = gsurf.quat_to_mat(q)
    eye = np.einsum("nij,nkj->nik", m, m)
    assert np.allclose(eye, np.eye(3), atol=1e-12)
    assert np.allclose(np.linalg.det(m), 1.0, atol=1e-12)


def test_vjp_quat_to_mat_fd(rng):
    q = rng.standard_normal((3, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    cot = rng.standard_normal((3, 3, 3))
    analytic = gsurf.vjp_quat_to_mat(q, cot)

    def loss(qf):
        return float(np.sum(cot * gsurf.quat_to_mat(qf.reshape(3, 4))))

    numeric = fd_grad(loss, q.reshape(-1)).reshape(3, 4)
    assert_close_grads(analytic, numeric, rtol=1e-6, atol=1e-9, label="quat_to_mat")


# ---------------------------------------------------------------------------
# splat construction


@pytest.fixture()
def splat_setup(small_assets, rng):
    p = model.FlameParams.zeros(small_assets.n_shape, small_assets.n_expr)
    mesh = morph.decode_mesh(small_assets, p)
    # shrink slightly so every sample sits strictly inside the triplane box
    mesh.vertices = mesh.vertices * 0.9
    samples = gsurf.sample_points(mesh, 60, seed=5)
    tp = tp_mod.Triplane(features=rng.standard_normal((3, 8, 8, 4)) * 0.3)
    mlp = tp_mod.init_attribute_mlp(seed=8, in_dim=12, hidden=16)
    return mesh, samples, tp, mlp


def test_build_splats_basic(splat_setup):
    mesh, samples, tp, mlp = splat_setup
    splats = gsurf.build_splats(mesh, samples, tp, mlp)
    assert len(splats) == 60
    splats.validate()
    # centers sit on their source face planes
    tri = mesh.vertices[mesh.faces[samples.face_index]]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    resid = np.abs(np.sum((splats.centers - tri[:, 0]) * n, axis=1))
    diag = np.linalg.norm(mesh.vertices.max(0) - mesh.vertices.min(0))
    assert resid.max() <= 1e-6 * diag
    # frame normal really is t_u x t_v
    assert np.allclose(np.cross(splats.t_u, splats.t_v), splats.normals, atol=1e-12)


def test_build_splats_constant_bias_mlp(splat_setup, rng):
    mesh, samples, tp, mlp = splat_setup
    for name in ("w0", "w1", "w2"):
        getattr(mlp, name)[:] = 0.0
    mlp.b2[:] = np.array([0.3, 0.1, -0.2, 0.9, 0.1, 0.2, 0.1, 0.4, -0.4, 2.0])
    splats = gsurf.build_splats(mesh, samples, tp, mlp)
    for field in ("t_u", "t_v", "normals", "scales", "opacity", "color", "quat"):
        arr = getattr(splats, field)
        assert np.allclose(arr, arr[0], atol=1e-12), field
    assert not np.allclose(splats.centers, splats.centers[0])


def test_build_splats_deterministic(splat_setup):
    mesh, samples, tp, mlp = splat_setup
    a = gsurf.build_splats(mesh, samples, tp, mlp)
    b = gsurf.build_splats(mesh, samples, tp, mlp)
    assert np.array_equal(a.centers, b.centers)
    assert np.array_equal(a.color, b.color)


def test_vjp_build_splats_fd(splat_setup, rng):
    mesh, samples, tp, mlp = splat_setup
    n = len(samples)
    cot = {
        "centers": rng.standard_normal((n, 3)),
        "t_u": rng.standard_normal((n, 3)),
        "t_v": rng.standard_normal((n, 3)),
        "normals": rng.standard_normal((n, 3)),
        "scales": rng.standard_normal((n, 2)),
        "opacity": rng.standard_normal(n),
        "color": rng.standard_normal((n, 3)),
    }
    d_verts, d_tp, d_mlp = gsurf.vjp_build_splats(mesh, samples, tp, mlp, cot)

    def total(splats):
        return float(
            np.sum(cot["centers"] * splats.centers)
            + np.sum(cot["t_u"] * splats.t_u)
            + np.sum(cot["t_v"] * splats.t_v)
            + np.sum(cot["normals"] * splats.normals)
            + np.sum(cot["scales"] * splats.scales)
            + np.sum(cot["opacity"] * splats.opacity)
            + np.sum(cot["color"] * splats.color)
        )

    def loss_of_verts(flat):
        m = morph.Mesh(vertices=flat.reshape(-1, 3), faces=mesh.faces, normals=mesh.normals)
        return total(gsurf.build_splats(m, samples, tp, mlp))

    idx = rng.choice(mesh.vertices.size, size=90, replace=False)
    numeric = fd_grad_subset(loss_of_verts, mesh.vertices.reshape(-1), idx, step=1e-6)
    assert_close_grads(d_verts.flat[idx], numeric, rtol=1e-5, atol=1e-7, label="splat verts")

    def loss_of_tp(f):
        return total(gsurf.build_splats(mesh, samples, tp_mod.Triplane(features=f), mlp))

    idx = rng.choice(tp.features.size, size=80, replace=False)
    numeric = fd_grad_subset(loss_of_tp, tp.features, idx, step=1e-6)
    assert_close_grads(d_tp.flat[idx], numeric, rtol=1e-5, atol=1e-7, label="splat triplane")

    flat0 = mlp.flatten()

    def loss_of_mlp(w):
        return total(gsurf.build_splats(mesh, samples, tp, mlp.with_flat(w)))

    idx = rng.choice(flat0.size, size=90, replace=False)
    numeric = fd_grad_subset(loss_of_mlp, flat0, idx, step=1e-6)
    assert_close_grads(d_mlp[idx], numeric, rtol=1e-5, atol=1e-7, label="splat mlp")


def test_export_splats_ply(tmp_path, splat_setup):
    mesh, samples, tp, mlp = splat_setup
    splats = gsurf.build_splats(mesh, samples, tp, mlp)
    path = tmp_path / "splats.ply"
    gsurf.export_splats_ply(path, splats)
    text = path.read_text().splitlines()
    assert text[0] == "ply"
    assert f"element vertex {len(splats)}" in text
    header_end = text.index("end_header")
    assert len(text) == header_end + 1 + len(splats)
    first = [float(x) for x in text[header_end + 1].split()]
    assert len(first) == 13
    assert np.allclose(first[:3], splats.centers[0], atol=1e-6)
