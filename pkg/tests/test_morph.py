import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facesplat import model, morph


def quat_rotation(theta):
    """Independent axis-angle -> matrix oracle via unit quaternions."""
    theta = np.asarray(theta, dtype=np.float64)
    a = np.linalg.norm(theta)
    if a == 0.0:
        return np.eye(3)
    axis = theta / a
    w = np.cos(a / 2.0)
    x, y, z = np.sin(a / 2.0) * axis
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


# ---------------------------------------------------------------------------
# rodrigues


def test_rodrigues_known_rotations():
    r = morph.rodrigues(np.array([np.pi / 2, 0, 0]))
    assert np.allclose(r, [[1, 0, 0], [0, 0, -1], [0, 1, 0]], atol=1e-14)
    r = morph.rodrigues(np.array([0, 0, np.pi]))
    assert np.allclose(r, np.diag([-1.0, -1.0, 1.0]), atol=1e-12)
    assert np.allclose(morph.rodrigues(np.zeros(3)), np.eye(3))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rodrigues_matches_quaternion_oracle(seed):
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal(3) * rng.choice([1e-6, 1e-3, 0.3, 2.0])
    r = morph.rodrigues(theta)
    assert np.allclose(r, quat_rotation(theta), atol=1e-12)
    assert np.allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(r), 1.0, atol=1e-12)


def test_rodrigues_small_angle_branches():
    # both sides of the series cutoff agree with the oracle
    for mag in (0.9e-8, 1.1e-8, 1e-10):
        theta = np.array([mag, 0.5 * mag, -0.3 * mag])
        r = morph.rodrigues(theta)
        assert np.allclose(r, quat_rotation(theta), atol=1e-16)


def fd_grad(f, x, step):
    g = np.zeros_like(x, dtype=np.float64)
    for i in range(x.size):
        xp = x.copy()
        xp.flat[i] += step
        xm = x.copy()
        xm.flat[i] -= step
        g.flat[i] = (f(xp) - f(xm)) / (2 * step)
    return g


@pytest.mark.parametrize("scale", [2.0, 0.3, 5e-3, 1e-4])
def test_vjp_rodrigues_fd(scale):
    rng = np.random.default_rng(42)
    for _ in range(5):
        theta = rng.standard_normal(3) * scale
        cot = rng.standard_normal((3, 3))
        analytic = morph.vjp_rodrigues(theta, cot)
        numeric = fd_grad(lambda t: float(np.sum(cot * morph.rodrigues(t))), theta, 1e-6)
        assert np.allclose(analytic, numeric, rtol=1e-5, atol=1e-9)


def test_vjp_rodrigues_at_zero():
    cot = np.arange(9.0).reshape(3, 3)
    g = morph.vjp_rodrigues(np.zeros(3), cot)
    # at the identity the directional derivative is d/dt <cot, I + t*skew(e)>
    expected = np.array([cot[2, 1] - cot[1, 2], cot[0, 2] - cot[2, 0], cot[1, 0] - cot[0, 1]])
    assert np.allclose(g, expected, atol=1e-12)


# ---------------------------------------------------------------------------
# shaped template / decode oracle


def decode_oracle(assets, params):
    """Per-vertex loop mirroring the documented decode, column convention."""
    tmpl = assets.template.astype(np.float64)
    B = assets.shape_basis.astype(np.float64)
    E = assets.expr_basis.astype(np.float64)
    P = assets.pose_basis.astype(np.float64)
    r_g = quat_rotation(params.theta[:3])
    r_j = quat_rotation(params.theta[3:6])
    feat = (r_j - np.eye(3)).reshape(9)
    offs = B @ params.beta + E @ params.psi + P @ feat
    jaw = assets.joint_regressor.astype(np.float64)[1] @ (
        tmpl + (B @ params.beta).reshape(-1, 3)
    )
    out = np.empty_like(tmpl)
    for i in range(tmpl.shape[0]):
        v = tmpl[i] + offs[3 * i : 3 * i + 3]
        w = float(assets.skin_weights[i, 1])
        posed = (1 - w) * v + w * (r_j @ (v - jaw) + jaw)
        out[i] = params.scale * (r_g @ posed) + params.translation
    return out


def make_params(rng, assets):
    return model.FlameParams(
        beta=rng.standard_normal(assets.n_shape) * 0.5,
        psi=rng.standard_normal(assets.n_expr) * 0.5,
        theta=np.concatenate([rng.standard_normal(3) * 0.3, rng.standard_normal(3) * 0.15]),
        scale=float(np.exp(rng.standard_normal() * 0.1)),
        translation=rng.standard_normal(3) * 0.05,
    )


def test_decode_identity_is_template(small_assets):
    p = model.FlameParams.zeros(small_assets.n_shape, small_assets.n_expr)
    mesh = morph.decode_mesh(small_assets, p)
    assert np.allclose(mesh.vertices, small_assets.template.astype(np.float64), atol=1e-12)


def test_decode_matches_oracle(small_assets, rng):
    for _ in range(3):
        p = make_params(rng, small_assets)
        mesh = morph.decode_mesh(small_assets, p)
        assert np.allclose(mesh.vertices, decode_oracle(small_assets, p), atol=1e-10)


def test_shaped_template_matches_offsets(small_assets, rng):
    beta = rng.standard_normal(small_assets.n_shape)
    psi = rng.standard_normal(small_assets.n_expr)
    theta = np.concatenate([np.zeros(3), rng.standard_normal(3) * 0.2])
    v = morph.shaped_template(small_assets, beta, psi, theta)
    r_j = quat_rotation(theta[3:])
    offs = (
        small_assets.shape_basis.astype(np.float64) @ beta
        + small_assets.expr_basis.astype(np.float64) @ psi
        + small_assets.pose_basis.astype(np.float64) @ (r_j - np.eye(3)).reshape(9)
    )
    expected = small_assets.template.astype(np.float64) + offs.reshape(-1, 3)
    assert np.allclose(v, expected, atol=1e-12)


def test_shaped_template_rejects_bad_dims(small_assets):
    with pytest.raises(ValueError, match="parameter dims"):
        morph.shaped_template(small_assets, np.zeros(3), np.zeros(small_assets.n_expr), np.zeros(6))


def test_global_rotation_pivots_at_origin(small_assets):
    """Global pose must not translate a vertex sitting at the origin."""
    p0 = model.FlameParams.zeros(small_assets.n_shape, small_assets.n_expr)
    base = morph.decode_mesh(small_assets, p0).vertices
    p1 = p0.copy()
    p1.theta = np.array([0.0, 0.7, 0.0, 0.0, 0.0, 0.0])
    rot = morph.decode_mesh(small_assets, p1).vertices
    r_g = quat_rotation(p1.theta[:3])
    assert np.allclose(rot, base @ r_g.T, atol=1e-12)


# ---------------------------------------------------------------------------
# decode VJP


def test_vjp_decode_mesh_fd(small_assets, rng):
    p = make_params(rng, small_assets)
    cot = rng.standard_normal((small_assets.n_verts, 3))

    def loss(q):
        return float(np.sum(cot * morph.decode_mesh(small_assets, q).vertices))

    g = morph.vjp_decode_mesh(small_assets, p, cot)
    step = 1e-6

    for name in ("beta", "psi", "theta", "translation"):
        arr = getattr(p, name)
        numeric = np.zeros_like(arr)
        for i in range(arr.size):
            q = p.copy()
            getattr(q, name)[i] += step
            up = loss(q)
            getattr(q, name)[i] -= 2 * step
            dn = loss(q)
            numeric[i] = (up - dn) / (2 * step)
        assert np.allclose(g[name], numeric, rtol=1e-5, atol=1e-7), name

    q = p.copy()
    q.scale = p.scale * np.exp(step)
    up = loss(q)
    q.scale = p.scale * np.exp(-step)
    dn = loss(q)
    assert np.isclose(g["log_scale"], (up - dn) / (2 * step), rtol=1e-6)


def test_vjp_decode_mesh_at_zero_pose(small_assets, rng):
    p = model.FlameParams.zeros(small_assets.n_shape, small_assets.n_expr)
    cot = rng.standard_normal((small_assets.n_verts, 3))
    g = morph.vjp_decode_mesh(small_assets, p, cot)
    # linear paths have exact closed forms at the identity pose
    assert np.allclose(g["beta"], small_assets.shape_basis.astype(np.float64).T @ cot.reshape(-1) , atol=1e-9)
    assert np.allclose(g["psi"], small_assets.expr_basis.astype(np.float64).T @ cot.reshape(-1), atol=1e-9)
    assert np.allclose(g["translation"], cot.sum(axis=0), atol=1e-12)


# ---------------------------------------------------------------------------
# vertex normals


def test_normals_single_triangle():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    f = np.array([[0, 1, 2]], dtype=np.int32)
    n = morph.vertex_normals(v, f)
    assert np.allclose(n, [[0, 0, 1]] * 3)


def test_normals_unreferenced_vertex_fallback():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]])
    f = np.array([[0, 1, 2]], dtype=np.int32)
    n = morph.vertex_normals(v, f)
    assert np.allclose(n[3], [0, 0, 1])


def test_normals_icosphere_radial(default_assets):
    v = default_assets.template.astype(np.float64)
    n = morph.vertex_normals(v, default_assets.faces)
    assert np.allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-12)
    # ellipsoid normals stay within ~25 degrees of the radial direction
    radial = v / np.linalg.norm(v, axis=1, keepdims=True)
    cos = np.sum(n * radial, axis=1)
    assert cos.min() > 0.9


def test_normals_area_weighting():
    # two coplanar triangles, one 100x larger: normal is their plane normal
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [-10, 0, 0], [0, -10, 0]])
    f = np.array([[0, 1, 2], [0, 3, 4]], dtype=np.int32)
    n = morph.vertex_normals(v, f)
    assert np.allclose(n[0], [0, 0, 1])


def test_vjp_vertex_normals_fd(rng):
    v = rng.standard_normal((8, 3))
    hull_faces = []
    # small random fan, includes shared vertices
    for i in range(6):
        hull_faces.append([i, (i + 1) % 8, (i + 3) % 8])
    f = np.array(hull_faces, dtype=np.int32)
    cot = rng.standard_normal((8, 3))
    analytic = morph.vjp_vertex_normals(v, f, cot)

    def loss(x):
        return float(np.sum(cot * morph.vertex_normals(x, f)))

    numeric = fd_grad(loss, v, 1e-6)
    assert np.allclose(analytic, numeric, rtol=1e-5, atol=1e-8)


# ---------------------------------------------------------------------------
# landmarks


def test_landmarks_oracle(small_assets, rng):
    p = make_params(rng, small_assets)
    mesh = morph.decode_mesh(small_assets, p)
    lms = morph.landmarks(small_assets, mesh)
    assert lms.shape == (68, 3)
    for l in range(68):
        tri = mesh.vertices[small_assets.faces[small_assets.landmark_faces[l]]]
        expected = small_assets.landmark_bary[l].astype(np.float64) @ tri
        assert np.allclose(lms[l], expected, atol=1e-12)


def test_vjp_landmarks_adjoint(small_assets, rng):
    """<cot, L(v)> == <vjp(cot), v> for the linear landmark map."""
    n = small_assets.n_verts
    v = rng.standard_normal((n, 3))
    mesh = morph.Mesh(vertices=v, faces=small_assets.faces, normals=np.zeros((n, 3)))
    cot = rng.standard_normal((68, 3))
    lhs = float(np.sum(cot * morph.landmarks(small_assets, mesh)))
    rhs = float(np.sum(morph.vjp_landmarks(small_assets, n, cot) * v))
    assert np.isclose(lhs, rhs, rtol=1e-12)


# ---------------------------------------------------------------------------
# PLY export


def test_export_ply(tmp_path, small_assets):
    p = model.FlameParams.zeros(small_assets.n_shape, small_assets.n_expr)
    mesh = morph.decode_mesh(small_assets, p)
    path = tmp_path / "head.ply"
    colors = np.clip(mesh.vertices * 0.5 + 0.5, 0, 1)
    morph.export_ply(path, mesh.vertices, mesh.faces, mesh.normals, colors)
    text = path.read_text().splitlines()
    assert text[0] == "ply"
    assert f"element vertex {small_assets.n_verts}" in text
    assert f"element face {small_assets.n_faces}" in text
    header_end = text.index("end_header")
    first = text[header_end + 1].split()
    assert len(first) == 9  # xyz + normal + rgb
    assert np.allclose([float(x) for x in first[:3]], mesh.vertices[0], atol=1e-6)
    face_line = text[header_end + 1 + small_assets.n_verts].split()
    assert face_line[0] == "3"
