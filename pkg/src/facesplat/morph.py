"""Parametric mesh decoding: blendshapes + two-joint linear blend skinning.

Conventions:
  - theta = [global axis-angle (3), jaw axis-angle (3)].
  - The global rotation pivots at the origin; the jaw rotation pivots at the
    jaw joint regressed from the shape-only template.
  - Pose correctives are driven by vec(R_jaw - I) (row-major, 9 values);
    the global rotation drives no correctives.
  - Scale is optimized as log s; all VJPs report d/d(log s).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import FlameParams, ModelAssets


@dataclass(eq=False)
class Mesh:
    vertices: np.ndarray  # (n_verts, 3) float64
    faces: np.ndarray  # (n_faces, 3) int32
    normals: np.ndarray  # (n_verts, 3) float64, unit rows


# ---------------------------------------------------------------------------
# axis-angle


def _skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(theta: np.ndarray) -> np.ndarray:
    """Axis-angle (3,) -> rotation matrix, Taylor branch below 1e-8."""
    theta = np.asarray(theta, dtype=np.float64)
    a = np.linalg.norm(theta)
    k = _skew(theta)
    if a < 1e-8:
        A = 1.0 - a * a / 6.0
        B = 0.5 - a * a / 24.0
    else:
        A = np.sin(a) / a
        half = np.sin(a / 2.0) / a
        B = 2.0 * half * half  # (1 - cos a)/a^2 without cancellation
    return np.eye(3) + A * k + B * (k @ k)


def _ab_prime(a: float) -> tuple[float, float]:
    """Derivatives of A = sin(a)/a and B = (1-cos a)/a^2, series near 0."""
    if a < 1e-3:
        a2 = a * a
        d_a = -a / 3.0 + a * a2 / 30.0 - a * a2 * a2 / 840.0
        d_b = -a / 12.0 + a * a2 / 180.0 - a * a2 * a2 / 6720.0
        return d_a, d_b
    d_a = (a * np.cos(a) - np.sin(a)) / (a * a)
    d_b = (a * np.sin(a) - 2.0 * (1.0 - np.cos(a))) / (a * a * a)
    return d_a, d_b


def vjp_rodrigues(theta: np.ndarray, cot_r: np.ndarray) -> np.ndarray:
    """Gradient of <cot_r, rodrigues(theta)> with respect to theta."""
    theta = np.asarray(theta, dtype=np.float64)
    a = float(np.linalg.norm(theta))
    k = _skew(theta)
    k2 = k @ k
    if a < 1e-8:
        A = 1.0 - a * a / 6.0
        B = 0.5 - a * a / 24.0
    else:
        A = np.sin(a) / a
        half = np.sin(a / 2.0) / a
        B = 2.0 * half * half
    g = np.asarray(cot_r, dtype=np.float64)
    d_k = A * g + B * (g @ k.T + k.T @ g)
    grad = np.array(
        [d_k[2, 1] - d_k[1, 2], d_k[0, 2] - d_k[2, 0], d_k[1, 0] - d_k[0, 1]]
    )
    if a > 1e-12:
        d_a = float(np.sum(g * k))
        d_b = float(np.sum(g * k2))
        pa, pb = _ab_prime(a)
        grad += (d_a * pa + d_b * pb) * (theta / a)
    return grad


# ---------------------------------------------------------------------------
# vertex normals


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals; zero-area fans get (0,0,1)."""
    v = np.asarray(vertices, dtype=np.float64)
    f = faces
    e1 = v[f[:, 1]] - v[f[:, 0]]
    e2 = v[f[:, 2]] - v[f[:, 0]]
    fn = np.cross(e1, e2)
    acc = np.zeros_like(v)
    for c in range(3):
        np.add.at(acc, f[:, c], fn)
    nrm = np.linalg.norm(acc, axis=1)
    out = np.zeros_like(acc)
    ok = nrm > 1e-20
    out[ok] = acc[ok] / nrm[ok, None]
    out[~ok] = (0.0, 0.0, 1.0)
    return out


def vjp_vertex_normals(vertices: np.ndarray, faces: np.ndarray, cot_normals: np.ndarray) -> np.ndarray:
    """Push a cotangent on unit vertex normals back to vertex positions."""
    v = np.asarray(vertices, dtype=np.float64)
    f = faces
    e1 = v[f[:, 1]] - v[f[:, 0]]
    e2 = v[f[:, 2]] - v[f[:, 0]]
    fn = np.cross(e1, e2)
    acc = np.zeros_like(v)
    for c in range(3):
        np.add.at(acc, f[:, c], fn)
    nrm = np.linalg.norm(acc, axis=1)
    ok = nrm > 1e-20
    n_unit = np.zeros_like(acc)
    n_unit[ok] = acc[ok] / nrm[ok, None]

    g = np.asarray(cot_normals, dtype=np.float64)
    d_acc = np.zeros_like(acc)
    proj = np.sum(n_unit[ok] * g[ok], axis=1, keepdims=True)
    d_acc[ok] = (g[ok] - n_unit[ok] * proj) / nrm[ok, None]

    d_fn = d_acc[f[:, 0]] + d_acc[f[:, 1]] + d_acc[f[:, 2]]
    d_e1 = np.cross(e2, d_fn)
    d_e2 = np.cross(d_fn, e1)
    d_v = np.zeros_like(v)
    np.add.at(d_v, f[:, 1], d_e1)
    np.add.at(d_v, f[:, 2], d_e2)
    np.add.at(d_v, f[:, 0], -d_e1 - d_e2)
    return d_v


# ---------------------------------------------------------------------------
# decoding


def _bases_f64(assets: ModelAssets):
    return (
        assets.template.astype(np.float64),
        assets.shape_basis.astype(np.float64),
        assets.expr_basis.astype(np.float64),
        assets.pose_basis.astype(np.float64),
        assets.joint_regressor.astype(np.float64),
        assets.skin_weights.astype(np.float64),
    )


def shaped_template(assets: ModelAssets, beta: np.ndarray, psi: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Template + shape/expression/pose-corrective offsets, (n_verts, 3)."""
    tmpl, B, E, P, _, _ = _bases_f64(assets)
    beta = np.asarray(beta, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if beta.shape != (assets.n_shape,) or psi.shape != (assets.n_expr,):
        raise ValueError(
            f"parameter dims (beta {beta.shape}, psi {psi.shape}) do not match "
            f"bases ({assets.n_shape}, {assets.n_expr})"
        )
    r_jaw = rodrigues(theta[3:6])
    feat = (r_jaw - np.eye(3)).reshape(9)
    offsets = B @ beta + E @ psi + P @ feat
    return tmpl + offsets.reshape(-1, 3)


def decode_mesh(assets: ModelAssets, params: FlameParams) -> Mesh:
    verts = _decode_vertices(assets, params)
    return Mesh(vertices=verts, faces=assets.faces, normals=vertex_normals(verts, assets.faces))


def _decode_vertices(assets: ModelAssets, params: FlameParams) -> np.ndarray:
    tmpl, B, E, P, jreg, skin = _bases_f64(assets)
    r_g = rodrigues(params.theta[:3])
    r_j = rodrigues(params.theta[3:6])
    feat = (r_j - np.eye(3)).reshape(9)
    v_s = tmpl + (B @ params.beta + E @ params.psi + P @ feat).reshape(-1, 3)
    shaped_for_joints = tmpl + (B @ params.beta).reshape(-1, 3)
    j_jaw = jreg[1] @ shaped_for_joints
    w = skin[:, 1:2]
    v_mid = (1.0 - w) * v_s + w * ((v_s - j_jaw) @ r_j.T + j_jaw)
    return params.scale * (v_mid @ r_g.T) + params.translation


def vjp_decode_mesh(assets: ModelAssets, params: FlameParams, cotangent: np.ndarray) -> dict:
    """Exact reverse-mode gradient of decode_mesh vertices.

    Returns {"beta", "psi", "theta", "log_scale", "translation"}; the scale
    entry is the gradient with respect to log s.
    """
    tmpl, B, E, P, jreg, skin = _bases_f64(assets)
    cot = np.asarray(cotangent, dtype=np.float64)
    r_g = rodrigues(params.theta[:3])
    r_j = rodrigues(params.theta[3:6])
    feat = (r_j - np.eye(3)).reshape(9)
    v_s = tmpl + (B @ params.beta + E @ params.psi + P @ feat).reshape(-1, 3)
    shaped_for_joints = tmpl + (B @ params.beta).reshape(-1, 3)
    j_jaw = jreg[1] @ shaped_for_joints
    w = skin[:, 1:2]
    v_mid = (1.0 - w) * v_s + w * ((v_s - j_jaw) @ r_j.T + j_jaw)

    s = params.scale
    posed = v_mid @ r_g.T

    d_translation = cot.sum(axis=0)
    d_log_scale = s * float(np.sum(cot * posed))
    d_posed = s * cot
    d_r_g = d_posed.T @ v_mid
    d_v_mid = d_posed @ r_g

    d_v_s = (1.0 - w) * d_v_mid + w * (d_v_mid @ r_j)
    wd = w * d_v_mid
    d_r_j = wd.T @ (v_s - j_jaw)
    d_j_jaw = (wd * 1.0).sum(axis=0) - (wd @ r_j).sum(axis=0)

    # jaw joint depends on the shape blendshapes only
    d_shaped_for_joints = np.outer(jreg[1], d_j_jaw)
    d_beta = B.T @ (d_v_s.reshape(-1) + d_shaped_for_joints.reshape(-1))
    d_psi = E.T @ d_v_s.reshape(-1)
    d_feat = P.T @ d_v_s.reshape(-1)
    d_r_j += d_feat.reshape(3, 3)

    d_theta = np.empty(6)
    d_theta[:3] = vjp_rodrigues(params.theta[:3], d_r_g)
    d_theta[3:] = vjp_rodrigues(params.theta[3:6], d_r_j)
    return {
        "beta": d_beta,
        "psi": d_psi,
        "theta": d_theta,
        "log_scale": d_log_scale,
        "translation": d_translation,
    }


# ---------------------------------------------------------------------------
# landmarks


def landmarks(assets: ModelAssets, mesh: Mesh) -> np.ndarray:
    """Barycentric landmark positions, (68, 3)."""
    tri = mesh.vertices[assets.faces[assets.landmark_faces]]  # (68, 3, 3)
    bary = assets.landmark_bary.astype(np.float64)
    return np.einsum("lc,lcd->ld", bary, tri)


def vjp_landmarks(assets: ModelAssets, n_verts: int, cotangent: np.ndarray) -> np.ndarray:
    """Scatter a (68, 3) landmark cotangent back to the vertices."""
    bary = assets.landmark_bary.astype(np.float64)
    cot = np.asarray(cotangent, dtype=np.float64)
    d_v = np.zeros((n_verts, 3))
    idx = assets.faces[assets.landmark_faces]  # (68, 3)
    contrib = bary[:, :, None] * cot[:, None, :]  # (68, 3, 3)
    np.add.at(d_v, idx.reshape(-1), contrib.reshape(-1, 3))
    return d_v


# ---------------------------------------------------------------------------
# PLY export


def export_ply(path, vertices: np.ndarray, faces: np.ndarray | None = None,
               normals: np.ndarray | None = None, colors: np.ndarray | None = None) -> None:
    """ASCII PLY writer. colors are float [0,1] RGB, stored as uchar."""
    v = np.asarray(vertices, dtype=np.float64)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(v)}"]
    lines += ["property float x", "property float y", "property float z"]
    if normals is not None:
        lines += ["property float nx", "property float ny", "property float nz"]
    if colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    if faces is not None:
        lines += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    cols = [v]
    if normals is not None:
        cols.append(np.asarray(normals, dtype=np.float64))
    body = np.concatenate(cols, axis=1)
    for i, row in enumerate(body):
        text = " ".join(f"{x:.8g}" for x in row)
        if colors is not None:
            rgb = np.clip(np.rint(np.asarray(colors[i]) * 255), 0, 255).astype(int)
            text += " " + " ".join(str(c) for c in rgb)
        lines.append(text)
    if faces is not None:
        for f in np.asarray(faces):
            lines.append("3 " + " ".join(str(int(i)) for i in f))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
