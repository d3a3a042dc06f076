"""Surface-bounded 2D Gaussian primitives built from a posed mesh.

Splat centers are barycentric samples of mesh faces (no learned offset);
appearance comes from a triplane query at the center position, decoded by
the attribute MLP and squashed by fixed activations. The tangent frame is
the predicted quaternion's rotation applied to the canonical (e1, e2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import triplane as tp_mod
from .morph import Mesh

COLOR_EPS = 1e-3  # saturated-sigmoid overshoot for color channels
SCALE_GAIN = 0.1  # softplus output multiplier for scales


@dataclass(eq=False)
class SurfaceSamples:
    """Frozen sample-to-face assignment; positions move with the mesh."""

    face_index: np.ndarray  # (n,) int64
    bary: np.ndarray  # (n, 3) float64, rows sum to 1

    def __len__(self) -> int:
        return self.face_index.shape[0]

    def positions(self, mesh: Mesh) -> np.ndarray:
        tri = mesh.vertices[mesh.faces[self.face_index]]  # (n, 3, 3)
        return np.einsum("nc,ncd->nd", self.bary, tri)

    def face_normals(self, mesh: Mesh) -> np.ndarray:
        tri = mesh.vertices[mesh.faces[self.face_index]]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        nrm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.maximum(nrm, 1e-20)


def sample_points(mesh: Mesh, n: int, seed: int) -> SurfaceSamples:
    """Area-weighted face choice + square-root barycentric trick."""
    assert n >= 1, "need at least one sample"
    v = mesh.vertices
    f = mesh.faces
    areas = 0.5 * np.linalg.norm(
        np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1
    )
    total = areas.sum()
    if not (total > 0):
        raise ValueError("degenerate mesh: total surface area is zero")
    rng = np.random.default_rng(seed)
    face_index = rng.choice(len(f), size=n, p=areas / total)
    r1 = rng.random(n)
    r2 = rng.random(n)
    s1 = np.sqrt(r1)
    bary = np.stack([1.0 - s1, s1 * (1.0 - r2), s1 * r2], axis=1)
    return SurfaceSamples(face_index=face_index.astype(np.int64), bary=bary)


# ---------------------------------------------------------------------------
# activations


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def activate(raw: np.ndarray):
    """Raw (n, 10) -> (opacity (n,), scales (n,2), q_unit (n,4), color (n,3)).

    Layout [opacity, s_u, s_v, q(4), color(3)]. opacity = sigmoid; scales =
    0.1 * softplus; q is l2-normalized; color uses the saturated sigmoid
    (1+2e)/(1+exp(-x)) - e with e = 0.001.
    """
    r = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    assert r.shape[1] == 10, f"raw attributes must have 10 channels, got {r.shape[1]}"
    opacity = _sigmoid(r[:, 0])
    scales = SCALE_GAIN * _softplus(r[:, 1:3])
    qn = np.linalg.norm(r[:, 3:7], axis=1)
    if np.any(qn < 1e-30):
        raise ValueError("zero raw quaternion is not normalizable")
    q = r[:, 3:7] / qn[:, None]
    color = (1.0 + 2.0 * COLOR_EPS) * _sigmoid(r[:, 7:10]) - COLOR_EPS
    return opacity, scales, q, color


def vjp_activate(raw: np.ndarray, cot_opacity, cot_scales, cot_q, cot_color) -> np.ndarray:
    """Backward of activate; cot_q is a cotangent on the unit quaternion."""
    r = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    d = np.zeros_like(r)
    s_op = _sigmoid(r[:, 0])
    d[:, 0] = np.asarray(cot_opacity) * s_op * (1.0 - s_op)
    d[:, 1:3] = np.asarray(cot_scales) * SCALE_GAIN * _sigmoid(r[:, 1:3])
    u = r[:, 3:7]
    nrm = np.linalg.norm(u, axis=1, keepdims=True)
    q = u / nrm
    cq = np.asarray(cot_q, dtype=np.float64)
    d[:, 3:7] = (cq - q * np.sum(q * cq, axis=1, keepdims=True)) / nrm
    s_c = _sigmoid(r[:, 7:10])
    d[:, 7:10] = np.asarray(cot_color) * (1.0 + 2.0 * COLOR_EPS) * s_c * (1.0 - s_c)
    return d


# ---------------------------------------------------------------------------
# quaternion frames


def quat_to_mat(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (n, 4) wxyz -> rotation matrices (n, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty((q.shape[0], 3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def vjp_quat_to_mat(q: np.ndarray, cot_m: np.ndarray) -> np.ndarray:
    """Backward of quat_to_mat for unit q (normalization handled upstream)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = cot_m
    d = np.empty_like(q)
    d[:, 0] = 2 * (
        -z * g[:, 0, 1] + y * g[:, 0, 2]
        + z * g[:, 1, 0] - x * g[:, 1, 2]
        - y * g[:, 2, 0] + x * g[:, 2, 1]
    )
    d[:, 1] = 2 * (
        y * g[:, 0, 1] + z * g[:, 0, 2]
        + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
        + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2]
    )
    d[:, 2] = 2 * (
        -2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2]
        + x * g[:, 1, 0] + z * g[:, 1, 2]
        - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2]
    )
    d[:, 3] = 2 * (
        -2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2]
        + w * g[:, 1, 0] - 2 * z * g[:, 1, 1] + y * g[:, 1, 2]
        + x * g[:, 2, 0] + y * g[:, 2, 1]
    )
    return d


def quat_multiply(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Hamilton product of (n, 4) wxyz quaternion arrays."""
    w1, x1, y1, z1 = q1[:, 0], q1[:, 1], q1[:, 2], q1[:, 3]
    w2, x2, y2, z2 = q2[:, 0], q2[:, 1], q2[:, 2], q2[:, 3]
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=1,
    )


def quat_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Unit quaternions rotating unit vectors a onto b, (n, 3) each.

    Antiparallel pairs rotate 180 degrees about an arbitrary perpendicular.
    """
    dot = np.sum(a * b, axis=1)
    cross = np.cross(a, b)
    q = np.concatenate([(1.0 + dot)[:, None], cross], axis=1)
    norms = np.linalg.norm(q, axis=1)
    ok = norms > 1e-12
    q[ok] /= norms[ok, None]
    bad = np.flatnonzero(~ok)
    for i in bad:
        # a = -b: pick any axis perpendicular to a
        ref = np.array([1.0, 0.0, 0.0]) if abs(a[i, 0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        axis = np.cross(a[i], ref)
        axis /= np.linalg.norm(axis)
        q[i] = np.concatenate([[0.0], axis])
    return q


# ---------------------------------------------------------------------------
# splat construction


@dataclass(eq=False)
class Splats:
    """Struct-of-arrays splat set in world space."""

    centers: np.ndarray  # (n, 3)
    t_u: np.ndarray  # (n, 3) unit tangent
    t_v: np.ndarray  # (n, 3) unit tangent, orthogonal to t_u
    normals: np.ndarray  # (n, 3) = t_u x t_v
    scales: np.ndarray  # (n, 2) positive
    opacity: np.ndarray  # (n,) in (0,1)
    color: np.ndarray  # (n, 3)
    quat: np.ndarray  # (n, 4) unit

    def __len__(self) -> int:
        return self.centers.shape[0]

    def validate(self) -> None:
        assert np.allclose(np.linalg.norm(self.quat, axis=1), 1.0, atol=1e-6)
        assert np.allclose(np.sum(self.t_u * self.t_v, axis=1), 0.0, atol=1e-6)
        assert np.allclose(np.linalg.norm(self.t_u, axis=1), 1.0, atol=1e-6)
        assert np.allclose(np.linalg.norm(self.t_v, axis=1), 1.0, atol=1e-6)
        assert np.all(self.scales > 0)
        assert np.all((self.opacity > 0) & (self.opacity < 1))


def build_splats(mesh: Mesh, samples: SurfaceSamples, tp: tp_mod.Triplane,
                 mlp: tp_mod.AttributeMLP) -> Splats:
    x = samples.positions(mesh)
    feats = tp_mod.query(tp, x)
    raw = tp_mod.decode_attributes(mlp, feats)
    opacity, scales, q, color = activate(raw)
    frames = quat_to_mat(q)
    return Splats(
        centers=x,
        t_u=frames[:, :, 0].copy(),
        t_v=frames[:, :, 1].copy(),
        normals=frames[:, :, 2].copy(),
        scales=scales,
        opacity=opacity,
        color=color,
        quat=q,
    )


def vjp_build_splats(mesh: Mesh, samples: SurfaceSamples, tp: tp_mod.Triplane,
                     mlp: tp_mod.AttributeMLP, cot: dict):
    """Backward of build_splats.

    cot holds cotangents for any of centers/t_u/t_v/normals/scales/opacity/
    color (missing keys mean zero). Returns (d_vertices, d_triplane_features,
    d_mlp_flat).
    """
    n = len(samples)
    x = samples.positions(mesh)
    feats = tp_mod.query(tp, x)
    raw = tp_mod.decode_attributes(mlp, feats)
    _, _, q, _ = activate(raw)

    zeros3 = np.zeros((n, 3))
    cot_m = np.empty((n, 3, 3))
    cot_m[:, :, 0] = cot.get("t_u", zeros3)
    cot_m[:, :, 1] = cot.get("t_v", zeros3)
    cot_m[:, :, 2] = cot.get("normals", zeros3)
    d_q = vjp_quat_to_mat(q, cot_m)

    d_raw = vjp_activate(
        raw,
        cot.get("opacity", np.zeros(n)),
        cot.get("scales", np.zeros((n, 2))),
        d_q,
        cot.get("color", zeros3),
    )
    d_feats, d_mlp_flat = tp_mod.vjp_decode_attributes(mlp, feats, d_raw)
    d_tp_feats, d_x = tp_mod.vjp_query(tp, x, d_feats)
    d_x = d_x + cot.get("centers", zeros3)

    d_vertices = np.zeros_like(mesh.vertices)
    idx = mesh.faces[samples.face_index]  # (n, 3)
    contrib = samples.bary[:, :, None] * d_x[:, None, :]
    np.add.at(d_vertices, idx.reshape(-1), contrib.reshape(-1, 3))
    return d_vertices, d_tp_feats, d_mlp_flat


def export_splats_ply(path, splats: Splats) -> None:
    """Debug dump: point cloud with full per-splat attributes."""
    n = len(splats)
    props = [
        "x", "y", "z", "qw", "qx", "qy", "qz", "s_u", "s_v",
        "opacity", "red_f", "green_f", "blue_f",
    ]
    lines = ["ply", "format ascii 1.0", f"element vertex {n}"]
    lines += [f"property float {p}" for p in props]
    lines.append("end_header")
    body = np.concatenate(
        [splats.centers, splats.quat, splats.scales, splats.opacity[:, None], splats.color],
        axis=1,
    )
    for row in body:
        lines.append(" ".join(f"{v:.8g}" for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
