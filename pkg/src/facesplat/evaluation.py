"""Geometric accuracy and cross-view consistency metrics.

Alignment is the closed-form least-squares similarity fit; surface error is
one-directional scan-to-mesh distance (exact point-to-triangle, BVH
accelerated); parameter consistency is the mean squared deviation of per-view
predictions from their mean. The neutral protocol scores shape coefficients
alone by re-decoding with expression and pose zeroed before alignment.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels as _k
from .model import FlameParams, ModelAssets
from .morph import Mesh, decode_mesh, export_ply, landmarks, vertex_normals

BVH_LEAF_SIZE = 8
FIRST_K = 10  # leading-coefficient slice reported next to the full variance

# outer eye corners in the 68-landmark convention; their distance sets the
# facial crop radius
EYE_OUTER_L = 36
EYE_OUTER_R = 45
CROP_RADIUS_SCALE = 1.2


# ---------------------------------------------------------------------------
# similarity alignment


@dataclass(eq=False)
class Similarity:
    """Rigid rotation + isotropic scale + translation, applied as s*R*x + t."""

    rotation: np.ndarray  # (3, 3) proper orthonormal
    scale: float
    translation: np.ndarray  # (3,)

    def __post_init__(self) -> None:
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.scale = float(self.scale)
        assert self.rotation.shape == (3, 3)
        assert abs(float(np.linalg.det(self.rotation)) - 1.0) < 1e-6
        assert self.scale > 0.0

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return self.scale * (pts @ self.rotation.T) + self.translation

    @staticmethod
    def identity() -> "Similarity":
        return Similarity(np.eye(3), 1.0, np.zeros(3))


def umeyama(src: np.ndarray, dst: np.ndarray) -> Similarity:
    """Least-squares similarity mapping src onto dst, closed form via SVD.

    Reflections are rejected by flipping the smallest singular direction
    whenever the unconstrained optimum would have determinant -1.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != 3 or src.shape != dst.shape:
        raise ValueError(f"expected matching (n, 3) point sets, got {src.shape} and {dst.shape}")
    n = src.shape[0]
    if n < 3:
        raise ValueError(f"need at least 3 correspondences, got {n}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv[1] <= 1e-12 * max(sv[0], 1e-30):
        raise ValueError("source points are collinear or coincident")
    cov = xd.T @ xs / n
    u, d, vt = np.linalg.svd(cov)
    flip = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0.0:
        flip[2] = -1.0
    rotation = u @ np.diag(flip) @ vt
    var_s = float(np.sum(xs * xs)) / n
    scale = float(np.sum(d * flip)) / var_s
    translation = mu_d - scale * (rotation @ mu_s)
    return Similarity(rotation=rotation, scale=scale, translation=translation)


def alignment_residual(sim: Similarity, src: np.ndarray, dst: np.ndarray) -> float:
    """Sum of squared correspondence errors under a similarity."""
    diff = sim.apply(src) - np.asarray(dst, dtype=np.float64)
    return float(np.sum(diff * diff))


# ---------------------------------------------------------------------------
# scan-to-mesh distance


@dataclass(eq=False)
class _Bvh:
    node_lo: np.ndarray
    node_hi: np.ndarray
    node_left: np.ndarray
    node_right: np.ndarray
    node_start: np.ndarray
    node_count: np.ndarray
    tri_order: np.ndarray


def _build_bvh(vertices: np.ndarray, faces: np.ndarray, leaf_size: int = BVH_LEAF_SIZE) -> _Bvh:
    """Median-split AABB tree over triangles; deterministic for fixed input."""
    m = faces.shape[0]
    assert m > 0
    tri = vertices[faces]  # (m, 3, 3)
    tri_lo = tri.min(axis=1)
    tri_hi = tri.max(axis=1)
    centroids = tri.mean(axis=1)
    order = np.arange(m, dtype=np.int64)
    lo_l: list[np.ndarray] = []
    hi_l: list[np.ndarray] = []
    left_l: list[int] = []
    right_l: list[int] = []
    start_l: list[int] = []
    count_l: list[int] = []

    def build(start: int, end: int) -> int:
        idx = len(lo_l)
        sel = order[start:end]
        lo_l.append(tri_lo[sel].min(axis=0))
        hi_l.append(tri_hi[sel].max(axis=0))
        left_l.append(-1)
        right_l.append(-1)
        start_l.append(start)
        count_l.append(end - start)
        if end - start <= leaf_size:
            return idx
        cen = centroids[sel]
        axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
        part = np.argsort(cen[:, axis], kind="stable")
        order[start:end] = sel[part]
        mid = (start + end) // 2
        left_l[idx] = build(start, mid)
        right_l[idx] = build(mid, end)
        return idx

    build(0, m)
    return _Bvh(
        node_lo=np.ascontiguousarray(np.stack(lo_l)),
        node_hi=np.ascontiguousarray(np.stack(hi_l)),
        node_left=np.array(left_l, dtype=np.int64),
        node_right=np.array(right_l, dtype=np.int64),
        node_start=np.array(start_l, dtype=np.int64),
        node_count=np.array(count_l, dtype=np.int64),
        tri_order=order,
    )


def point_mesh_distances(points: np.ndarray, mesh: Mesh) -> np.ndarray:
    """Exact unsigned distance from each query point to the nearest triangle."""
    pts = np.ascontiguousarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (n, 3) query points, got {pts.shape}")
    if pts.shape[0] == 0:
        raise ValueError("no query points")
    if mesh.faces.shape[0] == 0:
        raise ValueError("mesh has no faces")
    verts = np.ascontiguousarray(mesh.vertices, dtype=np.float64)
    faces = np.ascontiguousarray(mesh.faces, dtype=np.int64)
    bvh = _build_bvh(verts, faces)
    out = np.empty(pts.shape[0])
    _k.bvh_point_mesh_dist2(pts, verts, faces, bvh.node_lo, bvh.node_hi,
                            bvh.node_left, bvh.node_right, bvh.node_start,
                            bvh.node_count, bvh.tri_order, out)
    return np.sqrt(out)


@dataclass(eq=False)
class ChamferStats:
    mean: float
    median: float
    std: float

    def to_dict(self) -> dict:
        return {"mean": self.mean, "median": self.median, "std": self.std}


def chamfer_distances(pred_mesh: Mesh, gt_points: np.ndarray,
                      pred_landmarks: np.ndarray | None = None,
                      gt_landmarks: np.ndarray | None = None) -> np.ndarray:
    """Per-scan-point distance to the predicted mesh after landmark alignment.

    Each ground-truth point is scored by its exact distance to the nearest
    face of the predicted mesh, which is first mapped onto the scan by the
    similarity fit to the landmark pair (identity when no pair is given).
    """
    pts = np.asarray(gt_points, dtype=np.float64)
    if pts.size == 0:
        raise ValueError("empty scan")
    if (pred_landmarks is None) != (gt_landmarks is None):
        raise ValueError("landmark alignment needs both sides of the pair")
    verts = mesh_vertices = np.asarray(pred_mesh.vertices, dtype=np.float64)
    if pred_landmarks is not None:
        sim = umeyama(pred_landmarks, gt_landmarks)
        verts = sim.apply(mesh_vertices)
    aligned = Mesh(vertices=verts, faces=pred_mesh.faces, normals=pred_mesh.normals)
    return point_mesh_distances(pts, aligned)


def chamfer(pred_mesh: Mesh, gt_points: np.ndarray,
            pred_landmarks: np.ndarray | None = None,
            gt_landmarks: np.ndarray | None = None) -> ChamferStats:
    """Scan-to-mesh distance statistics after landmark similarity alignment."""
    d = chamfer_distances(pred_mesh, gt_points, pred_landmarks, gt_landmarks)
    return ChamferStats(mean=float(d.mean()), median=float(np.median(d)), std=float(d.std()))


def crop_to_face(points: np.ndarray, lmks: np.ndarray,
                 radius_scale: float = CROP_RADIUS_SCALE) -> np.ndarray:
    """Keep points within radius_scale x inter-ocular distance of the landmark centroid."""
    pts = np.asarray(points, dtype=np.float64)
    lmks = np.asarray(lmks, dtype=np.float64)
    assert lmks.shape == (68, 3)
    center = lmks.mean(axis=0)
    radius = radius_scale * float(np.linalg.norm(lmks[EYE_OUTER_L] - lmks[EYE_OUTER_R]))
    keep = np.linalg.norm(pts - center, axis=1) <= radius
    return pts[keep]


# ---------------------------------------------------------------------------
# parameter variance


@dataclass(eq=False)
class VarianceReport:
    """Cross-prediction consistency: mean squared deviation from the mean."""

    beta_full: float
    beta_first10: float
    psi_full: float
    psi_first10: float
    per_vertex: np.ndarray | None = None  # (n_verts,) when a mesh-space map was computed

    def __post_init__(self) -> None:
        for v in (self.beta_full, self.beta_first10, self.psi_full, self.psi_first10):
            assert v >= 0.0
        if self.per_vertex is not None:
            assert np.all(self.per_vertex >= 0.0)

    def to_dict(self) -> dict:
        return {
            "var_beta": {"full": self.beta_full, "first10": self.beta_first10},
            "var_psi": {"full": self.psi_full, "first10": self.psi_first10},
        }


def param_variance(preds: list[FlameParams], first_k: int | None = None) -> dict:
    """Mean squared deviation from the mean over a set of predictions.

    Returns {"beta": var, "psi": var}; first_k restricts to the leading
    coefficients (capped at the actual dimensionality).
    """
    assert len(preds) >= 1
    betas = np.stack([p.beta for p in preds]).astype(np.float64)
    psis = np.stack([p.psi for p in preds]).astype(np.float64)
    out = {}
    for name, mat in (("beta", betas), ("psi", psis)):
        if first_k is not None:
            mat = mat[:, :first_k]
        mu = mat.mean(axis=0)
        out[name] = float(np.mean(np.sum((mat - mu) ** 2, axis=1)))
    return out


def variance_report(preds: list[FlameParams]) -> VarianceReport:
    full = param_variance(preds)
    lead = param_variance(preds, first_k=FIRST_K)
    return VarianceReport(beta_full=full["beta"], beta_first10=lead["beta"],
                          psi_full=full["psi"], psi_first10=lead["psi"])


def _neutral_pose(params: FlameParams) -> FlameParams:
    """Strip the similarity nuisance and articulation; keep shape + expression."""
    return FlameParams(beta=params.beta.copy(), psi=params.psi.copy())


def per_vertex_variance(assets: ModelAssets, preds: list[FlameParams]) -> tuple[np.ndarray, Mesh]:
    """Per-vertex consistency map over predictions decoded at neutral pose.

    Every prediction is decoded with pose, translation, and scale reset,
    aligned to the first by a landmark similarity fit, then scored by the
    per-vertex mean squared deviation from the mean aligned position.
    Returns (variance (n_verts,), mean mesh).
    """
    if len(preds) < 2:
        raise ValueError(f"need at least 2 predictions, got {len(preds)}")
    meshes = [decode_mesh(assets, _neutral_pose(p)) for p in preds]
    ref_lmk = landmarks(assets, meshes[0])
    aligned = [meshes[0].vertices]
    for m in meshes[1:]:
        sim = umeyama(landmarks(assets, m), ref_lmk)
        aligned.append(sim.apply(m.vertices))
    stack = np.stack(aligned)  # (n_preds, n_verts, 3)
    mean_v = stack.mean(axis=0)
    variance = np.mean(np.sum((stack - mean_v) ** 2, axis=2), axis=0)
    mean_mesh = Mesh(vertices=mean_v, faces=assets.faces,
                     normals=vertex_normals(mean_v, assets.faces))
    return variance, mean_mesh


def _heat_colors(values: np.ndarray) -> np.ndarray:
    """Cold-to-hot colormap over [0, max]; all-cold when the field is flat."""
    v = np.asarray(values, dtype=np.float64)
    top = float(v.max())
    x = v / top if top > 0.0 else np.zeros_like(v)
    stops = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0])
    r = np.interp(x, stops, [0.0, 0.0, 1.0, 1.0])
    g = np.interp(x, stops, [0.0, 1.0, 1.0, 0.0])
    b = np.interp(x, stops, [1.0, 1.0, 0.0, 0.0])
    return np.stack([r, g, b], axis=1)


def export_variance_heatmap(path, mesh: Mesh, variance: np.ndarray) -> None:
    """Write the mean mesh with a variance-driven vertex colormap (ASCII PLY)."""
    variance = np.asarray(variance, dtype=np.float64)
    assert variance.shape == (mesh.vertices.shape[0],)
    export_ply(path, mesh.vertices, faces=mesh.faces, normals=mesh.normals,
               colors=_heat_colors(variance))


# ---------------------------------------------------------------------------
# neutral-geometry protocol


def now_protocol(pred: FlameParams, assets: ModelAssets, gt_scan_points: np.ndarray,
                 gt_landmarks: np.ndarray) -> ChamferStats:
    """Score shape coefficients only: re-decode with expression and pose zeroed.

    The neutral mesh is landmark-aligned to the scan, so global pose, scale,
    and translation of the prediction never enter the statistic.
    """
    pts = np.asarray(gt_scan_points, dtype=np.float64)
    if pts.size == 0:
        raise ValueError("empty scan")
    neutral = FlameParams(beta=pred.beta.copy(), psi=np.zeros(assets.n_expr))
    mesh = decode_mesh(assets, neutral)
    lmk = landmarks(assets, mesh)
    return chamfer(mesh, pts, lmk, np.asarray(gt_landmarks, dtype=np.float64))
