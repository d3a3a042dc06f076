"""Differentiable 2D-Gaussian splat renderer.

Camera convention: OpenCV-style. x_cam = R @ x_world + t, the camera looks
down +z_cam, and a pixel (col, row) has center (col + 0.5, row + 0.5) with
projection u = fx*x/z + cx, v = fy*y/z + cy. Image y therefore grows
downward; look_at produces a frame whose image-up matches world-up.

The renderer casts a ray through each pixel center, intersects candidate
splat planes, weights by the splat-local Gaussian with a 0.3 px screen-space
low-pass floor, and composites front-to-back in center-depth order (ties by
splat index). Depth and normal maps are alpha-normalized; the normal map
lives in the camera frame with each splat's normal pre-flipped to face the
camera.

Candidate lists use 16 px tiles with a conservative 6-sigma projected-radius
cull (contributions beyond it are below exp(-18), far under gradient-test
tolerances).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .gsurf import Splats, vjp_quat_to_mat

TILE_SIZE = 16
CULL_SIGMA = 6.0
CULL_MARGIN_PX = 3.0


@dataclass(eq=False)
class Camera:
    rotation: np.ndarray  # (3,3) world-to-camera
    translation: np.ndarray  # (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        assert self.fx > 0 and self.fy > 0, "focal lengths must be positive"
        assert np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-6), (
            "camera rotation must be orthonormal"
        )

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def project(self, points_world: np.ndarray):
        """Returns ((n,2) pixel coords, (n,) camera-space depth)."""
        pc = self.to_camera(points_world)
        z = pc[:, 2]
        safe_z = np.where(np.abs(z) < 1e-12, 1e-12, z)
        u = self.fx * pc[:, 0] / safe_z + self.cx
        v = self.fy * pc[:, 1] / safe_z + self.cy
        return np.stack([u, v], axis=1), z

    def to_dict(self) -> dict:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return {
            "world_to_camera": m.reshape(-1).tolist(),
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @staticmethod
    def from_dict(d: dict) -> "Camera":
        m = np.array(d["world_to_camera"], dtype=np.float64).reshape(4, 4)
        return Camera(
            rotation=m[:3, :3], translation=m[:3, 3],
            fx=float(d["fx"]), fy=float(d["fy"]),
            cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
        )


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera (R, t) with +z_cam pointing from eye toward target."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z = target - eye
    nz = np.linalg.norm(z)
    assert nz > 1e-12, "eye and target coincide"
    z = z / nz
    x = np.cross(z, up)
    nx = np.linalg.norm(x)
    assert nx > 1e-12, "up is parallel to the viewing direction"
    x = x / nx
    y = np.cross(z, x)
    r = np.stack([x, y, z], axis=0)
    return r, -r @ eye


def camera_from_alpha(alpha: float, width: int, height: int,
                      rotation: np.ndarray, translation: np.ndarray) -> Camera:
    """Intrinsics from the normalized focal alpha: fx = fy = alpha * width."""
    f = alpha * width
    return Camera(rotation=rotation, translation=translation,
                  fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
                  width=width, height=height)


def fov_degrees(alpha: float) -> float:
    """Horizontal field of view implied by fx = alpha * width."""
    return math.degrees(2.0 * math.atan(1.0 / (2.0 * alpha)))


@dataclass(eq=False)
class RenderOutputs:
    color: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W) in [0, 1]
    depth: np.ndarray  # (H, W) alpha-normalized camera z, 0 where A ~ 0
    normal: np.ndarray  # (H, W, 3) alpha-normalized camera-frame normal


def _camera_frame_splats(splats: Splats, camera: Camera):
    """Transform splat geometry to the camera frame and pre-flip normals."""
    r = camera.rotation
    mu = splats.centers @ r.T + camera.translation
    a_u = splats.t_u @ r.T
    a_v = splats.t_v @ r.T
    n0 = splats.normals @ r.T
    flip = np.where(np.sum(n0 * mu, axis=1) < 0.0, 1.0, -1.0)
    nrm = n0 * flip[:, None]
    return mu, nrm, a_u, a_v, flip


def _concat_ranges(starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Concatenation of arange(s, s + c) for each (s, c) pair, vectorized."""
    total = int(counts.sum())
    reps = np.repeat(starts, counts)
    inc = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    return reps + inc


def _bin_splats(mu: np.ndarray, scales: np.ndarray, camera: Camera):
    """Depth-sort, project, cull, and build per-tile CSR candidate lists.

    Returns (tile_offsets, tile_entries, proj, valid_mask, tiles_x).
    Entries within a tile are in ascending center depth (ties by index).
    """
    w, h = camera.width, camera.height
    tiles_x = (w + TILE_SIZE - 1) // TILE_SIZE
    tiles_y = (h + TILE_SIZE - 1) // TILE_SIZE
    n_tiles = tiles_x * tiles_y

    z = mu[:, 2]
    valid = z > _kernels.MIN_DEPTH
    idx = np.flatnonzero(valid)
    proj = np.zeros((mu.shape[0], 2))
    if idx.size == 0:
        return (np.zeros(n_tiles + 1, dtype=np.int64),
                np.zeros(0, dtype=np.int64), proj, valid, tiles_x)

    order = idx[np.argsort(z[idx], kind="stable")]
    zo = z[order]
    proj[:, 0] = np.where(valid, camera.fx * mu[:, 0] / np.where(valid, z, 1.0) + camera.cx, 0.0)
    proj[:, 1] = np.where(valid, camera.fy * mu[:, 1] / np.where(valid, z, 1.0) + camera.cy, 0.0)

    rho = CULL_SIGMA * scales.max(axis=1)[order]
    denom = zo - rho
    safe = denom > _kernels.MIN_DEPTH
    r_px = np.full(order.size, np.inf)
    mx = np.abs(mu[order, 0])
    my = np.abs(mu[order, 1])
    r_safe = np.maximum(
        camera.fx * rho[safe] * (zo[safe] + mx[safe]),
        camera.fy * rho[safe] * (zo[safe] + my[safe]),
    ) / (denom[safe] * zo[safe]) + CULL_MARGIN_PX
    r_px[safe] = r_safe

    pu = proj[order, 0]
    pv = proj[order, 1]
    tx0 = np.clip(np.floor((pu - r_px) / TILE_SIZE), 0, tiles_x - 1).astype(np.int64)
    tx1 = np.clip(np.floor((pu + r_px) / TILE_SIZE), 0, tiles_x - 1).astype(np.int64)
    ty0 = np.clip(np.floor((pv - r_px) / TILE_SIZE), 0, tiles_y - 1).astype(np.int64)
    ty1 = np.clip(np.floor((pv + r_px) / TILE_SIZE), 0, tiles_y - 1).astype(np.int64)
    # splats fully off-screen still get clamped into a border tile; the
    # cull radius keeps their contribution below exp(-18) there
    off = ((pu + r_px < 0) | (pu - r_px > w) | (pv + r_px < 0) | (pv - r_px > h))
    keep = ~off
    order = order[keep]
    tx0, tx1, ty0, ty1 = tx0[keep], tx1[keep], ty0[keep], ty1[keep]

    counts = (tx1 - tx0 + 1) * (ty1 - ty0 + 1)
    total = int(counts.sum())
    if total == 0:
        return (np.zeros(n_tiles + 1, dtype=np.int64),
                np.zeros(0, dtype=np.int64), proj, valid, tiles_x)

    h_counts = ty1 - ty0 + 1
    w_counts = tx1 - tx0 + 1
    rows = _concat_ranges(ty0, h_counts)  # one entry per (splat, tile-row)
    splat_of_row = np.repeat(np.arange(order.size), h_counts)
    w_of_row = w_counts[splat_of_row]
    entry_tile = _concat_ranges(rows * tiles_x + tx0[splat_of_row], w_of_row)
    entry_splat = order[np.repeat(splat_of_row, w_of_row)]
    assert entry_tile.size == total
    # stable sort by tile id preserves the depth order within each tile
    perm = np.argsort(entry_tile, kind="stable")
    entry_tile = entry_tile[perm]
    entry_splat = entry_splat[perm]
    tile_offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    np.add.at(tile_offsets, entry_tile + 1, 1)
    np.cumsum(tile_offsets, out=tile_offsets)
    return tile_offsets, entry_splat, proj, valid, tiles_x


def render(splats: Splats, camera: Camera, background=(0.0, 0.0, 0.0)) -> RenderOutputs:
    h, w = camera.height, camera.width
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    out_color = np.empty((h, w, 3))
    out_alpha = np.empty((h, w))
    out_depth = np.empty((h, w))
    out_normal = np.empty((h, w, 3))
    if len(splats) == 0:
        out_color[:] = bg
        out_alpha[:] = 0.0
        out_depth[:] = 0.0
        out_normal[:] = 0.0
        return RenderOutputs(out_color, out_alpha, out_depth, out_normal)

    mu, nrm, a_u, a_v, _ = _camera_frame_splats(splats, camera)
    tile_offsets, tile_entries, proj, _, tiles_x = _bin_splats(mu, splats.scales, camera)
    _kernels.splat_forward(
        mu, nrm, a_u, a_v, splats.scales, splats.opacity, splats.color, proj,
        tile_offsets, tile_entries, tiles_x, TILE_SIZE,
        w, h, camera.fx, camera.fy, camera.cx, camera.cy, bg,
        out_color, out_alpha, out_depth, out_normal,
    )
    return RenderOutputs(out_color, out_alpha, out_depth, out_normal)


def render_vjp(splats: Splats, camera: Camera, background, cotangents: dict) -> dict:
    """Backward of render.

    cotangents may hold 'color' (H,W,3), 'alpha' (H,W), 'depth' (H,W),
    'normal' (H,W,3); missing keys mean zero. Returns world-frame gradients
    for centers, t_u, t_v, normals, scales, opacity, color, plus 'quat'
    (the frame gradients pulled back through the quaternion).
    """
    h, w = camera.height, camera.width
    n = len(splats)
    grads = {
        "centers": np.zeros((n, 3)),
        "t_u": np.zeros((n, 3)),
        "t_v": np.zeros((n, 3)),
        "normals": np.zeros((n, 3)),
        "scales": np.zeros((n, 2)),
        "opacity": np.zeros(n),
        "color": np.zeros((n, 3)),
        "quat": np.zeros((n, 4)),
    }
    if n == 0:
        return grads
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    zc = np.zeros((h, w, 3))
    zs = np.zeros((h, w))
    cot_color = np.ascontiguousarray(cotangents.get("color", zc), dtype=np.float64)
    cot_alpha = np.ascontiguousarray(cotangents.get("alpha", zs), dtype=np.float64)
    cot_depth = np.ascontiguousarray(cotangents.get("depth", zs), dtype=np.float64)
    cot_normal = np.ascontiguousarray(cotangents.get("normal", zc), dtype=np.float64)

    mu, nrm, a_u, a_v, flip = _camera_frame_splats(splats, camera)
    tile_offsets, tile_entries, proj, _, tiles_x = _bin_splats(mu, splats.scales, camera)
    entry_grads = np.zeros((tile_entries.shape[0], 18))
    _kernels.splat_backward(
        mu, nrm, a_u, a_v, splats.scales, splats.opacity, splats.color, proj,
        tile_offsets, tile_entries, tiles_x, TILE_SIZE,
        w, h, camera.fx, camera.fy, camera.cx, camera.cy, bg,
        cot_color, cot_alpha, cot_depth, cot_normal,
        entry_grads,
    )
    # deterministic reduction: fixed entry order, single-threaded scatter
    d_mu = np.zeros((n, 3))
    d_nrm = np.zeros((n, 3))
    d_au = np.zeros((n, 3))
    d_av = np.zeros((n, 3))
    np.add.at(d_mu, tile_entries, entry_grads[:, 0:3])
    np.add.at(d_nrm, tile_entries, entry_grads[:, 3:6])
    np.add.at(d_au, tile_entries, entry_grads[:, 6:9])
    np.add.at(d_av, tile_entries, entry_grads[:, 9:12])
    np.add.at(grads["scales"], tile_entries, entry_grads[:, 12:14])
    np.add.at(grads["opacity"], tile_entries, entry_grads[:, 14])
    np.add.at(grads["color"], tile_entries, entry_grads[:, 15:18])

    r = camera.rotation
    grads["centers"] = d_mu @ r
    grads["t_u"] = d_au @ r
    grads["t_v"] = d_av @ r
    grads["normals"] = (d_nrm * flip[:, None]) @ r
    cot_m = np.stack([grads["t_u"], grads["t_v"], grads["normals"]], axis=2)
    grads["quat"] = vjp_quat_to_mat(splats.quat, cot_m)
    return grads
