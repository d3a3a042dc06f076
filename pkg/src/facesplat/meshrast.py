"""Differentiable mesh rasterization into depth / normal / coverage maps.

Hard z-buffered rasterization at pixel centers with attribute-only
gradients: the pixel-to-triangle assignment (and coverage) is held fixed in
the backward pass. Depth comes from exact ray-plane intersection, so on a
covered pixel it equals the nearest ray-mesh intersection; normals are
3D-barycentric blends of camera-frame vertex normals, renormalized per
pixel. Triangles with any vertex at or behind the camera plane are skipped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .morph import Mesh, vjp_vertex_normals
from .splat import TILE_SIZE, Camera


@dataclass(eq=False)
class MeshMaps:
    depth: np.ndarray  # (H, W), camera-space z; 0 where uncovered
    normal: np.ndarray  # (H, W, 3), camera frame, unit on covered pixels
    coverage: np.ndarray  # (H, W) bool
    tri_index: np.ndarray  # (H, W) int64, -1 where uncovered
    bary: np.ndarray  # (H, W, 3), 3D barycentrics of the hit point


def _bin_triangles(screen: np.ndarray, faces: np.ndarray, usable: np.ndarray,
                   width: int, height: int):
    """Per-tile CSR candidate lists in ascending triangle order."""
    tiles_x = (width + TILE_SIZE - 1) // TILE_SIZE
    tiles_y = (height + TILE_SIZE - 1) // TILE_SIZE
    n_tiles = tiles_x * tiles_y
    tri_ids = np.flatnonzero(usable)
    if tri_ids.size == 0:
        return np.zeros(n_tiles + 1, dtype=np.int64), np.zeros(0, dtype=np.int64), tiles_x

    sx = screen[faces[tri_ids], 0]  # (m, 3)
    sy = screen[faces[tri_ids], 1]
    x_min = sx.min(axis=1)
    x_max = sx.max(axis=1)
    y_min = sy.min(axis=1)
    y_max = sy.max(axis=1)
    on_screen = (x_max >= 0) & (x_min <= width) & (y_max >= 0) & (y_min <= height)
    tri_ids = tri_ids[on_screen]
    if tri_ids.size == 0:
        return np.zeros(n_tiles + 1, dtype=np.int64), np.zeros(0, dtype=np.int64), tiles_x
    tx0 = np.clip(np.floor(x_min[on_screen] / TILE_SIZE), 0, tiles_x - 1).astype(np.int64)
    tx1 = np.clip(np.floor(x_max[on_screen] / TILE_SIZE), 0, tiles_x - 1).astype(np.int64)
    ty0 = np.clip(np.floor(y_min[on_screen] / TILE_SIZE), 0, tiles_y - 1).astype(np.int64)
    ty1 = np.clip(np.floor(y_max[on_screen] / TILE_SIZE), 0, tiles_y - 1).astype(np.int64)

    from .splat import _concat_ranges

    h_counts = ty1 - ty0 + 1
    w_counts = tx1 - tx0 + 1
    rows = _concat_ranges(ty0, h_counts)
    tri_of_row = np.repeat(np.arange(tri_ids.size), h_counts)
    w_of_row = w_counts[tri_of_row]
    entry_tile = _concat_ranges(rows * tiles_x + tx0[tri_of_row], w_of_row)
    entry_tri = tri_ids[np.repeat(tri_of_row, w_of_row)]
    perm = np.argsort(entry_tile, kind="stable")  # keeps triangle order per tile
    entry_tile = entry_tile[perm]
    entry_tri = entry_tri[perm]
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    np.add.at(offsets, entry_tile + 1, 1)
    np.cumsum(offsets, out=offsets)
    return offsets, entry_tri, tiles_x


def raster_mesh(mesh: Mesh, camera: Camera) -> MeshMaps:
    h, w = camera.height, camera.width
    depth = np.zeros((h, w))
    normal = np.zeros((h, w, 3))
    tri_index = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))

    cam_verts = camera.to_camera(mesh.vertices)
    n_cam = mesh.normals @ camera.rotation.T
    z = cam_verts[:, 2]
    safe_z = np.where(z > _kernels.MIN_DEPTH, z, 1.0)
    screen = np.stack(
        [camera.fx * cam_verts[:, 0] / safe_z + camera.cx,
         camera.fy * cam_verts[:, 1] / safe_z + camera.cy], axis=1
    )
    usable = np.all(z[mesh.faces] > _kernels.MIN_DEPTH, axis=1)
    offsets, entries, tiles_x = _bin_triangles(screen, mesh.faces, usable, w, h)
    faces64 = np.ascontiguousarray(mesh.faces, dtype=np.int64)
    _kernels.mesh_raster(
        cam_verts, screen, n_cam, faces64,
        offsets, entries, tiles_x, TILE_SIZE,
        w, h, camera.fx, camera.fy, camera.cx, camera.cy,
        depth, normal, tri_index, bary,
    )
    return MeshMaps(depth=depth, normal=normal, coverage=tri_index >= 0,
                    tri_index=tri_index, bary=bary)


def raster_mesh_vjp(mesh: Mesh, camera: Camera, cot_depth: np.ndarray | None,
                    cot_normal: np.ndarray | None, maps: MeshMaps | None = None) -> np.ndarray:
    """Gradient of (depth, normal) maps w.r.t. world vertex positions.

    Pixel-to-triangle assignment is fixed; gradients flow through the
    ray-plane depth, the 3D barycentrics, and the vertex-normal field
    (including its normalization Jacobian). Returns (n_verts, 3).
    """
    if maps is None:
        maps = raster_mesh(mesh, camera)
    h, w = camera.height, camera.width
    if cot_depth is None:
        cot_depth = np.zeros((h, w))
    if cot_normal is None:
        cot_normal = np.zeros((h, w, 3))

    pix = np.flatnonzero(maps.coverage.reshape(-1))
    d_vert_cam = np.zeros((mesh.vertices.shape[0], 3))
    d_vnorm_cam = np.zeros((mesh.vertices.shape[0], 3))
    if pix.size:
        cd = cot_depth.reshape(-1)[pix]
        cn = cot_normal.reshape(-1, 3)[pix]
        live = (cd != 0) | np.any(cn != 0, axis=1)
        pix = pix[live]
    if pix.size:
        cd = cot_depth.reshape(-1)[pix]
        cn = cot_normal.reshape(-1, 3)[pix]
        tri = maps.tri_index.reshape(-1)[pix]
        b = maps.bary.reshape(-1, 3)[pix]
        t_hit = maps.depth.reshape(-1)[pix]

        cam_verts = camera.to_camera(mesh.vertices)
        n_cam = mesh.normals @ camera.rotation.T
        idx = mesh.faces[tri]  # (m, 3)
        v0 = cam_verts[idx[:, 0]]
        v1 = cam_verts[idx[:, 1]]
        v2 = cam_verts[idx[:, 2]]
        e1 = v1 - v0
        e2 = v2 - v0
        nf = np.cross(e1, e2)

        py, px = np.divmod(pix, w)
        d_ray = np.stack(
            [(px + 0.5 - camera.cx) / camera.fx,
             (py + 0.5 - camera.cy) / camera.fy,
             np.ones(pix.size)], axis=1
        )
        gamma = np.sum(nf * d_ray, axis=1)
        p = t_hit[:, None] * d_ray
        wvec = p - v0

        # normal map: N = renormalize(sum b_k n_k)
        n0 = n_cam[idx[:, 0]]
        n1 = n_cam[idx[:, 1]]
        n2 = n_cam[idx[:, 2]]
        n_raw = b[:, 0:1] * n0 + b[:, 1:2] * n1 + b[:, 2:3] * n2
        nn = np.linalg.norm(n_raw, axis=1, keepdims=True)
        nn = np.maximum(nn, 1e-20)
        n_unit = n_raw / nn
        d_nraw = (cn - n_unit * np.sum(n_unit * cn, axis=1, keepdims=True)) / nn
        # vertex-normal cotangents (camera frame)
        np.add.at(d_vnorm_cam, idx[:, 0], b[:, 0:1] * d_nraw)
        np.add.at(d_vnorm_cam, idx[:, 1], b[:, 1:2] * d_nraw)
        np.add.at(d_vnorm_cam, idx[:, 2], b[:, 2:3] * d_nraw)
        # barycentric cotangents (b0 = 1 - b1 - b2 eliminated)
        d_b1 = np.sum(d_nraw * (n1 - n0), axis=1)
        d_b2 = np.sum(d_nraw * (n2 - n0), axis=1)

        # (b1, b2) from the 2x2 Gram solve G b = r
        g11 = np.sum(e1 * e1, axis=1)
        g12 = np.sum(e1 * e2, axis=1)
        g22 = np.sum(e2 * e2, axis=1)
        det = g11 * g22 - g12 * g12
        lam1 = (g22 * d_b1 - g12 * d_b2) / det
        lam2 = (g11 * d_b2 - g12 * d_b1) / det
        b1 = b[:, 1]
        b2 = b[:, 2]
        d_g11 = -lam1 * b1
        d_g12 = -(lam1 * b2 + lam2 * b1)
        d_g22 = -lam2 * b2
        d_e1 = (2 * d_g11)[:, None] * e1 + d_g12[:, None] * e2 + lam1[:, None] * wvec
        d_e2 = (2 * d_g22)[:, None] * e2 + d_g12[:, None] * e1 + lam2[:, None] * wvec
        d_w = lam1[:, None] * e1 + lam2[:, None] * e2
        d_t = np.sum(d_w * d_ray, axis=1) + cd  # depth cotangent is direct
        d_v0 = -d_w

        # t = (nf . v0) / (nf . d)
        d_nf = d_t[:, None] * (v0 - p) / gamma[:, None]
        d_v0 = d_v0 + d_t[:, None] * nf / gamma[:, None]
        # nf = e1 x e2
        d_e1 = d_e1 + np.cross(e2, d_nf)
        d_e2 = d_e2 + np.cross(d_nf, e1)

        d_v1 = d_e1
        d_v2 = d_e2
        d_v0 = d_v0 - d_e1 - d_e2
        np.add.at(d_vert_cam, idx[:, 0], d_v0)
        np.add.at(d_vert_cam, idx[:, 1], d_v1)
        np.add.at(d_vert_cam, idx[:, 2], d_v2)

    r = camera.rotation
    d_vertices = d_vert_cam @ r
    d_vnorm_world = d_vnorm_cam @ r
    if np.any(d_vnorm_world):
        d_vertices = d_vertices + vjp_vertex_normals(mesh.vertices, mesh.faces, d_vnorm_world)
    return d_vertices
