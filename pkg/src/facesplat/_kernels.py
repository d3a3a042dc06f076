"""Numba kernels for the splat renderer and the mesh rasterizer.

Parallelism is over image tiles; every pixel belongs to exactly one tile, so
forward writes never race. Backward kernels accumulate into per-(tile, splat)
entry rows owned by a single tile; the Python wrappers reduce those rows in
fixed entry order with np.add.at, which makes gradients bitwise identical for
any thread count.

Constants mirrored from the renderer contract: alpha clip 0.999, transmittance
cutoff 1e-4, low-pass sigma 0.3 px, minimum camera depth 1e-6.
"""

import math

import numba
import numpy as np
from numba import njit, prange

ALPHA_CLIP = 0.999
T_CUTOFF = 1e-4
LOWPASS_DENOM = 2.0 * 0.3 * 0.3  # 2 sigma^2 for the screen-space floor
MIN_DEPTH = 1e-6
PARALLEL_EPS = 1e-12  # |n . d| below this counts as ray parallel to the plane


@njit(cache=True, parallel=True)
def splat_forward(mu, nrm, a_u, a_v, s_uv, opacity, color, proj,
                  tile_offsets, tile_entries, tiles_x, tile_size,
                  width, height, fx, fy, cx, cy, bg,
                  out_color, out_alpha, out_depth, out_normal):
    n_tiles = tile_offsets.shape[0] - 1
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t % tiles_x
        x_lo = tx * tile_size
        y_lo = ty * tile_size
        x_hi = min(x_lo + tile_size, width)
        y_hi = min(y_lo + tile_size, height)
        lo = tile_offsets[t]
        hi = tile_offsets[t + 1]
        for py in range(y_lo, y_hi):
            for px in range(x_lo, x_hi):
                dx = (px + 0.5 - cx) / fx
                dy = (py + 0.5 - cy) / fy
                trans = 1.0
                acc_r = 0.0
                acc_g = 0.0
                acc_b = 0.0
                acc_a = 0.0
                acc_d = 0.0
                acc_nx = 0.0
                acc_ny = 0.0
                acc_nz = 0.0
                for e in range(lo, hi):
                    i = tile_entries[e]
                    gamma = nrm[i, 0] * dx + nrm[i, 1] * dy + nrm[i, 2]
                    if abs(gamma) < PARALLEL_EPS:
                        continue
                    t_hit = (nrm[i, 0] * mu[i, 0] + nrm[i, 1] * mu[i, 1]
                             + nrm[i, 2] * mu[i, 2]) / gamma
                    if t_hit <= 0.0:
                        continue
                    qx = t_hit * dx - mu[i, 0]
                    qy = t_hit * dy - mu[i, 1]
                    qz = t_hit - mu[i, 2]
                    u = (qx * a_u[i, 0] + qy * a_u[i, 1] + qz * a_u[i, 2]) / s_uv[i, 0]
                    v = (qx * a_v[i, 0] + qy * a_v[i, 1] + qz * a_v[i, 2]) / s_uv[i, 1]
                    g = math.exp(-0.5 * (u * u + v * v))
                    rx = px + 0.5 - proj[i, 0]
                    ry = py + 0.5 - proj[i, 1]
                    g2 = math.exp(-(rx * rx + ry * ry) / LOWPASS_DENOM)
                    g_eff = g if g >= g2 else g2
                    a = opacity[i] * g_eff
                    if a > ALPHA_CLIP:
                        a = ALPHA_CLIP
                    w = a * trans
                    acc_r += color[i, 0] * w
                    acc_g += color[i, 1] * w
                    acc_b += color[i, 2] * w
                    acc_a += w
                    acc_d += t_hit * w
                    acc_nx += nrm[i, 0] * w
                    acc_ny += nrm[i, 1] * w
                    acc_nz += nrm[i, 2] * w
                    trans *= 1.0 - a
                    if trans < T_CUTOFF:
                        break
                if acc_a > 1.0:
                    acc_a = 1.0
                out_color[py, px, 0] = acc_r + (1.0 - acc_a) * bg[0]
                out_color[py, px, 1] = acc_g + (1.0 - acc_a) * bg[1]
                out_color[py, px, 2] = acc_b + (1.0 - acc_a) * bg[2]
                out_alpha[py, px] = acc_a
                if acc_a > 1e-12:
                    out_depth[py, px] = acc_d / acc_a
                    out_normal[py, px, 0] = acc_nx / acc_a
                    out_normal[py, px, 1] = acc_ny / acc_a
                    out_normal[py, px, 2] = acc_nz / acc_a
                else:
                    out_depth[py, px] = 0.0
                    out_normal[py, px, 0] = 0.0
                    out_normal[py, px, 1] = 0.0
                    out_normal[py, px, 2] = 0.0


@njit(cache=True, parallel=True)
def splat_backward(mu, nrm, a_u, a_v, s_uv, opacity, color, proj,
                   tile_offsets, tile_entries, tiles_x, tile_size,
                   width, height, fx, fy, cx, cy, bg,
                   cot_color, cot_alpha, cot_depth, cot_normal,
                   entry_grads):
    """Per-entry gradient rows, layout per row:
    [mu(3), nrm(3), a_u(3), a_v(3), s_u, s_v, opacity, color(3)] = 18."""
    n_tiles = tile_offsets.shape[0] - 1
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t % tiles_x
        x_lo = tx * tile_size
        y_lo = ty * tile_size
        x_hi = min(x_lo + tile_size, width)
        y_hi = min(y_lo + tile_size, height)
        lo = tile_offsets[t]
        hi = tile_offsets[t + 1]
        if lo == hi:
            continue
        for py in range(y_lo, y_hi):
            for px in range(x_lo, x_hi):
                cc0 = cot_color[py, px, 0]
                cc1 = cot_color[py, px, 1]
                cc2 = cot_color[py, px, 2]
                ca = cot_alpha[py, px]
                cd = cot_depth[py, px]
                cn0 = cot_normal[py, px, 0]
                cn1 = cot_normal[py, px, 1]
                cn2 = cot_normal[py, px, 2]
                if (cc0 == 0.0 and cc1 == 0.0 and cc2 == 0.0 and ca == 0.0
                        and cd == 0.0 and cn0 == 0.0 and cn1 == 0.0 and cn2 == 0.0):
                    continue
                dx = (px + 0.5 - cx) / fx
                dy = (py + 0.5 - cy) / fy

                # pass 1: totals (exact replay of the forward walk)
                trans = 1.0
                tot_r = 0.0
                tot_g = 0.0
                tot_b = 0.0
                tot_a = 0.0
                tot_d = 0.0
                tot_nx = 0.0
                tot_ny = 0.0
                tot_nz = 0.0
                for e in range(lo, hi):
                    i = tile_entries[e]
                    gamma = nrm[i, 0] * dx + nrm[i, 1] * dy + nrm[i, 2]
                    if abs(gamma) < PARALLEL_EPS:
                        continue
                    t_hit = (nrm[i, 0] * mu[i, 0] + nrm[i, 1] * mu[i, 1]
                             + nrm[i, 2] * mu[i, 2]) / gamma
                    if t_hit <= 0.0:
                        continue
                    qx = t_hit * dx - mu[i, 0]
                    qy = t_hit * dy - mu[i, 1]
                    qz = t_hit - mu[i, 2]
                    u = (qx * a_u[i, 0] + qy * a_u[i, 1] + qz * a_u[i, 2]) / s_uv[i, 0]
                    v = (qx * a_v[i, 0] + qy * a_v[i, 1] + qz * a_v[i, 2]) / s_uv[i, 1]
                    g = math.exp(-0.5 * (u * u + v * v))
                    rx = px + 0.5 - proj[i, 0]
                    ry = py + 0.5 - proj[i, 1]
                    g2 = math.exp(-(rx * rx + ry * ry) / LOWPASS_DENOM)
                    g_eff = g if g >= g2 else g2
                    a = opacity[i] * g_eff
                    if a > ALPHA_CLIP:
                        a = ALPHA_CLIP
                    w = a * trans
                    tot_r += color[i, 0] * w
                    tot_g += color[i, 1] * w
                    tot_b += color[i, 2] * w
                    tot_a += w
                    tot_d += t_hit * w
                    tot_nx += nrm[i, 0] * w
                    tot_ny += nrm[i, 1] * w
                    tot_nz += nrm[i, 2] * w
                    trans *= 1.0 - a
                    if trans < T_CUTOFF:
                        break

                # cotangents on the raw sums, with the alpha clamp of the
                # forward output and the alpha-normalized depth/normal maps
                clamped_a = tot_a > 1.0
                eff_a = 1.0 if clamped_a else tot_a
                if eff_a > 1e-12:
                    c_sd = cd / eff_a
                    c_sn0 = cn0 / eff_a
                    c_sn1 = cn1 / eff_a
                    c_sn2 = cn2 / eff_a
                    d_norm = tot_d / eff_a
                    n_norm0 = tot_nx / eff_a
                    n_norm1 = tot_ny / eff_a
                    n_norm2 = tot_nz / eff_a
                    c_a = (ca - (cc0 * bg[0] + cc1 * bg[1] + cc2 * bg[2])
                           - cd * d_norm / eff_a
                           - (cn0 * n_norm0 + cn1 * n_norm1 + cn2 * n_norm2) / eff_a)
                else:
                    c_sd = 0.0
                    c_sn0 = 0.0
                    c_sn1 = 0.0
                    c_sn2 = 0.0
                    c_a = ca - (cc0 * bg[0] + cc1 * bg[1] + cc2 * bg[2])
                if clamped_a:
                    c_a = 0.0

                # pass 2: suffix-sum walk
                trans = 1.0
                p_r = 0.0
                p_g = 0.0
                p_b = 0.0
                p_a = 0.0
                p_d = 0.0
                p_nx = 0.0
                p_ny = 0.0
                p_nz = 0.0
                for e in range(lo, hi):
                    i = tile_entries[e]
                    gamma = nrm[i, 0] * dx + nrm[i, 1] * dy + nrm[i, 2]
                    if abs(gamma) < PARALLEL_EPS:
                        continue
                    t_hit = (nrm[i, 0] * mu[i, 0] + nrm[i, 1] * mu[i, 1]
                             + nrm[i, 2] * mu[i, 2]) / gamma
                    if t_hit <= 0.0:
                        continue
                    qx = t_hit * dx - mu[i, 0]
                    qy = t_hit * dy - mu[i, 1]
                    qz = t_hit - mu[i, 2]
                    u = (qx * a_u[i, 0] + qy * a_u[i, 1] + qz * a_u[i, 2]) / s_uv[i, 0]
                    v = (qx * a_v[i, 0] + qy * a_v[i, 1] + qz * a_v[i, 2]) / s_uv[i, 1]
                    g = math.exp(-0.5 * (u * u + v * v))
                    rx = px + 0.5 - proj[i, 0]
                    ry = py + 0.5 - proj[i, 1]
                    g2 = math.exp(-(rx * rx + ry * ry) / LOWPASS_DENOM)
                    use_g2 = g2 > g
                    g_eff = g2 if use_g2 else g
                    a_raw = opacity[i] * g_eff
                    clamped = a_raw > ALPHA_CLIP
                    a = ALPHA_CLIP if clamped else a_raw
                    w = a * trans
                    t_before = trans

                    p_r += color[i, 0] * w
                    p_g += color[i, 1] * w
                    p_b += color[i, 2] * w
                    p_a += w
                    p_d += t_hit * w
                    p_nx += nrm[i, 0] * w
                    p_ny += nrm[i, 1] * w
                    p_nz += nrm[i, 2] * w

                    # dL/da through this splat's own term and the suffix
                    cot_a_i = (cc0 * color[i, 0] + cc1 * color[i, 1]
                               + cc2 * color[i, 2] + c_a
                               + c_sd * t_hit
                               + c_sn0 * nrm[i, 0] + c_sn1 * nrm[i, 1]
                               + c_sn2 * nrm[i, 2]) * t_before
                    cot_a_i -= (cc0 * (tot_r - p_r) + cc1 * (tot_g - p_g)
                                + cc2 * (tot_b - p_b) + c_a * (tot_a - p_a)
                                + c_sd * (tot_d - p_d)
                                + c_sn0 * (tot_nx - p_nx)
                                + c_sn1 * (tot_ny - p_ny)
                                + c_sn2 * (tot_nz - p_nz)) / (1.0 - a)

                    # direct per-splat terms
                    entry_grads[e, 15] += cc0 * w
                    entry_grads[e, 16] += cc1 * w
                    entry_grads[e, 17] += cc2 * w
                    cot_t = c_sd * w
                    dn_dir0 = c_sn0 * w
                    dn_dir1 = c_sn1 * w
                    dn_dir2 = c_sn2 * w

                    cq0 = 0.0
                    cq1 = 0.0
                    cq2 = 0.0
                    if not clamped:
                        cot_geff = cot_a_i * opacity[i]
                        entry_grads[e, 14] += cot_a_i * g_eff
                        if use_g2:
                            # low-pass branch: gradient through projection
                            cot_g2 = cot_geff * g2
                            fpu = cot_g2 * 2.0 * rx / LOWPASS_DENOM
                            fpv = cot_g2 * 2.0 * ry / LOWPASS_DENOM
                            inv_z = 1.0 / mu[i, 2]
                            entry_grads[e, 0] += fpu * fx * inv_z
                            entry_grads[e, 1] += fpv * fy * inv_z
                            entry_grads[e, 2] -= (fpu * fx * mu[i, 0]
                                                  + fpv * fy * mu[i, 1]) * inv_z * inv_z
                        else:
                            cot_g = cot_geff * g
                            cot_u = -u * cot_g
                            cot_v = -v * cot_g
                            inv_su = 1.0 / s_uv[i, 0]
                            inv_sv = 1.0 / s_uv[i, 1]
                            cq0 = cot_u * a_u[i, 0] * inv_su + cot_v * a_v[i, 0] * inv_sv
                            cq1 = cot_u * a_u[i, 1] * inv_su + cot_v * a_v[i, 1] * inv_sv
                            cq2 = cot_u * a_u[i, 2] * inv_su + cot_v * a_v[i, 2] * inv_sv
                            entry_grads[e, 6] += cot_u * qx * inv_su
                            entry_grads[e, 7] += cot_u * qy * inv_su
                            entry_grads[e, 8] += cot_u * qz * inv_su
                            entry_grads[e, 9] += cot_v * qx * inv_sv
                            entry_grads[e, 10] += cot_v * qy * inv_sv
                            entry_grads[e, 11] += cot_v * qz * inv_sv
                            entry_grads[e, 12] -= cot_u * u * inv_su
                            entry_grads[e, 13] -= cot_v * v * inv_sv
                            cot_t += cq0 * dx + cq1 * dy + cq2

                    inv_gamma = 1.0 / gamma
                    entry_grads[e, 0] += -cq0 + cot_t * nrm[i, 0] * inv_gamma
                    entry_grads[e, 1] += -cq1 + cot_t * nrm[i, 1] * inv_gamma
                    entry_grads[e, 2] += -cq2 + cot_t * nrm[i, 2] * inv_gamma
                    entry_grads[e, 3] += -cot_t * qx * inv_gamma + dn_dir0
                    entry_grads[e, 4] += -cot_t * qy * inv_gamma + dn_dir1
                    entry_grads[e, 5] += -cot_t * qz * inv_gamma + dn_dir2

                    trans *= 1.0 - a
                    if trans < T_CUTOFF:
                        break


# ---------------------------------------------------------------------------
# mesh rasterization


@njit(cache=True, parallel=True)
def mesh_raster(cam_verts, screen_verts, vert_normals, faces,
                tile_offsets, tile_entries, tiles_x, tile_size,
                width, height, fx, fy, cx, cy,
                out_depth, out_normal, out_tri, out_bary):
    """Z-buffered raster of camera-space triangles.

    Coverage via 2D edge functions (top-left rule); depth via ray-plane
    intersection, so covered depth matches exact ray casting; normals are
    3D-barycentric interpolations of vertex normals, renormalized.
    Candidates arrive in ascending triangle order; strict < keeps the lowest
    index on exact depth ties.
    """
    n_tiles = tile_offsets.shape[0] - 1
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t % tiles_x
        x_lo = tx * tile_size
        y_lo = ty * tile_size
        x_hi = min(x_lo + tile_size, width)
        y_hi = min(y_lo + tile_size, height)
        lo = tile_offsets[t]
        hi = tile_offsets[t + 1]
        for py in range(y_lo, y_hi):
            for px in range(x_lo, x_hi):
                sx = px + 0.5
                sy = py + 0.5
                best_t = np.inf
                best_tri = -1
                b0 = 0.0
                b1 = 0.0
                b2 = 0.0
                for e in range(lo, hi):
                    f = tile_entries[e]
                    i0 = faces[f, 0]
                    i1 = faces[f, 1]
                    i2 = faces[f, 2]
                    x0 = screen_verts[i0, 0]
                    y0 = screen_verts[i0, 1]
                    x1 = screen_verts[i1, 0]
                    y1 = screen_verts[i1, 1]
                    x2 = screen_verts[i2, 0]
                    y2 = screen_verts[i2, 1]
                    area2 = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
                    if area2 == 0.0:
                        continue
                    if area2 < 0.0:
                        # canonicalize winding for the coverage test only
                        tmpx = x1
                        tmpy = y1
                        x1 = x2
                        y1 = y2
                        x2 = tmpx
                        y2 = tmpy
                    e0 = (x1 - x0) * (sy - y0) - (y1 - y0) * (sx - x0)
                    e1 = (x2 - x1) * (sy - y1) - (y2 - y1) * (sx - x1)
                    e2 = (x0 - x2) * (sy - y2) - (y0 - y2) * (sx - x2)
                    inside = True
                    if e0 < 0.0 or e1 < 0.0 or e2 < 0.0:
                        inside = False
                    else:
                        # boundary pixels: top-left rule per zero edge
                        if e0 == 0.0:
                            dxe = x1 - x0
                            dye = y1 - y0
                            if not ((dye == 0.0 and dxe < 0.0) or dye < 0.0):
                                inside = False
                        if inside and e1 == 0.0:
                            dxe = x2 - x1
                            dye = y2 - y1
                            if not ((dye == 0.0 and dxe < 0.0) or dye < 0.0):
                                inside = False
                        if inside and e2 == 0.0:
                            dxe = x0 - x2
                            dye = y0 - y2
                            if not ((dye == 0.0 and dxe < 0.0) or dye < 0.0):
                                inside = False
                    if not inside:
                        continue
                    # ray-plane intersection in camera space (original order)
                    j0 = faces[f, 0]
                    j1 = faces[f, 1]
                    j2 = faces[f, 2]
                    e1x = cam_verts[j1, 0] - cam_verts[j0, 0]
                    e1y = cam_verts[j1, 1] - cam_verts[j0, 1]
                    e1z = cam_verts[j1, 2] - cam_verts[j0, 2]
                    e2x = cam_verts[j2, 0] - cam_verts[j0, 0]
                    e2y = cam_verts[j2, 1] - cam_verts[j0, 1]
                    e2z = cam_verts[j2, 2] - cam_verts[j0, 2]
                    nx = e1y * e2z - e1z * e2y
                    ny = e1z * e2x - e1x * e2z
                    nz = e1x * e2y - e1y * e2x
                    dx = (sx - cx) / fx
                    dy = (sy - cy) / fy
                    gamma = nx * dx + ny * dy + nz
                    if abs(gamma) < PARALLEL_EPS:
                        continue
                    t_hit = (nx * cam_verts[j0, 0] + ny * cam_verts[j0, 1]
                             + nz * cam_verts[j0, 2]) / gamma
                    if t_hit <= 0.0 or t_hit >= best_t:
                        continue
                    # 3D barycentrics of the hit point via the Gram system
                    wx = t_hit * dx - cam_verts[j0, 0]
                    wy = t_hit * dy - cam_verts[j0, 1]
                    wz = t_hit - cam_verts[j0, 2]
                    g11 = e1x * e1x + e1y * e1y + e1z * e1z
                    g12 = e1x * e2x + e1y * e2y + e1z * e2z
                    g22 = e2x * e2x + e2y * e2y + e2z * e2z
                    det = g11 * g22 - g12 * g12
                    if det <= 0.0:
                        continue
                    r1 = wx * e1x + wy * e1y + wz * e1z
                    r2 = wx * e2x + wy * e2y + wz * e2z
                    bb1 = (g22 * r1 - g12 * r2) / det
                    bb2 = (g11 * r2 - g12 * r1) / det
                    best_t = t_hit
                    best_tri = f
                    b1 = bb1
                    b2 = bb2
                    b0 = 1.0 - bb1 - bb2
                if best_tri >= 0:
                    out_tri[py, px] = best_tri
                    out_depth[py, px] = best_t
                    out_bary[py, px, 0] = b0
                    out_bary[py, px, 1] = b1
                    out_bary[py, px, 2] = b2
                    j0 = faces[best_tri, 0]
                    j1 = faces[best_tri, 1]
                    j2 = faces[best_tri, 2]
                    nx = (b0 * vert_normals[j0, 0] + b1 * vert_normals[j1, 0]
                          + b2 * vert_normals[j2, 0])
                    ny = (b0 * vert_normals[j0, 1] + b1 * vert_normals[j1, 1]
                          + b2 * vert_normals[j2, 1])
                    nz = (b0 * vert_normals[j0, 2] + b1 * vert_normals[j1, 2]
                          + b2 * vert_normals[j2, 2])
                    nn = math.sqrt(nx * nx + ny * ny + nz * nz)
                    if nn > 1e-20:
                        out_normal[py, px, 0] = nx / nn
                        out_normal[py, px, 1] = ny / nn
                        out_normal[py, px, 2] = nz / nn
                else:
                    out_tri[py, px] = -1
                    out_depth[py, px] = 0.0


# ---------------------------------------------------------------------------
# point-to-mesh distance


@njit(cache=True)
def _seg_dist2(px, py, pz, ax, ay, az, bx, by, bz):
    abx = bx - ax
    aby = by - ay
    abz = bz - az
    apx = px - ax
    apy = py - ay
    apz = pz - az
    denom = abx * abx + aby * aby + abz * abz
    t = 0.0
    if denom > 0.0:
        t = (apx * abx + apy * aby + apz * abz) / denom
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
    dx = apx - t * abx
    dy = apy - t * aby
    dz = apz - t * abz
    return dx * dx + dy * dy + dz * dz


@njit(cache=True)
def _tri_dist2(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    """Squared point-to-triangle distance via barycentric region tests."""
    abx = bx - ax
    aby = by - ay
    abz = bz - az
    acx = cx - ax
    acy = cy - ay
    acz = cz - az
    apx = px - ax
    apy = py - ay
    apz = pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return apx * apx + apy * apy + apz * apz
    bpx = px - bx
    bpy = py - by
    bpz = pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bpx * bpx + bpy * bpy + bpz * bpz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        denom = d1 - d3
        t = d1 / denom if denom > 0.0 else 0.0
        dx = apx - t * abx
        dy = apy - t * aby
        dz = apz - t * abz
        return dx * dx + dy * dy + dz * dz
    cpx = px - cx
    cpy = py - cy
    cpz = pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cpx * cpx + cpy * cpy + cpz * cpz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        denom = d2 - d6
        t = d2 / denom if denom > 0.0 else 0.0
        dx = apx - t * acx
        dy = apy - t * acy
        dz = apz - t * acz
        return dx * dx + dy * dy + dz * dz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and d4 - d3 >= 0.0 and d5 - d6 >= 0.0:
        denom = (d4 - d3) + (d5 - d6)
        t = (d4 - d3) / denom if denom > 0.0 else 0.0
        bcx = cx - bx
        bcy = cy - by
        bcz = cz - bz
        dx = bpx - t * bcx
        dy = bpy - t * bcy
        dz = bpz - t * bcz
        return dx * dx + dy * dy + dz * dz
    denom = va + vb + vc
    if denom <= 0.0:
        # degenerate sliver: the nearest edge decides
        da = _seg_dist2(px, py, pz, ax, ay, az, bx, by, bz)
        db = _seg_dist2(px, py, pz, bx, by, bz, cx, cy, cz)
        dc = _seg_dist2(px, py, pz, cx, cy, cz, ax, ay, az)
        return min(da, min(db, dc))
    v = vb / denom
    w = vc / denom
    dx = apx - (v * abx + w * acx)
    dy = apy - (v * aby + w * acy)
    dz = apz - (v * abz + w * acz)
    return dx * dx + dy * dy + dz * dz


@njit(cache=True)
def _box_dist2(px, py, pz, lox, loy, loz, hix, hiy, hiz):
    d = 0.0
    if px < lox:
        d += (lox - px) * (lox - px)
    elif px > hix:
        d += (px - hix) * (px - hix)
    if py < loy:
        d += (loy - py) * (loy - py)
    elif py > hiy:
        d += (py - hiy) * (py - hiy)
    if pz < loz:
        d += (loz - pz) * (loz - pz)
    elif pz > hiz:
        d += (pz - hiz) * (pz - hiz)
    return d


@njit(cache=True, parallel=True)
def bvh_point_mesh_dist2(points, verts, faces, node_lo, node_hi,
                         node_left, node_right, node_start, node_count,
                         tri_order, out_d2):
    """Nearest squared point-to-triangle distance per query point.

    Nodes form a median-split tree; node_left < 0 marks a leaf owning
    tri_order[start : start + count]. Each point writes only its own output
    slot, so results are bitwise identical for any thread count.
    """
    n = points.shape[0]
    for i in prange(n):
        px = points[i, 0]
        py = points[i, 1]
        pz = points[i, 2]
        best = np.inf
        stack = np.empty(128, dtype=np.int64)
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            nd = stack[top]
            d2 = _box_dist2(px, py, pz,
                            node_lo[nd, 0], node_lo[nd, 1], node_lo[nd, 2],
                            node_hi[nd, 0], node_hi[nd, 1], node_hi[nd, 2])
            if d2 >= best:
                continue
            left = node_left[nd]
            if left < 0:
                s = node_start[nd]
                e = s + node_count[nd]
                for k in range(s, e):
                    f = tri_order[k]
                    i0 = faces[f, 0]
                    i1 = faces[f, 1]
                    i2 = faces[f, 2]
                    d = _tri_dist2(px, py, pz,
                                   verts[i0, 0], verts[i0, 1], verts[i0, 2],
                                   verts[i1, 0], verts[i1, 1], verts[i1, 2],
                                   verts[i2, 0], verts[i2, 1], verts[i2, 2])
                    if d < best:
                        best = d
            else:
                right = node_right[nd]
                dl = _box_dist2(px, py, pz,
                                node_lo[left, 0], node_lo[left, 1], node_lo[left, 2],
                                node_hi[left, 0], node_hi[left, 1], node_hi[left, 2])
                dr = _box_dist2(px, py, pz,
                                node_lo[right, 0], node_lo[right, 1], node_lo[right, 2],
                                node_hi[right, 0], node_hi[right, 1], node_hi[right, 2])
                # push the farther child first so the nearer one is popped next
                if dl <= dr:
                    stack[top] = right
                    top += 1
                    stack[top] = left
                    top += 1
                else:
                    stack[top] = left
                    top += 1
                    stack[top] = right
                    top += 1
        out_d2[i] = best


def set_threads_from_env(env_value: str | None) -> int:
    """Cap numba threads with an environment override; returns the cap."""
    cap = numba.config.NUMBA_NUM_THREADS
    if env_value:
        try:
            requested = int(env_value)
        except ValueError:
            raise ValueError(f"thread cap must be an integer, got {env_value!r}")
        if requested < 1:
            raise ValueError("thread cap must be >= 1")
        cap = min(requested, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(cap)
    return cap
