"""Fitting objectives: photometric, structural, perceptual, geometric
binding, landmark reprojection, and parameter regularization.

Every term comes with a hand-written VJP so the optimizer can pull scalar
losses back through the renderers. Conventions shared by all terms: images
are (H, W, 3) float64 in [0, 1], masks are (H, W) boolean, and per-pixel
normalizations use the pixel count so weights transfer across resolutions.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .meshrast import MeshMaps
from .splat import Camera, RenderOutputs

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class LossWeights:
    lam: float = 0.7  # facial-region emphasis inside the pixel term
    w_pixel: float = 1.0
    w_dssim: float = 0.2
    w_perc: float = 0.1
    w_binding: float = 0.5
    w_lmk: float = 1.0
    w_reg_shape: float = 1e-4
    w_reg_expr: float = 1e-4
    stage: int = 1

    def __post_init__(self) -> None:
        assert 0.0 <= self.lam <= 1.0, "lam must lie in [0, 1]"
        for name in ("w_pixel", "w_dssim", "w_perc", "w_binding", "w_lmk",
                     "w_reg_shape", "w_reg_expr"):
            assert getattr(self, name) >= 0.0, f"{name} must be >= 0"
        assert self.stage in (1, 2), "stage must be 1 or 2"


@dataclass(eq=False)
class Supervision:
    """One view's fitting targets."""

    image: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray  # (H, W) bool facial region
    landmarks: np.ndarray  # (68, 2) pixel targets
    visible: np.ndarray  # (68,) bool
    camera: Camera

    def __post_init__(self) -> None:
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.landmarks = np.asarray(self.landmarks, dtype=np.float64)
        self.visible = np.asarray(self.visible, dtype=bool)
        assert self.image.ndim == 3 and self.image.shape[2] == 3
        assert self.mask.shape == self.image.shape[:2]
        assert self.landmarks.shape == (self.visible.shape[0], 2)


# ---------------------------------------------------------------------------
# pixel term


def _pixel_weight(sup: Supervision, lam: float) -> np.ndarray:
    return lam * sup.mask.astype(np.float64) + (1.0 - lam)


def pixel_loss(render: np.ndarray, sup: Supervision, lam: float = 0.7) -> float:
    """Masked squared error, emphasized on the facial region.

    || (I_t - I_r) . (lam m + (1 - lam)) ||^2 over pixels and channels,
    divided by the pixel count.
    """
    if render.shape != sup.image.shape:
        raise ValueError(f"image shape mismatch: {render.shape} vs {sup.image.shape}")
    w = _pixel_weight(sup, lam)
    diff = (sup.image - render) * w[:, :, None]
    return float(np.sum(diff * diff) / w.size)


def vjp_pixel_loss(render: np.ndarray, sup: Supervision, lam: float = 0.7) -> np.ndarray:
    w = _pixel_weight(sup, lam)
    return 2.0 * (render - sup.image) * (w * w)[:, :, None] / w.size


# ---------------------------------------------------------------------------
# D-SSIM term


def _gaussian_window(n: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(n) - (n - 1) / 2.0
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _filt_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation along both image axes."""
    n = w.size
    out = sliding_window_view(img, n, axis=0) @ w
    out = sliding_window_view(out, n, axis=1) @ w
    return out


def _filt_adjoint(g: np.ndarray, w: np.ndarray, shape) -> np.ndarray:
    """Adjoint of _filt_valid; for a symmetric window this is full-mode
    convolution, implemented as valid correlation of the zero-padded input."""
    n = w.size
    pad = n - 1
    gp = np.zeros((g.shape[0] + 2 * pad, g.shape[1] + 2 * pad))
    gp[pad:pad + g.shape[0], pad:pad + g.shape[1]] = g
    out = _filt_valid(gp, w)
    assert out.shape == tuple(shape)
    return out


def _ssim_channel_stats(x: np.ndarray, y: np.ndarray, w: np.ndarray):
    mx = _filt_valid(x, w)
    my = _filt_valid(y, w)
    sxx = _filt_valid(x * x, w) - mx * mx
    syy = _filt_valid(y * y, w) - my * my
    sxy = _filt_valid(x * y, w) - mx * my
    c1 = SSIM_K1 * SSIM_K1
    c2 = SSIM_K2 * SSIM_K2
    a1 = 2 * mx * my + c1
    a2 = 2 * sxy + c2
    b1 = mx * mx + my * my + c1
    b2 = sxx + syy + c2
    return mx, my, sxy, a1, a2, b1, b2


def dssim_loss(render: np.ndarray, target: np.ndarray) -> float:
    """(1 - mean SSIM) / 2 with an 11x11 Gaussian window, sigma 1.5,
    k1 = 0.01, k2 = 0.03, dynamic range 1, averaged over channels."""
    if render.shape != target.shape:
        raise ValueError("image shape mismatch")
    h, w_, _ = render.shape
    if h < SSIM_WINDOW or w_ < SSIM_WINDOW:
        raise ValueError("image smaller than the SSIM window")
    w = _gaussian_window()
    total = 0.0
    for c in range(3):
        _, _, _, a1, a2, b1, b2 = _ssim_channel_stats(render[:, :, c],
                                                      target[:, :, c], w)
        total += float(np.mean(a1 * a2 / (b1 * b2)))
    return (1.0 - total / 3.0) / 2.0


def vjp_dssim_loss(render: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Gradient of dssim_loss w.r.t. the rendered image."""
    h, w_, _ = render.shape
    w = _gaussian_window()
    grad = np.zeros_like(render)
    for c in range(3):
        x = render[:, :, c]
        y = target[:, :, c]
        mx, my, _, a1, a2, b1, b2 = _ssim_channel_stats(x, y, w)
        n_pos = a1.size
        cot_s = np.full_like(a1, -0.5 / (3.0 * n_pos))  # d dssim / d ssim map
        s = a1 * a2 / (b1 * b2)
        d_a1 = cot_s * a2 / (b1 * b2)
        d_a2 = cot_s * a1 / (b1 * b2)
        d_b1 = -cot_s * s / b1
        d_b2 = -cot_s * s / b2
        d_mx = 2 * my * d_a1 + 2 * mx * d_b1
        d_sxy = 2 * d_a2
        d_sxx = d_b2
        # sxx = filt(x^2) - mx^2; sxy = filt(x y) - mx my
        d_mx = d_mx - 2 * mx * d_sxx - my * d_sxy
        gx = _filt_adjoint(d_mx, w, x.shape)
        gx += 2 * x * _filt_adjoint(d_sxx, w, x.shape)
        gx += y * _filt_adjoint(d_sxy, w, x.shape)
        grad[:, :, c] = gx
    return grad


# ---------------------------------------------------------------------------
# perceptual term


class PyramidExtractor:
    """Fixed 3-level feature pyramid: per level the luminance image, its
    horizontal and vertical forward differences, and a 3x3 Laplacian.

    A stand-in for a learned feature extractor behind the same interface:
    features(img) -> list of (level, name, array); vjp(img, cotangents)
    pulls feature cotangents back to the RGB image.
    """

    levels = 3

    def _luminance(self, img: np.ndarray) -> np.ndarray:
        return img @ LUMA

    @staticmethod
    def _pool(y: np.ndarray) -> np.ndarray:
        h, w = y.shape
        y = y[: h - h % 2, : w - w % 2]
        return 0.25 * (y[0::2, 0::2] + y[1::2, 0::2] + y[0::2, 1::2] + y[1::2, 1::2])

    @staticmethod
    def _pool_adjoint(g: np.ndarray, shape) -> np.ndarray:
        out = np.zeros(shape)
        out[0:2 * g.shape[0]:2, 0:2 * g.shape[1]:2] = 0.25 * g
        out[1:2 * g.shape[0]:2, 0:2 * g.shape[1]:2] = 0.25 * g
        out[0:2 * g.shape[0]:2, 1:2 * g.shape[1]:2] = 0.25 * g
        out[1:2 * g.shape[0]:2, 1:2 * g.shape[1]:2] = 0.25 * g
        return out

    @staticmethod
    def _level_features(y: np.ndarray) -> list[np.ndarray]:
        gx = y[:, 1:] - y[:, :-1]
        gy = y[1:, :] - y[:-1, :]
        lap = (y[:-2, 1:-1] + y[2:, 1:-1] + y[1:-1, :-2] + y[1:-1, 2:]
               - 4.0 * y[1:-1, 1:-1])
        return [y, gx, gy, lap]

    @staticmethod
    def _level_adjoint(cots: list[np.ndarray], shape) -> np.ndarray:
        d_y = np.zeros(shape)
        d_y += cots[0]
        gx = cots[1]
        d_y[:, 1:] += gx
        d_y[:, :-1] -= gx
        gy = cots[2]
        d_y[1:, :] += gy
        d_y[:-1, :] -= gy
        lap = cots[3]
        d_y[:-2, 1:-1] += lap
        d_y[2:, 1:-1] += lap
        d_y[1:-1, :-2] += lap
        d_y[1:-1, 2:] += lap
        d_y[1:-1, 1:-1] -= 4.0 * lap
        return d_y

    def features(self, img: np.ndarray) -> list[list[np.ndarray]]:
        y = self._luminance(img)
        out = []
        for _ in range(self.levels):
            out.append(self._level_features(y))
            y = self._pool(y)
        return out

    def vjp(self, img: np.ndarray, cots: list[list[np.ndarray]]) -> np.ndarray:
        ys = [self._luminance(img)]
        for _ in range(self.levels - 1):
            ys.append(self._pool(ys[-1]))
        d_y = np.zeros_like(ys[-1])
        for lvl in range(self.levels - 1, -1, -1):
            d_y = d_y + self._level_adjoint(cots[lvl], ys[lvl].shape)
            if lvl > 0:
                d_y = self._pool_adjoint(d_y, ys[lvl - 1].shape)
        return d_y[:, :, None] * LUMA[None, None, :]


def perceptual_loss(extractor, render: np.ndarray, target: np.ndarray) -> float:
    """Sum over pyramid levels of the mean squared feature difference
    (averaged over the features of each level)."""
    fa = extractor.features(render)
    fb = extractor.features(target)
    total = 0.0
    for la, lb in zip(fa, fb):
        level = 0.0
        for a, b in zip(la, lb):
            d = a - b
            level += float(np.mean(d * d))
        total += level / len(la)
    return total


def vjp_perceptual_loss(extractor, render: np.ndarray, target: np.ndarray) -> np.ndarray:
    fa = extractor.features(render)
    fb = extractor.features(target)
    cots = []
    for la, lb in zip(fa, fb):
        cots.append([2.0 * (a - b) / (a.size * len(la)) for a, b in zip(la, lb)])
    return extractor.vjp(render, cots)


# ---------------------------------------------------------------------------
# geometric binding term


def _binding_mask(gs: RenderOutputs, maps: MeshMaps, mask: np.ndarray) -> np.ndarray:
    return mask & maps.coverage & (gs.alpha > 0.5)


def binding_loss(gs: RenderOutputs, maps: MeshMaps, mask: np.ndarray) -> float:
    """L2 depth and normal discrepancy between the splat render and the
    rasterized mesh, over mask AND coverage AND (alpha > 0.5), normalized
    by the masked pixel count. Zero when the effective mask is empty."""
    m = _binding_mask(gs, maps, mask)
    n = int(m.sum())
    if n == 0:
        return 0.0
    dd = (maps.depth - gs.depth)[m]
    dn = (maps.normal - gs.normal)[m]
    return float(math.sqrt(np.sum(dd * dd)) / n + math.sqrt(np.sum(dn * dn)) / n)


def vjp_binding_loss(gs: RenderOutputs, maps: MeshMaps, mask: np.ndarray) -> dict:
    """Gradients w.r.t. both renderers' maps; the effective mask is treated
    as a constant. Keys: depth_gs, normal_gs, depth_mesh, normal_mesh."""
    h, w = gs.alpha.shape
    out = {
        "depth_gs": np.zeros((h, w)),
        "normal_gs": np.zeros((h, w, 3)),
        "depth_mesh": np.zeros((h, w)),
        "normal_mesh": np.zeros((h, w, 3)),
    }
    m = _binding_mask(gs, maps, mask)
    n = int(m.sum())
    if n == 0:
        return out
    dd = (maps.depth - gs.depth)[m]
    dn = (maps.normal - gs.normal)[m]
    sd = math.sqrt(np.sum(dd * dd))
    sn = math.sqrt(np.sum(dn * dn))
    if sd > 1e-20:
        g = dd / (n * sd)
        out["depth_mesh"][m] = g
        out["depth_gs"][m] = -g
    if sn > 1e-20:
        g = dn / (n * sn)
        out["normal_mesh"][m] = g
        out["normal_gs"][m] = -g
    return out


# ---------------------------------------------------------------------------
# landmark term


def _project_landmarks(pred_3d: np.ndarray, camera: Camera):
    cam = pred_3d @ camera.rotation.T + camera.translation
    z = cam[:, 2]
    in_front = z > 1e-6
    safe_z = np.where(in_front, z, 1.0)
    u = camera.fx * cam[:, 0] / safe_z + camera.cx
    v = camera.fy * cam[:, 1] / safe_z + camera.cy
    return np.stack([u, v], axis=1), cam, in_front


def landmark_loss(pred_3d: np.ndarray, sup: Supervision) -> float:
    """Mean squared reprojection error over visible landmarks, pixel
    coordinates normalized by the image width before squaring."""
    px, _, in_front = _project_landmarks(pred_3d, sup.camera)
    vis = sup.visible & in_front
    n = int(vis.sum())
    if n == 0:
        warnings.warn("landmark_loss: no visible landmarks", RuntimeWarning)
        return 0.0
    d = (px[vis] - sup.landmarks[vis]) / sup.camera.width
    return float(np.sum(d * d) / n)


def vjp_landmark_loss(pred_3d: np.ndarray, sup: Supervision) -> np.ndarray:
    px, cam, in_front = _project_landmarks(pred_3d, sup.camera)
    vis = sup.visible & in_front
    grad = np.zeros_like(pred_3d)
    n = int(vis.sum())
    if n == 0:
        return grad
    w = sup.camera.width
    d_px = np.zeros_like(px)
    d_px[vis] = 2.0 * (px[vis] - sup.landmarks[vis]) / (w * w * n)
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    safe_z = np.where(in_front, z, 1.0)
    d_cam = np.zeros_like(cam)
    d_cam[:, 0] = d_px[:, 0] * sup.camera.fx / safe_z
    d_cam[:, 1] = d_px[:, 1] * sup.camera.fy / safe_z
    d_cam[:, 2] = -(d_px[:, 0] * sup.camera.fx * x
                    + d_px[:, 1] * sup.camera.fy * y) / (safe_z * safe_z)
    d_cam[~vis] = 0.0
    return d_cam @ sup.camera.rotation


# ---------------------------------------------------------------------------
# regularization and totals


def reg_loss(beta: np.ndarray, psi: np.ndarray, weights: LossWeights) -> float:
    return float(weights.w_reg_shape * np.sum(beta * beta)
                 + weights.w_reg_expr * np.sum(psi * psi))


def vjp_reg_loss(beta: np.ndarray, psi: np.ndarray, weights: LossWeights) -> dict:
    return {"beta": 2.0 * weights.w_reg_shape * beta,
            "psi": 2.0 * weights.w_reg_expr * psi}


STAGE2_TERMS = ("pixel", "dssim", "perc", "binding")


def total_loss(stage: int, view_terms: list[dict], beta: np.ndarray,
               psi: np.ndarray, weights: LossWeights) -> tuple[float, dict]:
    """Combine per-view raw term values into the staged objective.

    View-dependent terms are averaged over views and weighted; the
    regularizer is applied once. Stage 1 uses only landmarks and
    regularization; stage 2 adds the photometric and binding terms.
    Returns (total, breakdown); the breakdown holds the weighted
    contributions and sums to the total.
    """
    assert stage in (1, 2), "stage must be 1 or 2"
    assert view_terms, "at least one view required"
    n = len(view_terms)

    def mean(key: str) -> float:
        return sum(v[key] for v in view_terms) / n

    breakdown = {
        "lmk": weights.w_lmk * mean("lmk"),
        "reg": reg_loss(beta, psi, weights),
    }
    for key in STAGE2_TERMS:
        breakdown[key] = 0.0
    if stage == 2:
        breakdown["pixel"] = weights.w_pixel * mean("pixel")
        breakdown["dssim"] = weights.w_dssim * mean("dssim")
        breakdown["perc"] = weights.w_perc * mean("perc")
        breakdown["binding"] = weights.w_binding * mean("binding")
    total = float(sum(breakdown.values()))
    breakdown["total"] = total
    return total, breakdown
