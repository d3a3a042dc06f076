"""Finite-difference verification for every registered gradient block.

Each block builds a seeded random instance, exposes the objective as a
function of one flat parameter vector together with its analytic gradient,
and is probed at >= 64 randomly chosen coordinates with central differences
in double precision. Relative error uses a per-block absolute floor so that
coordinates with near-zero gradient do not divide by noise:

    rel = |analytic - numeric| / max(|analytic|, |numeric|, floor)

`run_suite` returns a JSON-ready report:

    {"tolerance": float, "passed": bool, "runtime_sec": float,
     "blocks": [{"name": str, "max_rel_err": float, "n_probes": int,
                 "seconds": float, "passed": bool}]}

`inject_fault` perturbs the analytic gradient of one named block; the suite
must then fail, which is how the reporting path itself is tested.
"""

import time
import zlib
from dataclasses import dataclass

import numpy as np
from numpy.random import default_rng

from . import fit, gsurf
from . import triplane as tp_mod
from .losses import (
    LossWeights,
    PyramidExtractor,
    Supervision,
    binding_loss,
    dssim_loss,
    landmark_loss,
    perceptual_loss,
    pixel_loss,
    reg_loss,
    vjp_binding_loss,
    vjp_dssim_loss,
    vjp_landmark_loss,
    vjp_perceptual_loss,
    vjp_pixel_loss,
    vjp_reg_loss,
)
from .meshrast import raster_mesh, raster_mesh_vjp
from .model import FlameParams, synth_model
from .morph import decode_mesh, landmarks, vjp_decode_mesh, vjp_landmarks
from .splat import Camera, look_at, render, render_vjp

DEFAULT_TOLERANCE = 1e-4
MIN_PROBES = 64

BLOCKS: dict = {}


def register(name):
    def wrap(fn):
        BLOCKS[name] = fn
        return fn
    return wrap


@dataclass
class Check:
    """One flat-vector objective with analytic gradient."""

    f: callable  # x -> float
    g: callable  # x -> flat gradient
    x0: np.ndarray
    eps: float
    floor: float


def fd_probe(check: Check, n_probes: int = MIN_PROBES, seed: int = 0,
             fault: float = 0.0) -> tuple[float, int]:
    """Max relative error of the analytic gradient over probed coordinates."""
    x0 = check.x0.astype(np.float64).copy()
    grad = np.asarray(check.g(x0), dtype=np.float64).reshape(-1)
    assert grad.shape == x0.shape
    if fault != 0.0:
        grad = grad * (1.0 + fault)
    rng = default_rng(seed)
    n = min(n_probes, x0.size)
    idx = rng.choice(x0.size, size=n, replace=False)
    worst = 0.0
    for i in idx:
        xp = x0.copy()
        xp[i] += check.eps
        xm = x0.copy()
        xm[i] -= check.eps
        num = (check.f(xp) - check.f(xm)) / (2.0 * check.eps)
        rel = abs(num - grad[i]) / max(abs(num), abs(grad[i]), check.floor)
        worst = max(worst, rel)
    return worst, n


def _pack(arrays) -> np.ndarray:
    return np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1) for a in arrays])


def _unpack(x, shapes):
    out = []
    k = 0
    for shp in shapes:
        size = int(np.prod(shp))
        out.append(x[k:k + size].reshape(shp))
        k += size
    assert k == x.size
    return out


# ---------------------------------------------------------------------------
# morphable model


def _suite_assets():
    # wide bases so even coefficient-space blocks expose >= 64 coordinates
    return synth_model(seed=23, n_verts_target=162, n_shape=40, n_expr=24)


def _random_params(assets, rng) -> np.ndarray:
    return _pack([
        rng.normal(0.0, 0.4, assets.n_shape),
        rng.normal(0.0, 0.3, assets.n_expr),
        rng.uniform(-0.3, 0.3, 6),
        rng.uniform(-0.1, 0.1, 1),
        rng.uniform(-0.2, 0.2, 3),
    ])


def _params_of(assets, x) -> FlameParams:
    beta, psi, theta, logs, t = _unpack(
        x, [(assets.n_shape,), (assets.n_expr,), (6,), (1,), (3,)])
    return FlameParams(beta=beta, psi=psi, theta=theta,
                       scale=float(np.exp(logs[0])), translation=t)


def _flame_grad_vector(g: dict) -> np.ndarray:
    return _pack([g["beta"], g["psi"], g["theta"],
                  np.atleast_1d(g["log_scale"]), g["translation"]])


@register("morph.decode")
def _check_morph_decode() -> Check:
    assets = _suite_assets()
    rng = default_rng(11)
    x0 = _random_params(assets, rng)
    w = rng.normal(size=(assets.n_verts, 3))

    def f(x):
        return float(np.sum(w * decode_mesh(assets, _params_of(assets, x)).vertices))

    def g(x):
        return _flame_grad_vector(
            vjp_decode_mesh(assets, _params_of(assets, x), w))

    return Check(f, g, x0, eps=1e-6, floor=1e-6)


@register("morph.landmarks")
def _check_morph_landmarks() -> Check:
    assets = _suite_assets()
    rng = default_rng(12)
    x0 = _random_params(assets, rng)
    w = rng.normal(size=(68, 3))

    def f(x):
        mesh = decode_mesh(assets, _params_of(assets, x))
        return float(np.sum(w * landmarks(assets, mesh)))

    def g(x):
        params = _params_of(assets, x)
        d_verts = vjp_landmarks(assets, assets.n_verts, w)
        return _flame_grad_vector(vjp_decode_mesh(assets, params, d_verts))

    return Check(f, g, x0, eps=1e-6, floor=1e-6)


# ---------------------------------------------------------------------------
# triplane field and heads


@register("triplane.query")
def _check_triplane_query() -> Check:
    rng = default_rng(21)
    tp = tp_mod.init_triplane(3, resolution=8, channels=4)
    feats0 = rng.normal(0.0, 0.2, tp.features.shape)
    # keep clear of the clamp saturation and of exact grid lines
    pts0 = rng.uniform(-0.83, 0.83, (40, 3))
    w = rng.normal(size=(40, 12))
    shapes = [feats0.shape, pts0.shape]
    x0 = _pack([feats0, pts0])

    def f(x):
        feats, pts = _unpack(x, shapes)
        return float(np.sum(w * tp_mod.query(tp_mod.Triplane(features=feats), pts)))

    def g(x):
        feats, pts = _unpack(x, shapes)
        d_feats, d_pts = tp_mod.vjp_query(tp_mod.Triplane(features=feats), pts, w)
        return _pack([d_feats, d_pts])

    return Check(f, g, x0, eps=1e-6, floor=1e-6)


@register("triplane.decode")
def _check_triplane_decode() -> Check:
    rng = default_rng(22)
    mlp = tp_mod.init_attribute_mlp(5, in_dim=12, hidden=16, out_dim=10)
    flat0 = mlp.flatten()
    x_in0 = rng.normal(0.0, 0.8, (30, 12))
    w = rng.normal(size=(30, 10))
    shapes = [flat0.shape, x_in0.shape]
    x0 = _pack([flat0, x_in0])

    def f(x):
        flat, xin = _unpack(x, shapes)
        return float(np.sum(w * tp_mod.decode_attributes(mlp.with_flat(flat), xin)))

    def g(x):
        flat, xin = _unpack(x, shapes)
        d_x, d_flat = tp_mod.vjp_decode_attributes(mlp.with_flat(flat), xin, w)
        return _pack([d_flat, d_x])

    # ReLU kinks sit at exact zero pre-activations; the random instance
    # stays away from them at this eps
    return Check(f, g, x0, eps=1e-7, floor=1e-6)


@register("triplane.gate")
def _check_triplane_gate() -> Check:
    rng = default_rng(24)
    head = tp_mod.init_gate_head(7, token_dim=6, out_dim=5, hidden=8)
    flat0 = head.flatten()
    tokens0 = rng.normal(size=(12, 6))
    w = rng.normal(size=5)
    shapes = [flat0.shape, tokens0.shape]
    x0 = _pack([flat0, tokens0])

    def f(x):
        flat, tok = _unpack(x, shapes)
        return float(np.sum(w * tp_mod.regress_params(head.with_flat(flat), tok)))

    def g(x):
        flat, tok = _unpack(x, shapes)
        d_tok, d_flat = tp_mod.vjp_regress_params(head.with_flat(flat), tok, w)
        return _pack([d_flat, d_tok])

    return Check(f, g, x0, eps=1e-6, floor=1e-6)


# ---------------------------------------------------------------------------
# surface gaussians


@register("gsurf.activate")
def _check_gsurf_activate() -> Check:
    rng = default_rng(31)
    raw0 = rng.normal(0.0, 1.0, (25, 10))
    w_op = rng.normal(size=25)
    w_sc = rng.normal(size=(25, 2))
    w_q = rng.normal(size=(25, 4))
    w_c = rng.normal(size=(25, 3))

    def f(x):
        op, sc, q, c = gsurf.activate(x.reshape(25, 10))
        return float(np.sum(w_op * op) + np.sum(w_sc * sc)
                     + np.sum(w_q * q) + np.sum(w_c * c))

    def g(x):
        return gsurf.vjp_activate(x.reshape(25, 10), w_op, w_sc, w_q, w_c).reshape(-1)

    return Check(f, g, raw0.reshape(-1), eps=1e-6, floor=1e-6)


@register("gsurf.build")
def _check_gsurf_build() -> Check:
    assets = _suite_assets()
    rng = default_rng(32)
    params = FlameParams(beta=rng.normal(0.0, 0.4, assets.n_shape),
                         psi=rng.normal(0.0, 0.3, assets.n_expr))
    mesh = decode_mesh(assets, params)
    samples = gsurf.sample_points(mesh, 50, seed=6)
    tp = tp_mod.init_triplane(4)
    feats0 = rng.normal(0.0, 0.2, tp.features.shape)
    mlp = tp_mod.init_attribute_mlp(9, in_dim=3 * tp.channels)
    flat0 = mlp.flatten()
    cot = {
        "centers": rng.normal(size=(50, 3)),
        "t_u": rng.normal(size=(50, 3)),
        "t_v": rng.normal(size=(50, 3)),
        "normals": rng.normal(size=(50, 3)),
        "scales": rng.normal(size=(50, 2)),
        "opacity": rng.normal(size=50),
        "color": rng.normal(size=(50, 3)),
    }
    shapes = [mesh.vertices.shape, feats0.shape, flat0.shape]
    x0 = _pack([mesh.vertices, feats0, flat0])

    def build(x):
        verts, feats, flat = _unpack(x, shapes)
        from .morph import Mesh, vertex_normals
        m = Mesh(vertices=verts, faces=mesh.faces,
                 normals=vertex_normals(verts, mesh.faces))
        return m, tp_mod.Triplane(features=feats), mlp.with_flat(flat)

    def f(x):
        m, tpx, mlpx = build(x)
        s = gsurf.build_splats(m, samples, tpx, mlpx)
        return float(sum(np.sum(cot[k] * getattr(s, k)) for k in cot))

    def g(x):
        m, tpx, mlpx = build(x)
        d_verts, d_feats, d_flat = gsurf.vjp_build_splats(m, samples, tpx, mlpx, cot)
        return _pack([d_verts, d_feats, d_flat])

    return Check(f, g, x0, eps=1e-6, floor=1e-5)


# ---------------------------------------------------------------------------
# renderers


def _splat_scene(n=14, seed=3, size=24):
    """Gradient-friendly scene: facing frames, moderate opacity, spread depths."""
    rng = default_rng(seed)
    eye = np.array([0.0, 0.0, 3.2])
    r, t = look_at(eye, (0.0, 0.0, 0.0))
    cam = Camera(rotation=r, translation=t, fx=28.0, fy=28.0,
                 cx=size / 2.0, cy=size / 2.0, width=size, height=size)
    while True:
        centers = rng.uniform(-0.7, 0.7, (n, 3)) * np.array([1.0, 1.0, 0.5])
        z = (centers @ r.T + t)[:, 2]
        if np.diff(np.sort(z)).min() > 2e-3:
            break
    to_eye = eye - centers
    to_eye /= np.linalg.norm(to_eye, axis=1, keepdims=True)
    base = np.tile([0.0, 0.0, 1.0], (n, 1))
    quat = gsurf.quat_between(base, to_eye)
    frames = gsurf.quat_to_mat(quat)
    splats = gsurf.Splats(
        centers=centers,
        t_u=frames[:, :, 0].copy(),
        t_v=frames[:, :, 1].copy(),
        normals=frames[:, :, 2].copy(),
        scales=rng.uniform(0.10, 0.22, (n, 2)),
        opacity=rng.uniform(0.15, 0.30, n),
        color=rng.uniform(0.05, 0.95, (n, 3)),
        quat=quat,
    )
    return splats, cam


@register("splat.render")
def _check_splat_render() -> Check:
    splats, cam = _splat_scene()
    bg = np.array([0.15, 0.35, 0.55])
    rng = default_rng(8)
    out = render(splats, cam, background=bg)
    stable = (out.alpha > 0.25).astype(np.float64)
    cots = {
        "color": rng.normal(size=out.color.shape),
        "alpha": rng.normal(size=out.alpha.shape),
        "depth": rng.normal(size=out.depth.shape) * stable,
        "normal": rng.normal(size=out.normal.shape) * stable[:, :, None],
    }
    fields = ("centers", "t_u", "t_v", "normals", "scales", "opacity", "color")
    shapes = [getattr(splats, k).shape for k in fields]
    x0 = _pack([getattr(splats, k) for k in fields])

    def rebuild(x):
        vals = _unpack(x, shapes)
        kw = dict(zip(fields, vals))
        return gsurf.Splats(quat=splats.quat, **kw)

    def f(x):
        o = render(rebuild(x), cam, background=bg)
        return float(np.sum(cots["color"] * o.color) + np.sum(cots["alpha"] * o.alpha)
                     + np.sum(cots["depth"] * o.depth) + np.sum(cots["normal"] * o.normal))

    def g(x):
        grads = render_vjp(rebuild(x), cam, bg, cots)
        return _pack([grads[k] for k in fields])

    return Check(f, g, x0, eps=1e-5, floor=1e-4)


@register("meshrast.raster")
def _check_meshrast() -> Check:
    assets = _suite_assets()
    rng = default_rng(41)
    params = FlameParams(beta=rng.normal(0.0, 0.4, assets.n_shape),
                         psi=rng.normal(0.0, 0.3, assets.n_expr))
    mesh = decode_mesh(assets, params)
    r, t = look_at((0.5, 0.3, 2.6), (0.0, 0.0, 0.0))
    cam = Camera(rotation=r, translation=t, fx=30.0, fy=30.0,
                 cx=16.0, cy=16.0, width=32, height=32)
    maps = raster_mesh(mesh, cam)
    # probe only pixels that stay inside their triangle under perturbation
    view_dot = maps.normal[:, :, 2]
    stable = maps.coverage & (maps.bary.min(axis=2) > 0.12) & (view_dot < -0.45)
    cot_d = rng.normal(size=maps.depth.shape) * stable
    cot_n = rng.normal(size=maps.normal.shape) * stable[:, :, None]
    from .morph import Mesh, vertex_normals

    def f(x):
        verts = x.reshape(-1, 3)
        m = Mesh(vertices=verts, faces=mesh.faces,
                 normals=vertex_normals(verts, mesh.faces))
        mp = raster_mesh(m, cam)
        return float(np.sum(cot_d * mp.depth) + np.sum(cot_n * mp.normal))

    def g(x):
        verts = x.reshape(-1, 3)
        m = Mesh(vertices=verts, faces=mesh.faces,
                 normals=vertex_normals(verts, mesh.faces))
        return raster_mesh_vjp(m, cam, cot_d, cot_n).reshape(-1)

    return Check(f, g, mesh.vertices.reshape(-1).copy(), eps=1e-6, floor=1e-4)


# ---------------------------------------------------------------------------
# losses


def _loss_fixture(size=20, seed=51):
    rng = default_rng(seed)
    img = rng.uniform(0.0, 1.0, (size, size, 3))
    target = rng.uniform(0.0, 1.0, (size, size, 3))
    mask = np.zeros((size, size), dtype=bool)
    mask[4:15, 5:16] = True
    r, t = look_at((0.0, 0.0, 2.5), (0.0, 0.0, 0.0))
    cam = Camera(rotation=r, translation=t, fx=22.0, fy=22.0,
                 cx=size / 2.0, cy=size / 2.0, width=size, height=size)
    lmk = rng.uniform(2.0, size - 2.0, (68, 2))
    visible = rng.uniform(size=68) > 0.3
    sup = Supervision(image=target, mask=mask, landmarks=lmk,
                      visible=visible, camera=cam)
    return img, sup, rng


@register("loss.pixel")
def _check_pixel() -> Check:
    img, sup, _ = _loss_fixture()

    def f(x):
        return float(pixel_loss(x.reshape(img.shape), sup, 0.7))

    def g(x):
        return vjp_pixel_loss(x.reshape(img.shape), sup, 0.7).reshape(-1)

    return Check(f, g, img.reshape(-1).copy(), eps=1e-6, floor=1e-6)


@register("loss.dssim")
def _check_dssim() -> Check:
    img, sup, _ = _loss_fixture(seed=52)

    def f(x):
        return float(dssim_loss(x.reshape(img.shape), sup.image))

    def g(x):
        return vjp_dssim_loss(x.reshape(img.shape), sup.image).reshape(-1)

    return Check(f, g, img.reshape(-1).copy(), eps=1e-6, floor=1e-6)


@register("loss.perceptual")
def _check_perceptual() -> Check:
    img, sup, _ = _loss_fixture(size=24, seed=53)
    extractor = PyramidExtractor()

    def f(x):
        return float(perceptual_loss(extractor, x.reshape(img.shape), sup.image))

    def g(x):
        return vjp_perceptual_loss(extractor, x.reshape(img.shape), sup.image).reshape(-1)

    return Check(f, g, img.reshape(-1).copy(), eps=1e-6, floor=1e-6)


@register("loss.binding")
def _check_binding() -> Check:
    from .meshrast import MeshMaps
    from .splat import RenderOutputs

    rng = default_rng(54)
    size = 16
    alpha = rng.uniform(0.6, 1.0, (size, size))
    mask = np.zeros((size, size), dtype=bool)
    mask[3:13, 2:12] = True
    coverage = np.zeros((size, size), dtype=bool)
    coverage[2:14, 3:13] = True
    d_gs0 = rng.uniform(1.5, 2.5, (size, size))
    n_gs0 = rng.normal(size=(size, size, 3))
    d_m0 = rng.uniform(1.5, 2.5, (size, size))
    n_m0 = rng.normal(size=(size, size, 3))
    color = np.zeros((size, size, 3))
    bary = np.full((size, size, 3), 1.0 / 3.0)
    tri = np.zeros((size, size), dtype=np.int64)
    shapes = [d_gs0.shape, n_gs0.shape, d_m0.shape, n_m0.shape]
    x0 = _pack([d_gs0, n_gs0, d_m0, n_m0])

    def build(x):
        d_gs, n_gs, d_m, n_m = _unpack(x, shapes)
        out = RenderOutputs(color=color, alpha=alpha, depth=d_gs, normal=n_gs)
        maps = MeshMaps(depth=d_m, normal=n_m, coverage=coverage,
                        tri_index=tri, bary=bary)
        return out, maps

    def f(x):
        out, maps = build(x)
        return float(binding_loss(out, maps, mask))

    def g(x):
        out, maps = build(x)
        d = vjp_binding_loss(out, maps, mask)
        return _pack([d["depth_gs"], d["normal_gs"], d["depth_mesh"], d["normal_mesh"]])

    return Check(f, g, x0, eps=1e-6, floor=1e-6)


@register("loss.landmark")
def _check_landmark() -> Check:
    _, sup, rng = _loss_fixture(seed=55)
    lmk3d0 = rng.uniform(-0.4, 0.4, (68, 3))

    def f(x):
        return float(landmark_loss(x.reshape(68, 3), sup))

    def g(x):
        return vjp_landmark_loss(x.reshape(68, 3), sup).reshape(-1)

    return Check(f, g, lmk3d0.reshape(-1).copy(), eps=1e-6, floor=1e-6)


@register("loss.reg")
def _check_reg() -> Check:
    rng = default_rng(56)
    beta0 = rng.normal(size=40)
    psi0 = rng.normal(size=24)
    w = LossWeights()
    shapes = [beta0.shape, psi0.shape]
    x0 = _pack([beta0, psi0])

    def f(x):
        beta, psi = _unpack(x, shapes)
        return float(reg_loss(beta, psi, w))

    def g(x):
        beta, psi = _unpack(x, shapes)
        d = vjp_reg_loss(beta, psi, w)
        return _pack([d["beta"], d["psi"]])

    return Check(f, g, x0, eps=1e-6, floor=1e-6)


# ---------------------------------------------------------------------------
# end-to-end stage-II objective


@register("fit.stage2")
def _check_stage2() -> Check:
    assets = _suite_assets()
    rng = default_rng(61)
    from . import dataset as ds
    views, _ = ds.synth_subject(assets, [17, 0], n_views=1, res=64)
    config = fit.FitConfig(stage1_iters=0, stage2_iters=0, n_gaussians=60,
                           render_res=32)
    views = [fit._at_resolution(v, config.render_res) for v in views]
    state, proto = fit._init_state(assets, config)
    # start from a mildly perturbed state so every term is active
    state["beta"] = rng.normal(0.0, 0.2, assets.n_shape)
    state["psi"] = rng.normal(0.0, 0.15, assets.n_expr)
    state["theta"] = rng.uniform(-0.1, 0.1, 6)
    state["translation"] = rng.uniform(-0.05, 0.05, 3)
    mesh0 = decode_mesh(assets, fit._params_from_state(state))
    samples = gsurf.sample_points(mesh0, config.n_gaussians, config.seed)
    extractor = PyramidExtractor()
    order = ("beta", "psi", "theta", "log_scale", "translation",
             "triplane", "decoder")
    shapes = [state[k].shape for k in order]
    x0 = _pack([state[k] for k in order])

    def to_state(x):
        vals = _unpack(x, shapes)
        return dict(zip(order, vals))

    def f(x):
        total, _, _ = fit._stage2_eval(assets, views, to_state(x), config,
                                       proto, samples, extractor)
        return float(total)

    def g(x):
        _, _, grads = fit._stage2_eval(assets, views, to_state(x), config,
                                       proto, samples, extractor)
        return _pack([grads[k] for k in order])

    return Check(f, g, x0, eps=1e-5, floor=1e-4)


# ---------------------------------------------------------------------------
# suite runner


def run_block(name: str, tolerance: float = DEFAULT_TOLERANCE,
              n_probes: int = MIN_PROBES, fault: float = 0.0) -> dict:
    t0 = time.perf_counter()
    check = BLOCKS[name]()
    # crc32, not hash(): probe coordinates must not depend on the hash salt
    worst, n = fd_probe(check, n_probes=n_probes,
                        seed=zlib.crc32(name.encode()), fault=fault)
    return {
        "name": name,
        "max_rel_err": worst,
        "n_probes": n,
        "seconds": time.perf_counter() - t0,
        "passed": bool(worst <= tolerance),
    }


def run_suite(tolerance: float = DEFAULT_TOLERANCE, n_probes: int = MIN_PROBES,
              inject_fault: str | None = None) -> dict:
    if inject_fault is not None and inject_fault not in BLOCKS:
        raise KeyError(f"unknown block: {inject_fault!r}")
    t0 = time.perf_counter()
    blocks = []
    for name in sorted(BLOCKS):
        fault = 0.02 if name == inject_fault else 0.0
        blocks.append(run_block(name, tolerance, n_probes, fault))
    return {
        "tolerance": tolerance,
        "passed": all(b["passed"] for b in blocks),
        "runtime_sec": time.perf_counter() - t0,
        "blocks": blocks,
    }
