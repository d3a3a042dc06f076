"""Staged per-subject fitting and a toy gated parameter regressor.

Stage I aligns the morphable head to 2D landmarks (pose, scale, translation,
shape, expression only). Stage II unlocks the triplane and attribute decoder
and optimizes the full photometric + geometric objective through the splat
renderer and the mesh rasterizer. Every run is deterministic for a fixed
config + seed, and the persisted weights round-trip bitwise: the final state
is pushed through float32 before the closing renders so a reload reproduces
them exactly.
"""

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gsurf, images, tensorio
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
    total_loss,
    vjp_binding_loss,
    vjp_dssim_loss,
    vjp_landmark_loss,
    vjp_perceptual_loss,
    vjp_pixel_loss,
    vjp_reg_loss,
)
from .meshrast import raster_mesh, raster_mesh_vjp
from .model import FlameParams, ModelAssets
from .morph import decode_mesh, landmarks, vjp_decode_mesh, vjp_landmarks
from .splat import Camera, render, render_vjp

FLAME_BLOCKS = ("beta", "psi", "theta", "log_scale", "translation")
LOG_TERMS = ("total", "pixel", "dssim", "perc", "binding", "lmk", "reg")
SPLAT_COT_KEYS = ("centers", "t_u", "t_v", "normals", "scales", "opacity", "color")
REGRESSOR_LR = 3e-3

WEIGHTS_FILE = "weights.klrm"


@dataclass
class FitConfig:
    stage1_iters: int = 300
    stage2_iters: int = 1500
    lr_shape: float = 3e-2  # beta, psi
    lr_pose: float = 1e-2  # theta, log scale, translation
    lr_triplane: float = 1e-2
    lr_decoder: float = 2e-3
    stage2_warmup: int = 40  # appearance-only iterations at stage-II start
    stage2_geo_scale: float = 0.3  # morphable-block lr multiplier in stage II
    lr_final_scale: float = 1e-2  # lrs decay geometrically to lr * this per stage
    weights: LossWeights = field(default_factory=LossWeights)
    n_gaussians: int = 8000
    render_res: int = 192
    input_res: int = 224
    fix_translation_z: bool | None = None  # None: on for single view, off otherwise
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        assert self.stage1_iters >= 0 and self.stage2_iters >= 0
        assert self.render_res > 0 and self.input_res > 0
        assert self.n_gaussians >= 1
        assert self.stage2_warmup >= 0 and self.stage2_geo_scale >= 0.0
        assert 0.0 < self.lr_final_scale <= 1.0
        for lr in (self.lr_shape, self.lr_pose, self.lr_triplane, self.lr_decoder):
            assert lr > 0.0

    @property
    def total_iters(self) -> int:
        return self.stage1_iters + self.stage2_iters

    def to_dict(self) -> dict:
        return {
            "stage1_iters": self.stage1_iters,
            "stage2_iters": self.stage2_iters,
            "lr_shape": self.lr_shape,
            "lr_pose": self.lr_pose,
            "lr_triplane": self.lr_triplane,
            "lr_decoder": self.lr_decoder,
            "stage2_warmup": self.stage2_warmup,
            "stage2_geo_scale": self.stage2_geo_scale,
            "lr_final_scale": self.lr_final_scale,
            "n_gaussians": self.n_gaussians,
            "render_res": self.render_res,
            "input_res": self.input_res,
            "fix_translation_z": self.fix_translation_z,
            "seed": self.seed,
            "background": list(self.background),
        }


@dataclass(eq=False)
class FitResult:
    params: FlameParams
    triplane: tp_mod.Triplane
    decoder: tp_mod.AttributeMLP
    samples: gsurf.SurfaceSamples
    loss_log: list
    wall_clock: float
    renders: list
    gate: tp_mod.GateHead | None = None
    aborted: str | None = None
    meta: dict = field(default_factory=dict)


class Adam:
    """Per-block Adam; only keys with a learning rate are updated."""

    def __init__(self, lrs: dict, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lrs = dict(lrs)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, values: dict, grads: dict, lr_scale: float = 1.0) -> dict:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = dict(values)
        for key, lr in self.lrs.items():
            g = grads[key]
            if key not in self.m:
                self.m[key] = np.zeros_like(g)
                self.v[key] = np.zeros_like(g)
            self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * g * g
            out[key] = values[key] - lr * lr_scale * (self.m[key] / c1) / (np.sqrt(self.v[key] / c2) + self.eps)
        return out


# ---------------------------------------------------------------------------
# state plumbing


def _through_f32(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr, dtype=np.float32).astype(np.float64)


def _init_state(assets: ModelAssets, config: FitConfig) -> tuple[dict, tp_mod.AttributeMLP]:
    tp0 = tp_mod.init_triplane(config.seed)
    decoder = tp_mod.init_attribute_mlp(config.seed, in_dim=3 * tp0.channels)
    state = {
        "beta": np.zeros(assets.n_shape),
        "psi": np.zeros(assets.n_expr),
        "theta": np.zeros(6),
        "log_scale": np.zeros(1),
        "translation": np.zeros(3),
        "triplane": tp0.features,
        "decoder": decoder.flatten(),
    }
    return state, decoder


def _copy_state(state: dict) -> dict:
    return {k: v.copy() for k, v in state.items()}


def _params_from_state(state: dict) -> FlameParams:
    return FlameParams(
        beta=state["beta"].copy(),
        psi=state["psi"].copy(),
        theta=state["theta"].copy(),
        scale=float(np.exp(state["log_scale"][0])),
        translation=state["translation"].copy(),
    )


def _first_nonfinite(breakdown: dict) -> str | None:
    for key in ("pixel", "dssim", "perc", "binding", "lmk", "reg", "total"):
        if key in breakdown and not math.isfinite(breakdown[key]):
            return key
    return None


def _at_resolution(sup: Supervision, res: int) -> Supervision:
    """Resample a view (image, mask, landmarks, intrinsics) to res x res."""
    cam = sup.camera
    if cam.width == res and cam.height == res:
        return sup
    sx = res / cam.width
    sy = res / cam.height
    camera = Camera(rotation=cam.rotation, translation=cam.translation,
                    fx=cam.fx * sx, fy=cam.fy * sy, cx=cam.cx * sx, cy=cam.cy * sy,
                    width=res, height=res)
    return Supervision(
        image=images.resize_image(sup.image, res, res),
        mask=images.resize_image(sup.mask.astype(np.float64), res, res) > 0.5,
        landmarks=sup.landmarks * np.array([sx, sy]),
        visible=sup.visible,
        camera=camera,
    )


# ---------------------------------------------------------------------------
# objective evaluation


def _flame_grads(assets, params, d_vertices, weights) -> dict:
    flame = vjp_decode_mesh(assets, params, d_vertices)
    reg = vjp_reg_loss(params.beta, params.psi, weights)
    return {
        "beta": flame["beta"] + reg["beta"],
        "psi": flame["psi"] + reg["psi"],
        "theta": flame["theta"],
        "log_scale": np.array([flame["log_scale"]]),
        "translation": flame["translation"],
    }


def _stage1_eval(assets, views, state, config):
    params = _params_from_state(state)
    mesh = decode_mesh(assets, params)
    lms3d = landmarks(assets, mesh)
    n = len(views)
    w = config.weights
    view_terms = [{"lmk": landmark_loss(lms3d, sup)} for sup in views]
    d_lmk3d = np.zeros_like(lms3d)
    for sup in views:
        d_lmk3d += (w.w_lmk / n) * vjp_landmark_loss(lms3d, sup)
    d_vertices = vjp_landmarks(assets, assets.n_verts, d_lmk3d)
    grads = _flame_grads(assets, params, d_vertices, w)
    total, breakdown = total_loss(1, view_terms, params.beta, params.psi, w)
    return total, breakdown, grads


def _stage2_eval(assets, views, state, config, decoder_proto, samples, extractor):
    params = _params_from_state(state)
    mesh = decode_mesh(assets, params)
    tp = tp_mod.Triplane(features=state["triplane"])
    mlp = decoder_proto.with_flat(state["decoder"])
    splats = gsurf.build_splats(mesh, samples, tp, mlp)
    lms3d = landmarks(assets, mesh)
    n = len(views)
    w = config.weights

    view_terms = []
    splat_cots = {
        "centers": np.zeros((len(splats), 3)),
        "t_u": np.zeros((len(splats), 3)),
        "t_v": np.zeros((len(splats), 3)),
        "normals": np.zeros((len(splats), 3)),
        "scales": np.zeros((len(splats), 2)),
        "opacity": np.zeros(len(splats)),
        "color": np.zeros((len(splats), 3)),
    }
    d_vertices = np.zeros_like(mesh.vertices)
    d_lmk3d = np.zeros_like(lms3d)
    for sup in views:
        out = render(splats, sup.camera, config.background)
        maps = raster_mesh(mesh, sup.camera)
        view_terms.append({
            "pixel": pixel_loss(out.color, sup, w.lam),
            "dssim": dssim_loss(out.color, sup.image),
            "perc": perceptual_loss(extractor, out.color, sup.image),
            "binding": binding_loss(out, maps, sup.mask),
            "lmk": landmark_loss(lms3d, sup),
        })
        cot_color = (
            w.w_pixel * vjp_pixel_loss(out.color, sup, w.lam)
            + w.w_dssim * vjp_dssim_loss(out.color, sup.image)
            + w.w_perc * vjp_perceptual_loss(extractor, out.color, sup.image)
        ) / n
        bind = vjp_binding_loss(out, maps, sup.mask)
        sb = w.w_binding / n
        rg = render_vjp(splats, sup.camera, config.background, {
            "color": cot_color,
            "depth": sb * bind["depth_gs"],
            "normal": sb * bind["normal_gs"],
        })
        for key in SPLAT_COT_KEYS:
            splat_cots[key] += rg[key]
        d_vertices += raster_mesh_vjp(mesh, sup.camera, sb * bind["depth_mesh"],
                                      sb * bind["normal_mesh"], maps)
        d_lmk3d += (w.w_lmk / n) * vjp_landmark_loss(lms3d, sup)

    # frame cotangents flow through the quaternion inside vjp_build_splats,
    # so the renderer's own "quat" pull-back is deliberately not used here
    d_verts_splat, d_tp, d_mlp = gsurf.vjp_build_splats(mesh, samples, tp, mlp, splat_cots)
    d_vertices += d_verts_splat
    d_vertices += vjp_landmarks(assets, assets.n_verts, d_lmk3d)
    grads = _flame_grads(assets, params, d_vertices, w)
    grads["triplane"] = d_tp
    grads["decoder"] = d_mlp
    total, breakdown = total_loss(2, view_terms, params.beta, params.psi, w)
    return total, breakdown, grads


# ---------------------------------------------------------------------------
# the fit loop


def fit_subject(assets: ModelAssets, views: list, config: FitConfig | None = None) -> FitResult:
    config = config if config is not None else FitConfig()
    assert len(views) >= 1, "need at least one supervised view"
    t0 = time.perf_counter()
    fix_tz = config.fix_translation_z
    if fix_tz is None:
        fix_tz = len(views) == 1
    views = [_at_resolution(v, config.render_res) for v in views]

    state, decoder_proto = _init_state(assets, config)
    mesh0 = decode_mesh(assets, _params_from_state(state))
    raw_samples = gsurf.sample_points(mesh0, config.n_gaussians, config.seed)
    # barycentrics live in the float32 weight file; quantize up front so the
    # fit and any reload see identical sample positions
    samples = gsurf.SurfaceSamples(face_index=raw_samples.face_index,
                                   bary=_through_f32(raw_samples.bary))
    extractor = PyramidExtractor()

    log: list = []
    aborted = None
    prev = _copy_state(state)

    def run_stage(stage: int, iters: int, lrs: dict, eval_fn, warmup: int = 0) -> None:
        nonlocal state, prev, aborted
        opt = Adam(lrs)
        span = max(iters - 1, 1)
        for it in range(iters):
            total, breakdown, grads = eval_fn(state)
            bad = _first_nonfinite(breakdown)
            if bad is not None:
                aborted = f"non-finite {bad} term at iteration {len(log)}"
                state = prev
                return
            entry = {"iter": len(log), "stage": stage}
            for key in LOG_TERMS:
                entry[key] = breakdown[key]
            log.append(entry)
            if it < warmup:
                # appearance settles before geometry unlocks
                for key in FLAME_BLOCKS:
                    grads[key] = np.zeros_like(grads[key])
            if fix_tz:
                grads["translation"] = grads["translation"].copy()
                grads["translation"][2] = 0.0
            prev = _copy_state(state)
            state = opt.step(state, grads, lr_scale=config.lr_final_scale ** (it / span))

    flame_lrs = {
        "beta": config.lr_shape,
        "psi": config.lr_shape,
        "theta": config.lr_pose,
        "log_scale": config.lr_pose,
        "translation": config.lr_pose,
    }
    run_stage(1, config.stage1_iters, flame_lrs,
              lambda s: _stage1_eval(assets, views, s, config))
    if aborted is None:
        geo = config.stage2_geo_scale
        stage2_lrs = {k: v * geo for k, v in flame_lrs.items()}
        stage2_lrs["triplane"] = config.lr_triplane
        stage2_lrs["decoder"] = config.lr_decoder
        run_stage(2, config.stage2_iters, stage2_lrs,
                  lambda s: _stage2_eval(assets, views, s, config,
                                         decoder_proto, samples, extractor),
                  warmup=config.stage2_warmup)
    if aborted is None:
        assert len(log) == config.total_iters

    # persisted weights are float32; render the final images from the
    # quantized state so a save/load cycle reproduces them bitwise
    state["triplane"] = _through_f32(state["triplane"])
    state["decoder"] = _through_f32(state["decoder"])
    params = _params_from_state(state)
    mesh = decode_mesh(assets, params)
    tp = tp_mod.Triplane(features=state["triplane"])
    mlp = decoder_proto.with_flat(state["decoder"])
    splats = gsurf.build_splats(mesh, samples, tp, mlp)
    renders = [render(splats, v.camera, config.background).color for v in views]

    return FitResult(
        params=params,
        triplane=tp,
        decoder=mlp,
        samples=samples,
        loss_log=log,
        wall_clock=time.perf_counter() - t0,
        renders=renders,
        aborted=aborted,
        meta={"render_res": config.render_res,
              "background": list(config.background),
              "n_gaussians": config.n_gaussians,
              "seed": config.seed},
    )


def rebuild_splats(assets: ModelAssets, result: FitResult) -> gsurf.Splats:
    """Final splat set implied by a fit result (e.g. for novel-view renders)."""
    mesh = decode_mesh(assets, result.params)
    return gsurf.build_splats(mesh, result.samples, result.triplane, result.decoder)


def predict_multiview(assets: ModelAssets, fit_per_view: list) -> list:
    """Collect per-view parameter predictions for consistency metrics."""
    for r in fit_per_view:
        assert r.params.beta.shape == (assets.n_shape,)
        assert r.params.psi.shape == (assets.n_expr,)
    return [r.params.copy() for r in fit_per_view]


# ---------------------------------------------------------------------------
# persistence


def save_fit_result(out_dir, result: FitResult, config: FitConfig | None = None) -> None:
    out = Path(out_dir)
    (out / "renders").mkdir(parents=True, exist_ok=True)
    payload = result.params.to_dict()
    meta = dict(result.meta)
    meta["wall_clock"] = result.wall_clock
    meta["aborted"] = result.aborted
    if config is not None:
        meta["config"] = config.to_dict()
    payload["meta"] = meta
    (out / "params.json").write_text(json.dumps(payload, indent=2))

    tensors = {
        "triplane": result.triplane.features,
        "sample_face_index": result.samples.face_index.astype(np.float64),
        "sample_bary": result.samples.bary,
    }
    for name in result.decoder._FIELDS:
        tensors[f"decoder_{name}"] = getattr(result.decoder, name)
    if result.gate is not None:
        for name in result.gate._FIELDS:
            tensors[f"gate_{name}"] = getattr(result.gate, name)
    tensorio.save_tensors(out / WEIGHTS_FILE, tensors)

    with open(out / "losslog.jsonl", "w") as fh:
        for entry in result.loss_log:
            fh.write(json.dumps(entry) + "\n")
    for i, img in enumerate(result.renders):
        images.save_png(out / "renders" / f"{i:03d}.png", img)


def load_fit_result(out_dir) -> FitResult:
    out = Path(out_dir)
    payload = json.loads((out / "params.json").read_text())
    meta = payload.pop("meta", {})
    params = FlameParams.from_dict(payload)

    tensors = tensorio.load_tensors(out / WEIGHTS_FILE)
    triplane = tp_mod.Triplane(features=tensors["triplane"].astype(np.float64))
    decoder = tp_mod.AttributeMLP(**{
        name: tensors[f"decoder_{name}"].astype(np.float64)
        for name in tp_mod.AttributeMLP._FIELDS
    })
    samples = gsurf.SurfaceSamples(
        face_index=np.rint(tensors["sample_face_index"]).astype(np.int64),
        bary=tensors["sample_bary"].astype(np.float64),
    )
    gate = None
    if "gate_gw0" in tensors:
        gate = tp_mod.GateHead(**{
            name: tensors[f"gate_{name}"].astype(np.float64)
            for name in tp_mod.GateHead._FIELDS
        })

    log = []
    log_path = out / "losslog.jsonl"
    if log_path.exists():
        for line in log_path.read_text().splitlines():
            if line.strip():
                log.append(json.loads(line))
    renders = []
    render_dir = out / "renders"
    if render_dir.is_dir():
        for p in sorted(render_dir.glob("*.png")):
            renders.append(images.load_png(p))
    return FitResult(
        params=params, triplane=triplane, decoder=decoder, samples=samples,
        loss_log=log, wall_clock=float(meta.get("wall_clock", 0.0)),
        renders=renders, gate=gate, aborted=meta.get("aborted"), meta=meta,
    )


# ---------------------------------------------------------------------------
# toy gated regressor


def triplane_tokens(tp: tp_mod.Triplane) -> np.ndarray:
    """Flatten the three feature grids into a token set (3*R*R, C)."""
    return tp.features.reshape(-1, tp.features.shape[-1])


def _as_target(entry) -> np.ndarray:
    if isinstance(entry, FlameParams):
        return np.concatenate([entry.beta, entry.psi])
    return np.asarray(entry, dtype=np.float64).reshape(-1)


def regressor_loss(head: tp_mod.GateHead, corpus: list) -> tuple[float, np.ndarray]:
    """Mean over examples of per-example mean squared parameter error.

    Returns (loss, gradient w.r.t. the flattened head weights).
    """
    assert corpus
    total = 0.0
    grad = np.zeros_like(head.flatten())
    n = len(corpus)
    for tokens, target in corpus:
        pred = tp_mod.regress_params(head, tokens)
        diff = pred - target
        total += float(np.mean(diff * diff))
        cot = 2.0 * diff / (diff.size * n)
        _, d_flat = tp_mod.vjp_regress_params(head, tokens, cot)
        grad += d_flat
    return total / n, grad


def train_toy_regressor(assets: ModelAssets, corpus: list, epochs: int = 500,
                        seed: int = 0) -> tuple[tp_mod.GateHead, np.ndarray]:
    """Adam on the gate + readout weights; returns (head, per-epoch loss)."""
    assert epochs >= 1
    data = [(np.asarray(t, dtype=np.float64), _as_target(p)) for t, p in corpus]
    assert data, "empty corpus"
    token_dim = data[0][0].shape[1]
    out_dim = data[0][1].size
    for tokens, target in data:
        assert tokens.ndim == 2 and tokens.shape[1] == token_dim
        assert target.size == out_dim
    head = tp_mod.init_gate_head(seed, token_dim, out_dim)
    flat = head.flatten()
    opt = Adam({"head": REGRESSOR_LR})
    curve = np.empty(epochs)
    for e in range(epochs):
        loss, grad = regressor_loss(head, data)
        curve[e] = loss
        flat = opt.step({"head": flat}, {"head": grad})["head"]
        head = head.with_flat(flat)
    return head, curve
