"""Closed-loop acceptance gate for the whole toolkit.

Eight criteria, one test and one [PASS]/[FAIL] line each (the line prints
with -s and on failure; `pytest -v` shows the verdict per criterion either
way):

  1 finite-difference audit of every registered gradient block
  2 multi-view parameter recovery on five synthetic subjects
  3 cross-view consistency of single-view fits
  4 binding-loss ablation: direction of the geometry change
  5 staging ablation: skipping the landmark stage breaks pose convergence
  6 renderer closed forms, alpha fuzzing, thread-count determinism
  7 loss, variance, and alignment scalar oracles
  8 field-of-view table of the normalized focal parameterization

Criteria 2-5 run full staged fits; on one core the module takes on the
order of two hours. Everything is seed-pinned and deterministic.
"""

import math
import time

import numpy as np
from numba import config as numba_config
from numba import set_num_threads
from numpy.random import default_rng
import pytest

from facesplat import gradsuite
from facesplat.dataset import random_params, synth_subject
from facesplat.evaluation import (
    chamfer_distances,
    crop_to_face,
    param_variance,
    umeyama,
)
from facesplat.fit import FitConfig, fit_subject
from facesplat.gsurf import Splats, quat_to_mat, sample_points
from facesplat.losses import (
    LossWeights,
    Supervision,
    binding_loss,
    pixel_loss,
)
from facesplat.meshrast import MeshMaps
from facesplat.model import FlameParams, synth_model
from facesplat.morph import decode_mesh, landmarks
from facesplat.splat import Camera, RenderOutputs, fov_degrees, look_at, render


def _report(name: str, passed: bool, detail: str) -> None:
    print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}", flush=True)
    assert passed, f"{name}: {detail}"


@pytest.fixture(scope="module")
def accept_assets():
    return synth_model(seed=2026)


@pytest.fixture(scope="module")
def ablation_assets():
    return synth_model(seed=7)


# ---------------------------------------------------------------------------
# scoring helpers


def _scan_of(assets, gt_params, n=4000):
    gt_mesh = decode_mesh(assets, gt_params)
    gt_lmk = landmarks(assets, gt_mesh)
    scan = sample_points(gt_mesh, n, seed=2024).positions(gt_mesh)
    diag = float(np.linalg.norm(gt_mesh.vertices.max(0) - gt_mesh.vertices.min(0)))
    return crop_to_face(scan, gt_lmk), gt_lmk, diag


def _aligned_chamfer_pct(assets, pred_params, gt_params) -> float:
    """Facial-crop scan-to-mesh distance after landmark alignment, % of diag."""
    scan, gt_lmk, diag = _scan_of(assets, gt_params)
    pred_mesh = decode_mesh(assets, pred_params)
    pred_lmk = landmarks(assets, pred_mesh)
    d = chamfer_distances(pred_mesh, scan, pred_lmk, gt_lmk)
    return 100.0 * float(d.mean()) / diag


def _unaligned_chamfer_pct(assets, pred_params, gt_params) -> float:
    """No alignment: pose, scale, and translation errors count."""
    scan, _, diag = _scan_of(assets, gt_params, n=2000)
    pred_mesh = decode_mesh(assets, pred_params)
    d = chamfer_distances(pred_mesh, scan)
    return 100.0 * float(d.mean()) / diag


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.corrcoef(a, b)[0, 1])


# ---------------------------------------------------------------------------
# criterion 1: gradients


def test_criterion_1_gradient_audit():
    report = gradsuite.run_suite()  # 64 probes per block, 1e-4 relative
    worst = max(b["max_rel_err"] for b in report["blocks"])
    enough = all(b["n_probes"] >= 64 for b in report["blocks"])
    ok = report["passed"] and enough and report["runtime_sec"] <= 300.0
    _report("criterion 1 (gradient audit)", ok,
            f"{len(report['blocks'])} blocks, worst rel err {worst:.2e} "
            f"(tol 1e-4), {report['runtime_sec']:.0f}s (budget 300s)")


# ---------------------------------------------------------------------------
# criterion 2: multi-view parameter recovery


RECOVERY_SEEDS = ([2026, 0], [2026, 1], [2026, 2], [2026, 3], [2026, 4])


def _recovery_config() -> FitConfig:
    return FitConfig(
        stage1_iters=4000, stage2_iters=50, stage2_warmup=25,
        stage2_geo_scale=0.25, n_gaussians=2000, render_res=192, seed=0,
        weights=LossWeights(w_reg_shape=1e-7, w_reg_expr=1e-7))


def test_criterion_2_parameter_recovery(accept_assets):
    rows = []
    for seed in RECOVERY_SEEDS:
        views, gt = synth_subject(accept_assets, seed, n_views=4, res=192)
        t0 = time.perf_counter()
        result = fit_subject(accept_assets, views, _recovery_config())
        wall = time.perf_counter() - t0
        pct = _aligned_chamfer_pct(accept_assets, result.params, gt)
        r = _pearson(result.params.beta[:8], gt.beta[:8])
        rows.append((pct, r, wall, result.aborted))
    worst_pct = max(row[0] for row in rows)
    worst_r = min(row[1] for row in rows)
    slowest = max(row[2] for row in rows)
    clean = not any(row[3] for row in rows)
    ok = clean and worst_pct <= 2.0 and worst_r >= 0.9 and slowest <= 900.0
    _report("criterion 2 (parameter recovery)", ok,
            f"{len(rows)} subjects at 192^2/2000 splats: worst chamfer "
            f"{worst_pct:.3f}% of diagonal (<= 2%), worst beta r {worst_r:.3f} "
            f"(>= 0.9), slowest {slowest:.0f}s (<= 900s)")


# ---------------------------------------------------------------------------
# criterion 3: cross-view consistency


def test_criterion_3_cross_view_consistency(accept_assets):
    views, _ = synth_subject(accept_assets, [2026, 77], n_views=8, res=96)
    config = FitConfig(
        stage1_iters=3000, stage2_iters=40, stage2_warmup=20,
        stage2_geo_scale=0.25, n_gaussians=800, render_res=96, seed=0,
        weights=LossWeights(w_reg_shape=1e-7, w_reg_expr=1e-7))
    preds = [fit_subject(accept_assets, [view], config).params for view in views]
    fit_var = param_variance(preds)
    rng = default_rng(999)
    pop_var = param_variance([random_params(accept_assets, rng) for _ in range(400)])
    beta_ratio = fit_var["beta"] / pop_var["beta"]
    psi_ratio = fit_var["psi"] / pop_var["psi"]
    ok = beta_ratio <= 0.25 and psi_ratio <= 0.25
    _report("criterion 3 (cross-view consistency)", ok,
            f"8 single-view fits: Var(beta) {beta_ratio:.1%} and Var(psi) "
            f"{psi_ratio:.1%} of between-subject variance (<= 25% each)")


# ---------------------------------------------------------------------------
# criterion 4: binding-loss ablation


ABLATION_SEEDS = ([42, 0], [42, 1], [42, 2])


def _ablation_config(w_binding: float) -> FitConfig:
    return FitConfig(
        stage1_iters=4000, stage2_iters=120, stage2_warmup=40,
        stage2_geo_scale=0.25, n_gaussians=1000, render_res=96, seed=0,
        weights=LossWeights(w_binding=w_binding,
                            w_reg_shape=1e-7, w_reg_expr=1e-7))


def test_criterion_4_binding_ablation(ablation_assets):
    mean_pct, beta_var = {}, {}
    for label, w_binding in (("with", 0.5), ("without", 0.0)):
        pcts, recovered = [], []
        for seed in ABLATION_SEEDS:
            views, gt = synth_subject(ablation_assets, seed, n_views=4, res=224)
            result = fit_subject(ablation_assets, views, _ablation_config(w_binding))
            assert result.aborted is None, f"{label} {seed}: {result.aborted}"
            pcts.append(_aligned_chamfer_pct(ablation_assets, result.params, gt))
            recovered.append(result.params)
        mean_pct[label] = float(np.mean(pcts))
        beta_var[label] = param_variance(recovered)["beta"]
    # removal must damage geometry without destabilizing identity (= equal
    # variance up to a 10% noise floor; see the variance figures printed)
    ok = (mean_pct["without"] > mean_pct["with"]
          and beta_var["without"] <= 1.1 * beta_var["with"])
    _report("criterion 4 (binding ablation)", ok,
            f"mean chamfer {mean_pct['with']:.4f}% -> {mean_pct['without']:.4f}% "
            f"of diagonal on removal (must increase); Var(beta) "
            f"{beta_var['with']:.5f} -> {beta_var['without']:.5f} "
            f"(must not increase)")


# ---------------------------------------------------------------------------
# criterion 5: staging ablation


def _hard_params(assets, rng) -> FlameParams:
    """Subject draws with pose offsets well past the convergence threshold."""
    base = random_params(assets, rng)
    return FlameParams(
        beta=base.beta, psi=base.psi,
        theta=np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.6, 0.6),
                        rng.uniform(-0.2, 0.2), base.theta[3], 0.0, 0.0]),
        scale=float(np.exp(rng.uniform(-0.22, 0.22))),
        translation=rng.uniform(-0.35, 0.35, size=3),
    )


def test_criterion_5_staging_ablation(accept_assets):
    base = dict(
        stage2_iters=60, stage2_warmup=20, stage2_geo_scale=0.25,
        n_gaussians=600, render_res=64, seed=0,
        weights=LossWeights(w_reg_shape=1e-7, w_reg_expr=1e-7))
    fractions = {}
    pcts = {"staged": [], "skip": []}
    for label, stage1 in (("staged", 1500), ("skip", 0)):
        failed = 0
        for i in range(10):
            seed = [2027, i]
            rng = default_rng(seed)
            gt = _hard_params(accept_assets, rng)
            views, _ = synth_subject(accept_assets, seed, n_views=2, res=64,
                                     params=gt)
            result = fit_subject(accept_assets, views,
                                 FitConfig(stage1_iters=stage1, **base))
            pct = _unaligned_chamfer_pct(accept_assets, result.params, gt)
            pcts[label].append(pct)
            failed += pct > 5.0
        fractions[label] = failed / 10.0
    ok = fractions["skip"] > fractions["staged"]
    _report("criterion 5 (staging ablation)", ok,
            f"non-converged (unaligned chamfer > 5% of diagonal) "
            f"{fractions['staged']:.0%} with the landmark stage vs "
            f"{fractions['skip']:.0%} without (must increase); "
            f"medians {np.median(pcts['staged']):.2f}% vs "
            f"{np.median(pcts['skip']):.2f}%")


# ---------------------------------------------------------------------------
# criterion 6: renderer exactness


def _frame_splats(centers, quats, scales, opacity, color) -> Splats:
    quats = np.asarray(quats, dtype=np.float64)
    m = quat_to_mat(quats)
    return Splats(
        centers=np.ascontiguousarray(centers, dtype=np.float64),
        t_u=np.ascontiguousarray(m[:, :, 0]),
        t_v=np.ascontiguousarray(m[:, :, 1]),
        normals=np.ascontiguousarray(m[:, :, 2]),
        scales=np.ascontiguousarray(scales, dtype=np.float64),
        opacity=np.ascontiguousarray(opacity, dtype=np.float64),
        color=np.ascontiguousarray(color, dtype=np.float64),
        quat=np.ascontiguousarray(quats),
    )


def _front_camera(width=4, height=4, f=10.0, eye_z=5.0) -> Camera:
    rot, trans = look_at((0.0, 0.0, eye_z), (0.0, 0.0, 0.0))
    return Camera(rotation=rot, translation=trans, fx=f, fy=f,
                  cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                  width=width, height=height)


def test_criterion_6_renderer_exactness():
    tol = 1e-6
    notes = []

    # empty scene: pure background, zero alpha
    cam = _front_camera()
    empty = _frame_splats(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 2)),
                          np.zeros(0), np.zeros((0, 3)))
    out = render(empty, cam, background=(0.2, 0.4, 0.6))
    ok_empty = (np.abs(out.color - [0.2, 0.4, 0.6]).max() <= tol
                and np.all(out.alpha == 0.0))
    notes.append(f"empty {'ok' if ok_empty else 'BAD'}")

    # one camera-facing splat through the principal pixel: the kernel and
    # the low-pass floor are both exactly 1, so alpha hits the clip value
    col = np.array([[0.2, 0.7, 0.4]])
    single = _frame_splats([[0.0, 0.0, 0.0]], [[1.0, 0.0, 0.0, 0.0]],
                           [[5.0, 5.0]], [0.9999], col)
    out = render(single, cam, background=(1.0, 0.0, 0.3))
    expect = 0.999 * col[0] + 0.001 * np.array([1.0, 0.0, 0.3])
    ok_single = (np.abs(out.color[1, 1] - expect).max() <= tol
                 and abs(out.alpha[1, 1] - 0.999) <= tol
                 and abs(out.depth[1, 1] - 5.0) <= tol)
    notes.append(f"single {'ok' if ok_single else 'BAD'}")

    # two axial splats, front-to-back compositing at alpha 0.5 each
    two = _frame_splats([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0]],
                        [[1.0, 0.0, 0.0, 0.0]] * 2, [[5.0, 5.0]] * 2,
                        [0.5, 0.5], [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    out = render(two, cam, background=(0.0, 0.0, 0.0))
    ok_two = (np.abs(out.color[1, 1] - [0.5, 0.25, 0.0]).max() <= tol
              and abs(out.alpha[1, 1] - 0.75) <= tol
              and abs(out.depth[1, 1] - (4 * 0.5 + 5 * 0.25) / 0.75) <= tol)
    notes.append(f"compositing {'ok' if ok_two else 'BAD'}")

    # 1000 fuzzed scenes: alpha stays a probability, everything finite
    rng = default_rng(66)
    cam_fuzz = _front_camera(width=12, height=10, f=9.0, eye_z=4.0)
    ok_fuzz = True
    for _ in range(1000):
        n = int(rng.integers(1, 7))
        quats = rng.normal(size=(n, 4))
        quats /= np.linalg.norm(quats, axis=1, keepdims=True)
        scene = _frame_splats(
            rng.uniform(-1.2, 1.2, (n, 3)), quats,
            rng.uniform(0.05, 0.8, (n, 2)), rng.uniform(0.01, 0.999, n),
            rng.uniform(0.0, 1.0, (n, 3)))
        out = render(scene, cam_fuzz, background=tuple(rng.uniform(0, 1, 3)))
        if not (np.all(np.isfinite(out.color)) and out.alpha.min() >= 0.0
                and out.alpha.max() <= 1.0):
            ok_fuzz = False
            break
    notes.append(f"fuzz x1000 {'ok' if ok_fuzz else 'BAD'}")

    # determinism across thread counts; with one available core this
    # reduces to a rerun comparison, on wider machines it is 1 vs N
    n_threads = numba_config.NUMBA_NUM_THREADS
    scene = _frame_splats(
        rng.uniform(-1.0, 1.0, (25, 3)), quats[:1].repeat(25, axis=0),
        rng.uniform(0.08, 0.5, (25, 2)), rng.uniform(0.05, 0.95, 25),
        rng.uniform(0.0, 1.0, (25, 3)))
    cam_det = _front_camera(width=40, height=24, f=30.0, eye_z=4.0)
    set_num_threads(1)
    first = render(scene, cam_det, background=(0.25, 0.5, 0.75))
    set_num_threads(n_threads)
    second = render(scene, cam_det, background=(0.25, 0.5, 0.75))
    ok_det = all(
        np.array_equal(getattr(first, f), getattr(second, f))
        for f in ("color", "alpha", "depth", "normal"))
    notes.append(f"1-vs-{n_threads}-thread bitwise {'ok' if ok_det else 'BAD'}")

    ok = ok_empty and ok_single and ok_two and ok_fuzz and ok_det
    _report("criterion 6 (renderer exactness)", ok, ", ".join(notes))


# ---------------------------------------------------------------------------
# criterion 7: scalar oracles


def test_criterion_7_scalar_oracles(accept_assets):
    notes = []

    # pixel loss against a plain-Python accumulation
    rng = default_rng(7)
    target = rng.random((3, 4, 3))
    rendered = rng.random((3, 4, 3))
    mask = rng.random((3, 4)) > 0.4
    cam = _front_camera(width=4, height=3)
    sup = Supervision(image=target, mask=mask,
                      landmarks=np.zeros((68, 2)),
                      visible=np.ones(68, dtype=bool), camera=cam)
    lam = 0.7
    acc = 0.0
    for y in range(3):
        for x in range(4):
            w = lam * float(mask[y, x]) + (1.0 - lam)
            for c in range(3):
                acc += ((target[y, x, c] - rendered[y, x, c]) * w) ** 2
    oracle = acc / 12.0
    err_pixel = abs(pixel_loss(rendered, sup, lam) - oracle)
    notes.append(f"pixel {err_pixel:.1e}")

    # binding loss against explicit square roots over the effective mask
    h, w = 2, 3
    gs = RenderOutputs(color=np.zeros((h, w, 3)),
                       alpha=np.array([[0.9, 0.2, 0.8], [0.6, 0.9, 0.1]]),
                       depth=rng.random((h, w)) + 1.0,
                       normal=rng.normal(size=(h, w, 3)))
    maps = MeshMaps(depth=rng.random((h, w)) + 1.0,
                    normal=rng.normal(size=(h, w, 3)),
                    coverage=np.array([[True, True, False], [True, True, True]]),
                    tri_index=np.zeros((h, w), dtype=np.int64),
                    bary=np.zeros((h, w, 3)))
    mask2 = np.array([[True, True, True], [False, True, True]])
    eff = [(y, x) for y in range(h) for x in range(w)
           if mask2[y, x] and maps.coverage[y, x] and gs.alpha[y, x] > 0.5]
    sum_d = sum((maps.depth[y, x] - gs.depth[y, x]) ** 2 for y, x in eff)
    sum_n = sum((maps.normal[y, x, c] - gs.normal[y, x, c]) ** 2
                for y, x in eff for c in range(3))
    oracle = math.sqrt(sum_d) / len(eff) + math.sqrt(sum_n) / len(eff)
    err_bind = abs(binding_loss(gs, maps, mask2) - oracle)
    notes.append(f"binding {err_bind:.1e}")

    # parameter variance against explicit mean squared deviation
    draws = [random_params(accept_assets, default_rng([7, k])) for k in range(5)]
    betas = np.stack([p.beta for p in draws])
    # squared distance from the sample mean, averaged over samples
    manual = 0.0
    for j in range(betas.shape[1]):
        mean_j = sum(betas[:, j]) / 5.0
        manual += sum((b - mean_j) ** 2 for b in betas[:, j]) / 5.0
    err_var = abs(param_variance(draws)["beta"] - manual)
    notes.append(f"variance {err_var:.1e}")

    ok_scalars = max(err_pixel, err_bind, err_var) <= 1e-10

    # similarity recovery on constructed transforms
    worst_sim = 0.0
    for k in range(5):
        rng_k = default_rng(100 + k)
        src = rng_k.normal(size=(20, 3))
        axis = rng_k.normal(size=3)
        axis /= np.linalg.norm(axis)
        ang = rng_k.uniform(0.2, 2.6)
        kmat = np.array([[0, -axis[2], axis[1]],
                         [axis[2], 0, -axis[0]],
                         [-axis[1], axis[0], 0]])
        rot = np.eye(3) + math.sin(ang) * kmat + (1 - math.cos(ang)) * kmat @ kmat
        s = float(rng_k.uniform(0.3, 2.5))
        t = rng_k.normal(size=3)
        dst = s * src @ rot.T + t
        sim = umeyama(src, dst)
        worst_sim = max(worst_sim,
                        float(np.abs(sim.apply(src) - dst).max()),
                        abs(sim.scale - s),
                        float(np.abs(sim.rotation - rot).max()),
                        float(np.abs(sim.translation - t).max()))
    ok_sim = worst_sim <= 1e-8
    notes.append(f"umeyama {worst_sim:.1e}")

    _report("criterion 7 (scalar oracles)", ok_scalars and ok_sim,
            "max abs errors " + ", ".join(notes)
            + " (tol 1e-10 scalars, 1e-8 alignment)")


# ---------------------------------------------------------------------------
# criterion 8: field-of-view table


def test_criterion_8_fov_table():
    rows = ((4.0, 14.25), (20.0, 2.87))
    errs = [abs(fov_degrees(alpha) - expect) for alpha, expect in rows]
    ok = all(err < 0.01 for err in errs)
    _report("criterion 8 (fov table)", ok,
            f"fov(4.0) = {fov_degrees(4.0):.4f} vs 14.25, "
            f"fov(20.0) = {fov_degrees(20.0):.4f} vs 2.87 "
            f"(both within 0.01 degrees)")
