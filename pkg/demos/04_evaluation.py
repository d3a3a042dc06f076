"""Score a fit against ground truth: chamfer protocols and variance reports.

The scan-to-mesh statistic samples the ground-truth surface, crops to the
facial region (1.2x the inter-ocular radius), landmark-aligns the predicted
mesh with a similarity transform, and measures exact point-to-triangle
distances. The neutralized variant zeroes expression and pose first so only
shape coefficients are scored. Parameter variance compares the spread of a
set of predictions to the spread of the synthetic population.

CLI equivalent:
    facesplat eval --dataset demo_out/dataset --results demo_out/eval_results

Runs in seconds.
"""

from pathlib import Path

import numpy as np
from numpy.random import default_rng

from facesplat import (
    chamfer,
    crop_to_face,
    load_fit_result,
    now_protocol,
    param_variance,
    random_params,
    sample_points,
)
from facesplat.dataset import load_dataset_assets, load_gt_params
from facesplat.evaluation import export_variance_heatmap, per_vertex_variance
from facesplat.morph import decode_mesh, landmarks

BASE = Path(__file__).resolve().parent / "demo_out"


def main() -> None:
    if not (BASE / "fit_000" / "params.json").is_file():
        raise SystemExit("run 02_staged_fitting.py first")
    assets = load_dataset_assets(BASE / "dataset")
    pred = load_fit_result(BASE / "fit_000").params
    gt = load_gt_params(BASE / "dataset" / "subjects" / "000")

    gt_mesh = decode_mesh(assets, gt)
    gt_lmk = landmarks(assets, gt_mesh)
    scan = sample_points(gt_mesh, 4000, seed=2024).positions(gt_mesh)
    scan = crop_to_face(scan, gt_lmk)
    diag = float(np.linalg.norm(gt_mesh.vertices.max(0) - gt_mesh.vertices.min(0)))

    pred_mesh = decode_mesh(assets, pred)
    pred_lmk = landmarks(assets, pred_mesh)
    stats = chamfer(pred_mesh, scan, pred_lmk, gt_lmk)
    print(f"facial scan: {len(scan)} points, bbox diagonal {diag:.3f}")
    print(f"chamfer mean {stats.mean:.3e} ({100 * stats.mean / diag:.3f}% of diagonal), "
          f"median {stats.median:.3e}")

    neutral = now_protocol(pred, assets, scan, gt_lmk)
    print(f"shape-only (expression and pose zeroed): mean {neutral.mean:.3e}")

    # spread of a prediction set vs the population that generated the data
    preds = [pred, gt]
    rng = default_rng(999)
    pop = [random_params(assets, rng) for _ in range(200)]
    print(f"\nVar(beta) of [fit, gt] pair: {param_variance(preds)['beta']:.5f}")
    print(f"Var(beta) of the population: {param_variance(pop)['beta']:.5f}")

    var, mean_mesh = per_vertex_variance(assets, preds)
    ply = BASE / "eval_heatmap.ply"
    export_variance_heatmap(ply, mean_mesh, var)
    print(f"\nper-vertex disagreement heatmap: {ply} "
          f"(max vertex variance {var.max():.2e})")


if __name__ == "__main__":
    main()
