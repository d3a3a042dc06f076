"""Fit one synthetic subject with the staged optimizer and watch the losses.

Stage I pulls the morphable head onto the 2D landmarks; stage II unlocks the
triplane + decoder and optimizes the photometric, structural-similarity,
feature-pyramid, and splat-to-mesh binding terms through the renderer. The
saved result round-trips bitwise because the final state is pushed through
float32 before the closing renders.

CLI equivalent:
    facesplat fit --dataset demo_out/dataset --subject 000 \
        --stage1-iters 600 --stage2-iters 30 --n-gaussians 600 --render-res 96

Takes a couple of minutes on one core; shrink stage2_iters to speed it up.
"""

from pathlib import Path

import numpy as np

from facesplat import FitConfig, LossWeights, fit_subject, load_fit_result
from facesplat.dataset import load_dataset_assets, load_subject
from facesplat.fit import save_fit_result

DATASET = Path(__file__).resolve().parent / "demo_out" / "dataset"
OUT = Path(__file__).resolve().parent / "demo_out" / "fit_000"


def main() -> None:
    if not DATASET.is_dir():
        raise SystemExit("run 01_synthetic_dataset.py first")
    assets = load_dataset_assets(DATASET)
    views = load_subject(DATASET / "subjects" / "000")

    config = FitConfig(
        stage1_iters=600, stage2_iters=30, stage2_warmup=10,
        n_gaussians=600, render_res=96, seed=0,
        weights=LossWeights(w_reg_shape=1e-6, w_reg_expr=1e-6))
    print(f"fitting subject 000 from {len(views)} views "
          f"({config.stage1_iters} landmark + {config.stage2_iters} photometric iters)")
    result = fit_subject(assets, views, config)
    assert result.aborted is None, result.aborted

    stage1 = [e for e in result.loss_log if e["stage"] == 1]
    stage2 = [e for e in result.loss_log if e["stage"] == 2]
    print(f"\nstage I landmark loss: {stage1[0]['lmk']:.2e} -> {stage1[-1]['lmk']:.2e}")
    print(f"stage II total loss:   {stage2[0]['total']:.4f} -> {stage2[-1]['total']:.4f}")
    print(f"stage II binding term: {stage2[0]['binding']:.4f} -> {stage2[-1]['binding']:.4f}")
    print(f"wall clock: {result.wall_clock:.0f}s")

    save_fit_result(OUT, result, config)
    back = load_fit_result(OUT)
    same = (np.array_equal(back.triplane.features, result.triplane.features)
            and np.array_equal(back.params.beta, result.params.beta))
    print(f"\nsaved to {OUT}; reload is bitwise identical: {same}")
    print("recovered beta:", np.round(result.params.beta, 3))


if __name__ == "__main__":
    main()
