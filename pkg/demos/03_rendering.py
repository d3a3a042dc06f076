"""Re-render a saved fit: dataset views, an orbit sweep, and auxiliary maps.

Splats are rebuilt from the persisted float32 state, so re-rendering a
dataset view reproduces the fit's own closing render bit for bit. The orbit
sweep places fresh cameras on a circle around the head; normal and depth
maps come from the same forward pass.

CLI equivalent:
    facesplat render --result demo_out/fit_000 --dataset demo_out/dataset --view 0
    facesplat render --result demo_out/fit_000 --dataset demo_out/dataset \
        --orbit 8 --normals --depth

Runs in seconds.
"""

import math
from pathlib import Path

import numpy as np

from facesplat import camera_from_alpha, load_fit_result, look_at, rebuild_splats, render
from facesplat.dataset import load_dataset_assets, load_subject
from facesplat.fit import _at_resolution
from facesplat.gsurf import export_splats_ply
from facesplat.images import encode_depth_map, encode_normal_map, load_png, save_png

BASE = Path(__file__).resolve().parent / "demo_out"
OUT = BASE / "renders"


def main() -> None:
    if not (BASE / "fit_000" / "params.json").is_file():
        raise SystemExit("run 02_staged_fitting.py first")
    result = load_fit_result(BASE / "fit_000")
    assets = load_dataset_assets(BASE / "dataset")
    splats = rebuild_splats(assets, result)
    res = int(result.meta["render_res"])
    bg = tuple(result.meta["background"])
    OUT.mkdir(parents=True, exist_ok=True)

    # a dataset view, reproduced bitwise from the saved state
    views = load_subject(BASE / "dataset" / "subjects" / "000")
    sup = _at_resolution(views[0], res)
    out = render(splats, sup.camera, bg)
    save_png(OUT / "view0.png", out.color)
    # compare after the 8-bit encode both files went through
    ours = load_png(OUT / "view0.png")
    saved = load_png(BASE / "fit_000" / "renders" / "000.png")
    print(f"view 0 re-render matches the fit bitwise: "
          f"{np.array_equal(ours, saved)}")

    # an eight-camera orbit with normal + depth maps
    for i in range(8):
        az = 2.0 * math.pi * i / 8
        eye = 2.7 * np.array([math.sin(az) * math.cos(0.2), math.sin(0.2),
                              math.cos(az) * math.cos(0.2)])
        rot, trans = look_at(eye, (0.0, 0.0, 0.0))
        cam = camera_from_alpha(0.75, res, res, rot, trans)
        out = render(splats, cam, bg)
        save_png(OUT / f"orbit_{i}.png", out.color)
        save_png(OUT / f"orbit_{i}_normal.png", encode_normal_map(out.normal))
        save_png(OUT / f"orbit_{i}_depth.png", encode_depth_map(out.depth, out.alpha))
    print(f"orbit sweep written to {OUT} (color + normal + depth x 8)")

    export_splats_ply(OUT / "splats.ply", splats)
    print(f"splat point cloud: {OUT / 'splats.ply'} ({len(splats.opacity)} splats)")


if __name__ == "__main__":
    main()
