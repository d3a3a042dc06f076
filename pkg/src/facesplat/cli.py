"""Command line front end.

Subcommands:
    synth      generate a synthetic multi-view dataset with ground truth
    fit        run staged fitting on one or all subjects of a dataset
    eval       score fits against ground truth (chamfer + parameter variance)
    render     re-render a saved fit from dataset cameras or an orbit sweep
    gradcheck  finite-difference audit of every registered gradient block

Exit codes: 0 success, 1 usage or configuration error, 2 a fit aborted on a
non-finite loss, 3 invalid input data or a failed gradient check.

The KAOLRM_THREADS environment variable caps compute threads and the
subject-level worker count of `fit --jobs`.
"""

import argparse
import dataclasses
import json
import math
import multiprocessing
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import _kernels, dataset, evaluation, images
from . import fit as fit_mod
from . import gradsuite
from .fit import FitConfig
from .gsurf import sample_points
from .losses import LossWeights
from .morph import decode_mesh, landmarks
from .splat import camera_from_alpha, look_at, render

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_ABORTED = 2
EXIT_INVALID = 3

SCAN_POINTS = 4000  # ground-truth surface samples per subject in eval
SCAN_SEED = 2024
ORBIT_RADIUS = 2.7
ORBIT_ELEVATION = 0.2
ORBIT_ALPHA = 0.75


class UsageError(Exception):
    """Bad invocation or configuration; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); keep codes ours
        raise UsageError(message)


# ---------------------------------------------------------------------------
# fit configuration plumbing


def _weights_from_dict(data: dict) -> LossWeights:
    allowed = {f.name for f in dataclasses.fields(LossWeights)} - {"stage"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise UsageError(f"unknown weight keys: {', '.join(unknown)}")
    try:
        return LossWeights(**{k: float(v) for k, v in data.items()})
    except (AssertionError, TypeError) as exc:
        raise UsageError(f"bad loss weights: {exc}")


def build_config(config_path=None, overrides: dict | None = None) -> FitConfig:
    """Merge defaults < JSON file < flag overrides; reject unknown keys."""
    data = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}")
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object")
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value

    weights_data = data.pop("weights", None)
    allowed = set(FitConfig().to_dict())
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    if "background" in data:
        data["background"] = tuple(float(v) for v in data["background"])
    if weights_data is not None:
        if not isinstance(weights_data, dict):
            raise UsageError("weights must be a JSON object")
        data["weights"] = _weights_from_dict(weights_data)
    try:
        return FitConfig(**data)
    except (AssertionError, TypeError) as exc:
        raise UsageError(f"bad fit config: {exc}")


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    dirs = dataset.synth_dataset(
        args.out, seed=args.seed, n_subjects=args.subjects,
        n_views=args.views, fov_alpha=args.fov_alpha, res=args.res)
    for d in dirs:
        print(f"wrote {d}")
    print(f"dataset ready: {args.out} ({len(dirs)} subjects x {args.views} views)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit


def _subject_dir(root: Path, name: str) -> Path:
    path = root / dataset.SUBJECTS_DIR / name
    if not path.is_dir():
        raise FileNotFoundError(f"subject not found: {path}")
    return path


def _fit_one(dataset_dir: str, name: str, out_dir: str, config: FitConfig,
             views_limit: int | None) -> tuple[str, str | None, float]:
    """Worker body; also invoked in-process when --jobs 1."""
    _kernels.set_threads_from_env(os.environ.get("KAOLRM_THREADS"))
    root = Path(dataset_dir)
    assets = dataset.load_dataset_assets(root)
    views = dataset.load_subject(_subject_dir(root, name))
    if views_limit is not None:
        if not (1 <= views_limit <= len(views)):
            raise UsageError(
                f"--views {views_limit} out of range: {name} has {len(views)} views")
        views = views[:views_limit]
    result = fit_mod.fit_subject(assets, views, config)
    fit_mod.save_fit_result(out_dir, result, config)
    return name, result.aborted, result.wall_clock


def cmd_fit(args) -> int:
    root = Path(args.dataset)
    if args.all == bool(args.subject):
        raise UsageError("pass --subject NAME (repeatable) or --all, not both")
    dataset.load_dataset_assets(root)  # fail fast with a clear path
    if args.all:
        names = [p.name for p in dataset.list_subjects(root)]
        if not names:
            raise FileNotFoundError(f"no subjects under {root / dataset.SUBJECTS_DIR}")
    else:
        names = list(args.subject)
        for name in names:
            _subject_dir(root, name)

    overrides = {
        "stage1_iters": args.stage1_iters,
        "stage2_iters": args.stage2_iters,
        "n_gaussians": args.n_gaussians,
        "render_res": args.render_res,
        "seed": args.seed,
        "fix_translation_z": args.fix_tz,
    }
    config = build_config(args.config, overrides)
    out_root = Path(args.out) if args.out else root / "results"

    jobs = args.jobs
    env_cap = os.environ.get("KAOLRM_THREADS")
    if env_cap:
        jobs = min(jobs, max(1, int(env_cap)))
    jobs = min(jobs, len(names))

    tasks = [(str(root), name, str(out_root / name), config, args.views)
             for name in names]
    if jobs <= 1:
        outcomes = [_fit_one(*task) for task in tasks]
    else:
        # spawn: forked children would inherit the parent's compute threads
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
            outcomes = list(pool.map(_fit_one, *zip(*tasks)))

    code = EXIT_OK
    for name, aborted, wall in outcomes:
        if aborted is None:
            print(f"fit {name}: done in {wall:.1f}s -> {out_root / name}")
        else:
            print(f"fit {name}: ABORTED ({aborted}); partial state saved "
                  f"to {out_root / name}", file=sys.stderr)
            code = EXIT_ABORTED
    return code


# ---------------------------------------------------------------------------
# eval


def _score_subject(assets, pred_params, gt_params) -> tuple[dict, np.ndarray]:
    """Facial-crop scan-to-mesh distances for one subject, plus summary stats."""
    gt_mesh = decode_mesh(assets, gt_params)
    gt_lmk = landmarks(assets, gt_mesh)
    scan = sample_points(gt_mesh, SCAN_POINTS, SCAN_SEED).positions(gt_mesh)
    scan = evaluation.crop_to_face(scan, gt_lmk)
    pred_mesh = decode_mesh(assets, pred_params)
    pred_lmk = landmarks(assets, pred_mesh)
    d = evaluation.chamfer_distances(pred_mesh, scan, pred_lmk, gt_lmk)
    stats = {"mean": float(d.mean()), "median": float(np.median(d)),
             "std": float(d.std())}
    return stats, d


def cmd_eval(args) -> int:
    root = Path(args.dataset)
    results = Path(args.results)
    assets = dataset.load_dataset_assets(root)
    if not results.is_dir():
        raise FileNotFoundError(f"results directory not found: {results}")

    preds, rows, pooled = [], {}, []
    for sdir in dataset.list_subjects(root):
        rdir = results / sdir.name
        if not (rdir / "params.json").is_file():
            continue
        gt = dataset.load_gt_params(sdir)
        if gt is None:
            print(f"skipping {sdir.name}: no ground truth", file=sys.stderr)
            continue
        result = fit_mod.load_fit_result(rdir)
        stats, dists = _score_subject(assets, result.params, gt)
        preds.append(result.params)
        pooled.append(dists)
        rows[sdir.name] = stats
    if not rows:
        raise ValueError(
            f"nothing to evaluate: no subject has both a fit under {results} "
            "and gt_params.json")

    # pooled over every scan point so one subject reproduces its own stats
    all_d = np.concatenate(pooled)
    report = evaluation.variance_report(preds)
    metrics = {
        "n_subjects": len(rows),
        "chamfer": {"mean": float(all_d.mean()), "median": float(np.median(all_d)),
                    "std": float(all_d.std())},
        **report.to_dict(),
        "subjects": rows,
    }
    out_dir = Path(args.out) if args.out else results
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2))

    if len(preds) >= 2:
        var, mean_mesh = evaluation.per_vertex_variance(assets, preds)
        evaluation.export_variance_heatmap(
            out_dir / "variance_heatmap.ply", mean_mesh, var)

    print(f"evaluated {len(rows)} subjects")
    print(f"chamfer mean {metrics['chamfer']['mean']:.6f} "
          f"median {metrics['chamfer']['median']:.6f}")
    print(f"var_beta first10 {metrics['var_beta']['first10']:.6f}  "
          f"var_psi first10 {metrics['var_psi']['first10']:.6f}")
    print(f"wrote {out_dir / 'metrics.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# render


def _orbit_cameras(k: int, res: int):
    cams = []
    el = ORBIT_ELEVATION
    for i in range(k):
        az = 2.0 * math.pi * i / k
        eye = ORBIT_RADIUS * np.array([
            math.sin(az) * math.cos(el), math.sin(el), math.cos(az) * math.cos(el)])
        rot, trans = look_at(eye, (0.0, 0.0, 0.0))
        cams.append((f"orbit_{i:03d}", camera_from_alpha(ORBIT_ALPHA, res, res, rot, trans)))
    return cams


def cmd_render(args) -> int:
    if (args.view is None) == (args.orbit is None):
        raise UsageError("pass exactly one of --view N or --orbit K")
    rdir = Path(args.result)
    if not (rdir / "params.json").is_file():
        raise FileNotFoundError(f"fit result not found: {rdir / 'params.json'}")
    result = fit_mod.load_fit_result(rdir)
    root = Path(args.dataset)
    assets = dataset.load_dataset_assets(root)
    if "render_res" not in result.meta:
        raise ValueError(f"{rdir / 'params.json'} lacks render metadata")
    res = int(result.meta["render_res"])
    background = tuple(float(v) for v in result.meta.get("background", (0, 0, 0)))
    splats = fit_mod.rebuild_splats(assets, result)

    if args.view is not None:
        name = args.subject or rdir.name
        views = dataset.load_subject(_subject_dir(root, name))
        if not (0 <= args.view < len(views)):
            raise UsageError(
                f"--view {args.view} out of range: {name} has {len(views)} views")
        sup = fit_mod._at_resolution(views[args.view], res)
        cams = [(f"view_{args.view:03d}", sup.camera)]
    else:
        if args.orbit < 1:
            raise UsageError("--orbit needs at least one camera")
        cams = _orbit_cameras(args.orbit, res)

    out_dir = Path(args.out) if args.out else rdir / "renders_out"
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, cam in cams:
        out = render(splats, cam, background)
        path = out_dir / f"{name}.png"
        images.save_png(path, out.color)
        print(f"wrote {path}")
        if args.normals:
            npath = out_dir / f"{name}_normal.png"
            images.save_png(npath, images.encode_normal_map(out.normal))
            print(f"wrote {npath}")
        if args.depth:
            dpath = out_dir / f"{name}_depth.png"
            images.save_png(dpath, images.encode_depth_map(out.depth, out.alpha))
            print(f"wrote {dpath}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    if args.inject_fault is not None and args.inject_fault not in gradsuite.BLOCKS:
        raise UsageError(
            f"unknown gradient block {args.inject_fault!r}; "
            f"choose from: {', '.join(sorted(gradsuite.BLOCKS))}")
    report = gradsuite.run_suite(
        tolerance=args.tolerance, n_probes=args.probes,
        inject_fault=args.inject_fault)
    for block in report["blocks"]:
        status = "pass" if block["passed"] else "FAIL"
        print(f"{block['name']:<20} max_rel_err {block['max_rel_err']:.3e}  "
              f"({block['seconds']:.2f}s)  {status}")
    verdict = "passed" if report["passed"] else "FAILED"
    print(f"gradient suite {verdict}: {len(report['blocks'])} blocks "
          f"in {report['runtime_sec']:.1f}s at tolerance {report['tolerance']:g}")
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2))
        print(f"wrote {args.report}")
    return EXIT_OK if report["passed"] else EXIT_INVALID


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> _Parser:
    parser = _Parser(prog="facesplat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subjects", type=int, default=5)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--fov-alpha", type=float, default=0.75,
                   help="normalized focal length (fx = alpha * width)")
    p.add_argument("--res", type=int, default=224)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit subjects from a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--subject", action="append", default=[],
                   help="subject name; repeat for several")
    p.add_argument("--all", action="store_true", help="fit every subject")
    p.add_argument("--out", default=None,
                   help="results root (default: DATASET/results)")
    p.add_argument("--config", default=None, help="JSON file of config fields")
    p.add_argument("--jobs", type=int, default=1,
                   help="subjects fitted in parallel")
    p.add_argument("--views", type=int, default=None,
                   help="use only the first N views")
    p.add_argument("--stage1-iters", type=int, default=None)
    p.add_argument("--stage2-iters", type=int, default=None)
    p.add_argument("--n-gaussians", type=int, default=None)
    p.add_argument("--render-res", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--fix-tz", action=argparse.BooleanOptionalAction, default=None,
                   help="pin camera-axis translation (default: on for single view)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="score fits against ground truth")
    p.add_argument("--dataset", required=True)
    p.add_argument("--results", required=True)
    p.add_argument("--out", default=None,
                   help="where to write metrics.json (default: RESULTS)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="re-render a saved fit")
    p.add_argument("--result", required=True, help="one subject's fit directory")
    p.add_argument("--dataset", required=True)
    p.add_argument("--subject", default=None,
                   help="subject name (default: result directory name)")
    p.add_argument("--view", type=int, default=None,
                   help="re-render this dataset view index")
    p.add_argument("--orbit", type=int, default=None,
                   help="render K cameras sweeping a full turn")
    p.add_argument("--normals", action="store_true", help="also write normal maps")
    p.add_argument("--depth", action="store_true", help="also write depth maps")
    p.add_argument("--out", default=None,
                   help="output directory (default: RESULT/renders_out)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--report", default=None, help="write the JSON report here")
    p.add_argument("--tolerance", type=float, default=gradsuite.DEFAULT_TOLERANCE)
    p.add_argument("--probes", type=int, default=gradsuite.MIN_PROBES)
    p.add_argument("--inject-fault", default=None, metavar="BLOCK",
                   help="corrupt one block's gradient; the suite must fail")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        _kernels.set_threads_from_env(os.environ.get("KAOLRM_THREADS"))
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, AssertionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
