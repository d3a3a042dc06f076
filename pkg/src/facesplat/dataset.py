"""Synthetic capture generation and the on-disk subject layout.

A synthetic subject is a randomly drawn parameter vector rendered through a
dense opaque splat cover of its decoded surface (constant skin tone modulated
by a shape-basis-driven shading field), photographed from cameras on the
frontal hemisphere. Subjects persist as directories of PNG images, binary
masks, landmark JSON files, camera intrinsics/extrinsics, and ground-truth
parameters, with the generating model assets stored at the dataset root.
"""

import json
from pathlib import Path

import numpy as np

from . import gsurf, images
from .losses import Supervision
from .model import FlameParams, ModelAssets, load_assets, save_assets, synth_model
from .morph import decode_mesh, landmarks
from .splat import Camera, camera_from_alpha, look_at, render

SKIN_TONE = np.array([0.77, 0.58, 0.48])
CAMERA_RADIUS = 2.7
AZIMUTH_MAX = 1.2  # radians, each side of frontal
ELEVATION_MAX = 0.6
COVER_OPACITY = 0.99
COVER_SCALE = 0.65
ASSETS_FILE = "assets.klrm"
MANIFEST_FILE = "manifest.json"
SUBJECTS_DIR = "subjects"


def _bounded(vec: np.ndarray, max_norm: float) -> np.ndarray:
    n = np.linalg.norm(vec)
    if n > max_norm:
        vec = vec * (max_norm / n)
    return vec


def random_params(assets: ModelAssets, rng: np.random.Generator) -> FlameParams:
    """Draw a plausible subject: bounded coefficients, mild global pose."""
    beta = _bounded(rng.normal(0.0, 0.5, assets.n_shape), 1.2)
    psi = _bounded(rng.normal(0.0, 0.35, assets.n_expr), 0.8)
    theta = np.zeros(6)
    theta[:3] = rng.uniform(-0.25, 0.25, 3)
    theta[3] = rng.uniform(0.0, 0.15)
    return FlameParams(
        beta=beta, psi=psi, theta=theta,
        scale=float(np.exp(rng.uniform(-0.12, 0.12))),
        translation=rng.uniform(-0.12, 0.12, 3),
    )


def _shading_field(assets: ModelAssets) -> np.ndarray:
    """Per-vertex scalar in [0, 1] from shape-basis displacement magnitude."""
    basis = assets.shape_basis.astype(np.float64).reshape(assets.n_verts, 3, -1)
    mag = np.sqrt(np.sum(basis * basis, axis=(1, 2)))
    span = mag.max() - mag.min()
    if span < 1e-20:
        return np.full(assets.n_verts, 0.5)
    return (mag - mag.min()) / span


def cover_splats(assets: ModelAssets, mesh, seed: int,
                 per_face: int = 4) -> gsurf.Splats:
    """Dense opaque splat cover of a decoded mesh for ground-truth renders.

    One area-weighted sample per ~1/per_face of a face, oriented to the face
    plane, sized to overlap neighbors, constant high opacity, skin-tone color
    shaded by the per-vertex basis field.
    """
    n = per_face * mesh.faces.shape[0]
    samples = gsurf.sample_points(mesh, n, seed)
    centers = samples.positions(mesh)
    normals = samples.face_normals(mesh)

    tri = mesh.vertices[mesh.faces[samples.face_index]]
    areas = 0.5 * np.linalg.norm(
        np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    radius = COVER_SCALE * np.sqrt(areas / per_face)
    scales = np.stack([radius, radius], axis=1)

    ez = np.tile(np.array([0.0, 0.0, 1.0]), (n, 1))
    quat = gsurf.quat_between(ez, normals)
    frames = gsurf.quat_to_mat(quat)

    field = _shading_field(assets)
    shade = 0.55 + 0.45 * np.sum(
        field[mesh.faces[samples.face_index]] * samples.bary, axis=1)
    color = SKIN_TONE[None, :] * shade[:, None]

    splats = gsurf.Splats(
        centers=centers,
        t_u=frames[:, :, 0].copy(),
        t_v=frames[:, :, 1].copy(),
        normals=frames[:, :, 2].copy(),
        scales=scales,
        opacity=np.full(n, COVER_OPACITY),
        color=color,
        quat=quat,
    )
    splats.validate()
    return splats


def sample_cameras(rng: np.random.Generator, n_views: int, res: int,
                   fov_alpha: float, radius: float = CAMERA_RADIUS) -> list:
    """Cameras on the frontal hemisphere looking at the origin.

    Azimuths are stratified across the frontal arc so multi-view sets always
    spread out; elevations are drawn uniformly. All views share intrinsics.
    """
    assert n_views >= 1
    cams = []
    for i in range(n_views):
        u = (i + rng.uniform(0.2, 0.8)) / n_views
        az = (2.0 * u - 1.0) * AZIMUTH_MAX
        el = rng.uniform(-ELEVATION_MAX, ELEVATION_MAX)
        eye = radius * np.array([
            np.sin(az) * np.cos(el),
            np.sin(el),
            np.cos(az) * np.cos(el),
        ])
        r, t = look_at(eye, np.zeros(3))
        cams.append(camera_from_alpha(fov_alpha, res, res, r, t))
    return cams


def _landmark_visibility(lmk3d: np.ndarray, normals: np.ndarray,
                         camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Project landmarks; visible = in front, inside the image, facing."""
    px, z = camera.project(lmk3d)
    eye = -camera.rotation.T @ camera.translation
    facing = np.sum(normals * (lmk3d - eye[None, :]), axis=1) < 0.0
    inside = (
        (px[:, 0] >= 0.0) & (px[:, 0] < camera.width)
        & (px[:, 1] >= 0.0) & (px[:, 1] < camera.height)
    )
    return px, (z > 1e-6) & inside & facing


def _landmark_normals(assets: ModelAssets, mesh) -> np.ndarray:
    tri = mesh.vertices[mesh.faces[assets.landmark_faces]]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-20)


def synth_subject(assets: ModelAssets, seed, n_views: int, res: int = 224,
                  fov_alpha: float = 0.75, background=(0.0, 0.0, 0.0),
                  per_face: int = 4,
                  params: FlameParams | None = None) -> tuple[list, FlameParams]:
    """Render one synthetic subject; returns (views, ground-truth params).

    Passing params overrides the random identity draw but keeps the rest of
    the seed-derived sequence (splat jitter, camera placement) unchanged.
    """
    assert n_views >= 1 and res > 0
    rng = np.random.default_rng(seed)
    drawn = random_params(assets, rng)
    if params is None:
        params = drawn
    mesh = decode_mesh(assets, params)
    splats = cover_splats(assets, mesh, int(rng.integers(2**31)), per_face)
    lmk3d = landmarks(assets, mesh)
    lmk_normals = _landmark_normals(assets, mesh)
    cameras = sample_cameras(rng, n_views, res, fov_alpha)

    views = []
    for cam in cameras:
        out = render(splats, cam, background)
        px, visible = _landmark_visibility(lmk3d, lmk_normals, cam)
        views.append(Supervision(
            image=out.color,
            mask=out.alpha > 0.5,
            landmarks=px,
            visible=visible,
            camera=cam,
        ))
    return views, params


# ---------------------------------------------------------------------------
# subject directory layout


def _camera_entry(cam: Camera) -> dict:
    d = cam.to_dict()
    # the stored form carries 16 + 4 values; image size comes from the PNGs
    return {k: d[k] for k in ("world_to_camera", "fx", "fy", "cx", "cy")}


def write_subject(subject_dir, views: list, gt_params: FlameParams | None = None) -> None:
    subject_dir = Path(subject_dir)
    for sub in ("images", "masks", "landmarks"):
        (subject_dir / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for i, view in enumerate(views):
        name = f"{i:03d}"
        images.save_png(subject_dir / "images" / f"{name}.png", view.image)
        images.save_mask_png(subject_dir / "masks" / f"{name}.png", view.mask)
        payload = {
            "points": np.asarray(view.landmarks, dtype=np.float64).tolist(),
            "visible": np.asarray(view.visible, dtype=bool).tolist(),
        }
        (subject_dir / "landmarks" / f"{name}.json").write_text(
            json.dumps(payload, indent=2))
        entries.append(_camera_entry(view.camera))
    (subject_dir / "cameras.json").write_text(json.dumps(entries, indent=2))
    if gt_params is not None:
        (subject_dir / "gt_params.json").write_text(
            json.dumps(gt_params.to_dict(), indent=2))


def load_subject(subject_dir) -> list:
    """Read a subject directory back into supervised views."""
    subject_dir = Path(subject_dir)
    cam_path = subject_dir / "cameras.json"
    if not cam_path.exists():
        raise FileNotFoundError(f"missing camera file: {cam_path}")
    entries = json.loads(cam_path.read_text())
    image_paths = sorted((subject_dir / "images").glob("*.png"))
    if len(image_paths) != len(entries):
        raise ValueError(
            f"{subject_dir}: {len(image_paths)} images but {len(entries)} cameras")
    views = []
    for path, entry in zip(image_paths, entries):
        img = images.load_png(path)
        h, w = img.shape[:2]
        cam = Camera.from_dict({**entry, "width": w, "height": h})
        mask = images.load_mask_png(subject_dir / "masks" / path.name)
        lp = json.loads((subject_dir / "landmarks" / f"{path.stem}.json").read_text())
        views.append(Supervision(
            image=img,
            mask=mask,
            landmarks=np.array(lp["points"], dtype=np.float64),
            visible=np.array(lp["visible"], dtype=bool),
            camera=cam,
        ))
    return views


def load_gt_params(subject_dir) -> FlameParams | None:
    path = Path(subject_dir) / "gt_params.json"
    if not path.exists():
        return None
    return FlameParams.from_dict(json.loads(path.read_text()))


# ---------------------------------------------------------------------------
# dataset directory layout


def synth_dataset(out_dir, seed: int, n_subjects: int, n_views: int,
                  fov_alpha: float = 0.75, res: int = 224,
                  assets: ModelAssets | None = None, per_face: int = 4) -> list:
    """Generate a dataset directory; returns the subject directory paths."""
    assert n_subjects >= 1 and n_views >= 1
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if assets is None:
        assets = synth_model(seed=seed)
    save_assets(assets, out / ASSETS_FILE)
    names = [f"{i:03d}" for i in range(n_subjects)]
    manifest = {
        "seed": seed, "n_subjects": n_subjects, "n_views": n_views,
        "fov_alpha": fov_alpha, "res": res, "subjects": names,
    }
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2))
    dirs = []
    for i, name in enumerate(names):
        views, params = synth_subject(assets, [seed, i], n_views, res,
                                      fov_alpha, per_face=per_face)
        subject_dir = out / SUBJECTS_DIR / name
        write_subject(subject_dir, views, params)
        dirs.append(subject_dir)
    return dirs


def load_dataset_assets(dataset_dir) -> ModelAssets:
    path = Path(dataset_dir) / ASSETS_FILE
    if not path.exists():
        raise FileNotFoundError(f"missing model assets: {path}")
    return load_assets(path)


def list_subjects(dataset_dir) -> list:
    root = Path(dataset_dir) / SUBJECTS_DIR
    if not root.is_dir():
        return []
    return sorted(p for p in root.iterdir() if p.is_dir())
