"""Morphable-model assets: container type, synthetic generator, file IO.

The asset bundle mirrors a FLAME-style head model reduced to two joints
(root, jaw): a template mesh, linear shape/expression bases, a 9-channel
pose-corrective basis driven by vec(R_jaw - I), a joint regressor, smooth
skinning weights, and a 68-point barycentric landmark embedding.

`synth_model` builds a deterministic desk-scale stand-in (icosphere
ellipsoid + smooth random displacement bases) so the whole toolkit can be
exercised without any licensed model data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensorio


class AssetValidationError(ValueError):
    """An asset tensor violates a structural invariant."""


# ---------------------------------------------------------------------------
# types


@dataclass(eq=False)
class ModelAssets:
    template: np.ndarray  # (n_verts, 3) float32
    faces: np.ndarray  # (n_faces, 3) int32
    shape_basis: np.ndarray  # (n_verts*3, n_shape) float32
    expr_basis: np.ndarray  # (n_verts*3, n_expr) float32
    pose_basis: np.ndarray  # (n_verts*3, 9) float32
    joint_regressor: np.ndarray  # (2, n_verts) float32, rows sum to 1
    skin_weights: np.ndarray  # (n_verts, 2) float32, rows sum to 1
    landmark_faces: np.ndarray  # (68,) int32
    landmark_bary: np.ndarray  # (68, 3) float32, rows sum to 1
    kinematic_parents: np.ndarray  # (2,) int32, root parent = -1

    @property
    def n_verts(self) -> int:
        return self.template.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[1]

    @property
    def n_expr(self) -> int:
        return self.expr_basis.shape[1]

    def validate(self) -> None:
        validate_assets(self)


@dataclass(eq=False)
class FlameParams:
    """Regressed parameter set: M = s * V(beta, psi, theta) + t."""

    beta: np.ndarray
    psi: np.ndarray
    theta: np.ndarray = field(default_factory=lambda: np.zeros(6))
    scale: float = 1.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        self.psi = np.asarray(self.psi, dtype=np.float64).reshape(-1)
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        self.scale = float(self.scale)
        if self.theta.shape != (6,):
            raise ValueError(f"theta must have 6 entries, got {self.theta.shape}")
        if self.translation.shape != (3,):
            raise ValueError("translation must have 3 entries")
        if not (self.scale > 0):
            raise ValueError(f"scale must be positive, got {self.scale}")
        for name, arr in (("beta", self.beta), ("psi", self.psi), ("theta", self.theta), ("translation", self.translation)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in {name}")

    @staticmethod
    def zeros(n_shape: int, n_expr: int) -> "FlameParams":
        return FlameParams(beta=np.zeros(n_shape), psi=np.zeros(n_expr))

    def copy(self) -> "FlameParams":
        return FlameParams(self.beta.copy(), self.psi.copy(), self.theta.copy(), self.scale, self.translation.copy())

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "psi": self.psi.tolist(),
            "theta": self.theta.tolist(),
            "scale": self.scale,
            "translation": self.translation.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "FlameParams":
        return FlameParams(
            beta=np.array(d["beta"], dtype=np.float64),
            psi=np.array(d["psi"], dtype=np.float64),
            theta=np.array(d["theta"], dtype=np.float64),
            scale=float(d["scale"]),
            translation=np.array(d["translation"], dtype=np.float64),
        )


# ---------------------------------------------------------------------------
# validation


def validate_assets(a: ModelAssets) -> None:
    n_verts = a.template.shape[0]
    n_faces = a.faces.shape[0]
    if a.template.ndim != 2 or a.template.shape[1] != 3:
        raise AssetValidationError(f"template must be (n,3), got {a.template.shape}")
    if a.faces.ndim != 2 or a.faces.shape[1] != 3:
        raise AssetValidationError(f"faces must be (m,3), got {a.faces.shape}")
    if a.faces.size and (a.faces.min() < 0 or a.faces.max() >= n_verts):
        raise AssetValidationError("faces: vertex index out of range")
    for name, basis in (("shape_basis", a.shape_basis), ("expr_basis", a.expr_basis), ("pose_basis", a.pose_basis)):
        if basis.shape[0] != 3 * n_verts:
            raise AssetValidationError(f"{name}: leading dim {basis.shape[0]} != 3*n_verts = {3 * n_verts}")
    if a.pose_basis.shape[1] != 9:
        raise AssetValidationError(f"pose_basis must have 9 columns, got {a.pose_basis.shape[1]}")
    if a.joint_regressor.shape != (2, n_verts):
        raise AssetValidationError(f"joint_regressor must be (2, n_verts), got {a.joint_regressor.shape}")
    row_sums = a.joint_regressor.sum(axis=1)
    if not np.allclose(row_sums, 1.0, atol=1e-6):
        raise AssetValidationError(f"joint_regressor: row sums {row_sums} not 1 within 1e-6")
    if a.skin_weights.shape != (n_verts, 2):
        raise AssetValidationError(f"skin_weights must be (n_verts, 2), got {a.skin_weights.shape}")
    if a.skin_weights.min() < 0:
        raise AssetValidationError("skin_weights: negative entry")
    if not np.allclose(a.skin_weights.sum(axis=1), 1.0, atol=1e-6):
        raise AssetValidationError("skin_weights: row sums not 1 within 1e-6")
    if a.landmark_faces.shape != (68,) or a.landmark_bary.shape != (68, 3):
        raise AssetValidationError("landmark embedding must have 68 (face, bary) entries")
    if a.landmark_faces.size and (a.landmark_faces.min() < 0 or a.landmark_faces.max() >= n_faces):
        raise AssetValidationError("landmark_faces: face index out of range")
    if a.landmark_bary.min() < -1e-6 or a.landmark_bary.max() > 1 + 1e-6:
        raise AssetValidationError("landmark_bary: coordinates outside [0,1]")
    if not np.allclose(a.landmark_bary.sum(axis=1), 1.0, atol=1e-6):
        raise AssetValidationError("landmark_bary: rows do not sum to 1 within 1e-6")
    if a.kinematic_parents.shape != (2,) or a.kinematic_parents[0] != -1 or a.kinematic_parents[1] != 0:
        raise AssetValidationError("kinematic_parents must be [-1, 0] (root, jaw)")
    for name in ("template", "shape_basis", "expr_basis", "pose_basis", "joint_regressor", "skin_weights", "landmark_bary"):
        if not np.all(np.isfinite(getattr(a, name))):
            raise AssetValidationError(f"{name}: non-finite entries")


# ---------------------------------------------------------------------------
# icosphere


def _icosphere(level: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere by repeated 4-way subdivision. 10*4^level + 2 verts."""
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    for _ in range(level):
        vlist = list(verts)
        midpoint: dict[tuple[int, int], int] = {}

        def mid(i: int, j: int) -> int:
            key = (i, j) if i < j else (j, i)
            if key not in midpoint:
                p = vlist[i] + vlist[j]
                p = p / np.linalg.norm(p)
                midpoint[key] = len(vlist)
                vlist.append(p)
            return midpoint[key]

        new_faces = []
        for i, j, k in faces:
            a, b, c = mid(i, j), mid(j, k), mid(k, i)
            new_faces += [[i, a, c], [j, b, a], [k, c, b], [a, b, c]]
        verts = np.array(vlist)
        faces = np.array(new_faces, dtype=np.int64)
    return verts, faces


# ---------------------------------------------------------------------------
# spherical harmonics (real basis, used for smooth random fields)


def _legendre_pmm(m: int, x: np.ndarray) -> np.ndarray:
    p = np.ones_like(x)
    somx2 = np.sqrt(np.maximum(1.0 - x * x, 0.0))
    fact = 1.0
    for _ in range(m):
        p *= -fact * somx2
        fact += 2.0
    return p


def _assoc_legendre(l: int, m: int, x: np.ndarray) -> np.ndarray:
    pmm = _legendre_pmm(m, x)
    if l == m:
        return pmm
    pmmp1 = x * (2 * m + 1) * pmm
    if l == m + 1:
        return pmmp1
    for ll in range(m + 2, l + 1):
        pll = (x * (2 * ll - 1) * pmmp1 - (ll + m - 1) * pmm) / (ll - m)
        pmm, pmmp1 = pmmp1, pll
    return pmmp1


def _real_sh_basis(dirs: np.ndarray, max_degree: int) -> np.ndarray:
    """Real spherical harmonics evaluated at unit directions, (n, n_sh)."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    phi = np.arctan2(y, x)
    ct = z
    cols = []
    for l in range(max_degree + 1):
        for m in range(-l, l + 1):
            am = abs(m)
            k = math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - am) / math.factorial(l + am))
            p = _assoc_legendre(l, am, ct)
            if m == 0:
                cols.append(k * p)
            elif m > 0:
                cols.append(math.sqrt(2) * k * p * np.cos(am * phi))
            else:
                cols.append(math.sqrt(2) * k * p * np.sin(am * phi))
    return np.stack(cols, axis=1)


def _smooth_fields(rng: np.random.Generator, dirs: np.ndarray, n_cols: int, max_degree: int = 4) -> np.ndarray:
    """(n_verts*3, n_cols) matrix of smooth low-frequency displacement fields."""
    sh = _real_sh_basis(dirs, max_degree)  # (n, n_sh)
    degree = np.concatenate([[l] * (2 * l + 1) for l in range(max_degree + 1)])
    decay = 1.0 / (1.0 + degree) ** 2  # low-frequency emphasis
    n = dirs.shape[0]
    cols = np.empty((n * 3, n_cols))
    for c in range(n_cols):
        coef = rng.standard_normal((sh.shape[1], 3)) * decay[:, None]
        cols[:, c] = (sh @ coef).reshape(-1)
    return cols


def _gram_schmidt(mat: np.ndarray) -> np.ndarray:
    """Column-wise modified Gram-Schmidt with one re-orthogonalization pass."""
    q = mat.astype(np.float64).copy()
    for j in range(q.shape[1]):
        for _ in range(2):
            for i in range(j):
                q[:, j] -= (q[:, i] @ q[:, j]) * q[:, i]
        nrm = np.linalg.norm(q[:, j])
        if nrm < 1e-12:
            raise AssetValidationError("degenerate basis column during orthonormalization")
        q[:, j] /= nrm
    return q


# ---------------------------------------------------------------------------
# synthetic model


_ICO_COUNTS = [12, 42, 162, 642, 2562, 10242, 40962]


def synth_model(seed: int, n_verts_target: int = 642, n_shape: int = 8, n_expr: int = 4) -> ModelAssets:
    """Deterministic synthetic head model.

    Template: icosphere ellipsoid (1.0 x 1.2 x 1.1) normalized into
    [-1, 1]^3. Shape/expression bases: orthonormalized smooth random
    displacement fields. Jaw joint at the lower third, smooth vertical
    skinning falloff, 68 landmarks embedded on the front (+z) hemisphere.
    """
    if n_verts_target < 12:
        raise ValueError("n_verts_target must be >= 12")
    if n_shape < 1 or n_expr < 1:
        raise ValueError("n_shape and n_expr must be >= 1")
    level = 0
    while _ICO_COUNTS[level] < n_verts_target and level + 1 < len(_ICO_COUNTS):
        level += 1
    rng = np.random.default_rng(seed)

    dirs, faces = _icosphere(level)
    verts = dirs * np.array([1.0, 1.2, 1.1])
    verts /= np.abs(verts).max()  # bounding box inside [-1, 1]^3

    n_verts = verts.shape[0]
    shape_b = _gram_schmidt(_smooth_fields(rng, dirs, n_shape))
    expr_b = _gram_schmidt(_smooth_fields(rng, dirs, n_expr))
    # Pose correctives stay small: unit-norm columns would displace the head
    # by O(1) world units for modest jaw angles.
    pose_b = _smooth_fields(rng, dirs, 9)
    pose_b *= 0.05 / np.linalg.norm(pose_b, axis=0, keepdims=True)

    y = verts[:, 1]
    # root joint at the centroid, jaw joint pulled toward the lower third
    jreg = np.empty((2, n_verts))
    jreg[0] = 1.0 / n_verts
    jaw_w = np.exp(-((y - (-0.45)) ** 2) / (2 * 0.1**2))
    jreg[1] = jaw_w / jaw_w.sum()

    # smooth vertical falloff: jaw controls the lower part of the head
    w_jaw = 1.0 / (1.0 + np.exp((y - (-1.0 / 3.0)) / 0.15))
    skin = np.stack([1.0 - w_jaw, w_jaw], axis=1)

    centroids = verts[faces].mean(axis=1)
    front = np.flatnonzero(centroids[:, 2] > 0.3)
    replace = front.size < 68
    lm_faces = rng.choice(front, size=68, replace=replace)
    lm_bary = rng.dirichlet(np.ones(3), size=68)

    assets = ModelAssets(
        template=verts.astype(np.float32),
        faces=faces.astype(np.int32),
        shape_basis=shape_b.astype(np.float32),
        expr_basis=expr_b.astype(np.float32),
        pose_basis=pose_b.astype(np.float32),
        joint_regressor=jreg.astype(np.float32),
        skin_weights=skin.astype(np.float32),
        landmark_faces=lm_faces.astype(np.int32),
        landmark_bary=lm_bary.astype(np.float32),
        kinematic_parents=np.array([-1, 0], dtype=np.int32),
    )
    # float32 rounding can nudge row sums; renormalize exactly where cheap
    assets.skin_weights /= assets.skin_weights.sum(axis=1, keepdims=True)
    assets.joint_regressor /= assets.joint_regressor.sum(axis=1, keepdims=True)
    assets.landmark_bary /= assets.landmark_bary.sum(axis=1, keepdims=True)
    validate_assets(assets)
    return assets


# ---------------------------------------------------------------------------
# file IO


def save_assets(assets: ModelAssets, path) -> None:
    validate_assets(assets)
    tensors = {
        "template": assets.template,
        "faces": assets.faces.astype(np.float32),
        "shape_basis": assets.shape_basis,
        "expr_basis": assets.expr_basis,
        "pose_basis": assets.pose_basis,
        "joint_regressor": assets.joint_regressor,
        "skin_weights": assets.skin_weights,
        "landmark_faces": assets.landmark_faces.astype(np.float32),
        "landmark_bary": assets.landmark_bary,
        "kinematic_parents": assets.kinematic_parents.astype(np.float32),
    }
    tensorio.save_tensors(path, tensors)


_REQUIRED = (
    "template", "faces", "shape_basis", "expr_basis", "pose_basis",
    "joint_regressor", "skin_weights", "landmark_faces", "landmark_bary",
    "kinematic_parents",
)


def load_assets(path) -> ModelAssets:
    tensors = tensorio.load_tensors(path)
    missing = [n for n in _REQUIRED if n not in tensors]
    if missing:
        raise AssetValidationError(f"missing tensors: {missing}")

    def as_int(name: str) -> np.ndarray:
        arr = tensors[name]
        rounded = np.rint(arr)
        if not np.array_equal(rounded, arr):
            raise AssetValidationError(f"{name}: non-integral values in integer tensor")
        return rounded.astype(np.int32)

    assets = ModelAssets(
        template=tensors["template"],
        faces=as_int("faces"),
        shape_basis=tensors["shape_basis"],
        expr_basis=tensors["expr_basis"],
        pose_basis=tensors["pose_basis"],
        joint_regressor=tensors["joint_regressor"],
        skin_weights=tensors["skin_weights"],
        landmark_faces=as_int("landmark_faces"),
        landmark_bary=tensors["landmark_bary"],
        kinematic_parents=as_int("kinematic_parents"),
    )
    validate_assets(assets)
    return assets


def assets_equal(a: ModelAssets, b: ModelAssets) -> bool:
    return all(
        np.array_equal(getattr(a, name), getattr(b, name))
        for name in _REQUIRED
    )
