"""Triplane feature field, MLP attribute decoder, and gated parameter head.

Three R x R x C grids (XY, XZ, YZ) span [-1, 1]^3. A query projects the
point onto each plane, bilinearly interpolates (align-corners), and
concatenates the three C-vectors. Out-of-range points clamp to the border,
which also zeroes the positional gradient there.

All forward passes are float64; every operation ships a hand-rolled VJP.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# plane k reads these two point axes as (row, col) grid coordinates
_PLANE_AXES = ((0, 1), (0, 2), (1, 2))


@dataclass(eq=False)
class Triplane:
    features: np.ndarray  # (3, R, R, C) float64

    @property
    def resolution(self) -> int:
        return self.features.shape[1]

    @property
    def channels(self) -> int:
        return self.features.shape[3]

    def validate(self) -> None:
        f = self.features
        assert f.ndim == 4 and f.shape[0] == 3 and f.shape[1] == f.shape[2], (
            f"triplane grids must be (3, R, R, C), got {f.shape}"
        )
        assert np.all(np.isfinite(f)), "non-finite triplane features"


def init_triplane(seed: int, resolution: int = 32, channels: int = 16) -> Triplane:
    rng = np.random.default_rng(seed)
    feats = rng.normal(0.0, 0.01, size=(3, resolution, resolution, channels))
    return Triplane(features=feats)


def _grid_coords(p: np.ndarray, r: int):
    """Map clamped [-1,1] coords to cell index + fraction (align-corners)."""
    g = (p + 1.0) * 0.5 * (r - 1)
    i0 = np.clip(np.floor(g).astype(np.int64), 0, r - 2)
    return i0, g - i0


def query(tp: Triplane, points: np.ndarray) -> np.ndarray:
    """Sample the three planes at points (n, 3) -> features (n, 3C)."""
    pts = np.asarray(points, dtype=np.float64)
    assert pts.ndim == 2 and pts.shape[1] == 3, f"points must be (n, 3), got {pts.shape}"
    r = tp.resolution
    p = np.clip(pts, -1.0, 1.0)
    outs = []
    for k, (ax_a, ax_b) in enumerate(_PLANE_AXES):
        i0, fa = _grid_coords(p[:, ax_a], r)
        j0, fb = _grid_coords(p[:, ax_b], r)
        grid = tp.features[k]
        fa = fa[:, None]
        fb = fb[:, None]
        outs.append(
            grid[i0, j0] * (1 - fa) * (1 - fb)
            + grid[i0 + 1, j0] * fa * (1 - fb)
            + grid[i0, j0 + 1] * (1 - fa) * fb
            + grid[i0 + 1, j0 + 1] * fa * fb
        )
    return np.concatenate(outs, axis=1)


def vjp_query(tp: Triplane, points: np.ndarray, cotangent: np.ndarray):
    """Backward of query: returns (d_features (3,R,R,C), d_points (n,3)).

    Grid gradients are scattered with np.add.at in point order, so the
    accumulation is deterministic. Clamped coordinates get zero positional
    gradient.
    """
    pts = np.asarray(points, dtype=np.float64)
    r = tp.resolution
    c = tp.channels
    p = np.clip(pts, -1.0, 1.0)
    inside = np.abs(pts) < 1.0  # (n, 3); saturation kills the gradient
    cot = np.asarray(cotangent, dtype=np.float64)
    d_feats = np.zeros_like(tp.features)
    d_points = np.zeros_like(pts)
    half = 0.5 * (r - 1)
    for k, (ax_a, ax_b) in enumerate(_PLANE_AXES):
        i0, fa = _grid_coords(p[:, ax_a], r)
        j0, fb = _grid_coords(p[:, ax_b], r)
        grid = tp.features[k]
        g = cot[:, k * c : (k + 1) * c]
        fa_ = fa[:, None]
        fb_ = fb[:, None]
        np.add.at(d_feats[k], (i0, j0), g * (1 - fa_) * (1 - fb_))
        np.add.at(d_feats[k], (i0 + 1, j0), g * fa_ * (1 - fb_))
        np.add.at(d_feats[k], (i0, j0 + 1), g * (1 - fa_) * fb_)
        np.add.at(d_feats[k], (i0 + 1, j0 + 1), g * fa_ * fb_)

        dv_dfa = (grid[i0 + 1, j0] - grid[i0, j0]) * (1 - fb_) + (
            grid[i0 + 1, j0 + 1] - grid[i0, j0 + 1]
        ) * fb_
        dv_dfb = (grid[i0, j0 + 1] - grid[i0, j0]) * (1 - fa_) + (
            grid[i0 + 1, j0 + 1] - grid[i0 + 1, j0]
        ) * fa_
        d_points[:, ax_a] += np.sum(g * dv_dfa, axis=1) * half * inside[:, ax_a]
        d_points[:, ax_b] += np.sum(g * dv_dfb, axis=1) * half * inside[:, ax_b]
    return d_feats, d_points


def bilinear_lipschitz_bound(tp: Triplane) -> float:
    """Upper bound on ||query(x) - query(y)|| / ||x - y|| within one cell."""
    f = tp.features
    half = 0.5 * (tp.resolution - 1)
    da = np.abs(np.diff(f, axis=1)).max() if tp.resolution > 1 else 0.0
    db = np.abs(np.diff(f, axis=2)).max() if tp.resolution > 1 else 0.0
    c = tp.channels
    # each output channel changes at most (da + db) * half per unit step
    return float((da + db) * half * np.sqrt(3 * c) * np.sqrt(3))


# ---------------------------------------------------------------------------
# attribute decoder


@dataclass(eq=False)
class AttributeMLP:
    """3C -> H -> H -> 10 decoder, ReLU hidden layers, raw linear output."""

    w0: np.ndarray
    b0: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    _FIELDS = ("w0", "b0", "w1", "b1", "w2", "b2")

    def validate(self) -> None:
        assert self.w0.shape[1] == self.b0.shape[0] == self.w1.shape[0]
        assert self.w1.shape[1] == self.b1.shape[0] == self.w2.shape[0]
        assert self.w2.shape[1] == self.b2.shape[0]
        for name in self._FIELDS:
            assert np.all(np.isfinite(getattr(self, name))), f"non-finite {name}"

    @property
    def in_dim(self) -> int:
        return self.w0.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]

    def flatten(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).reshape(-1) for n in self._FIELDS])

    def with_flat(self, flat: np.ndarray) -> "AttributeMLP":
        out = {}
        offset = 0
        for name in self._FIELDS:
            shape = getattr(self, name).shape
            size = int(np.prod(shape))
            out[name] = np.asarray(flat[offset : offset + size], dtype=np.float64).reshape(shape)
            offset += size
        assert offset == flat.size, "flat weight vector has wrong length"
        return AttributeMLP(**out)


def _kaiming_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_attribute_mlp(seed: int, in_dim: int, hidden: int = 64, out_dim: int = 10) -> AttributeMLP:
    """Kaiming-uniform weights, zero biases; the raw-quaternion bias starts
    at (1,0,0,0) so freshly initialized splats have an identity frame."""
    rng = np.random.default_rng(seed)
    b2 = np.zeros(out_dim)
    if out_dim == 10:
        b2[3] = 1.0
    return AttributeMLP(
        w0=_kaiming_uniform(rng, in_dim, hidden),
        b0=np.zeros(hidden),
        w1=_kaiming_uniform(rng, hidden, hidden),
        b1=np.zeros(hidden),
        w2=_kaiming_uniform(rng, hidden, out_dim),
        b2=b2,
    )


def decode_attributes(mlp: AttributeMLP, features: np.ndarray) -> np.ndarray:
    """Plain forward pass (n, 3C) -> raw attributes (n, 10). No activations."""
    x = np.asarray(features, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None]
    if x.shape[1] != mlp.in_dim:
        raise ValueError(f"feature dim {x.shape[1]} != decoder input dim {mlp.in_dim}")
    h0 = np.maximum(x @ mlp.w0 + mlp.b0, 0.0)
    h1 = np.maximum(h0 @ mlp.w1 + mlp.b1, 0.0)
    out = h1 @ mlp.w2 + mlp.b2
    return out[0] if squeeze else out


def vjp_decode_attributes(mlp: AttributeMLP, features: np.ndarray, cotangent: np.ndarray):
    """Backward of decode_attributes: (d_features, d_weights_flat)."""
    x = np.asarray(features, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None]
    cot = np.asarray(cotangent, dtype=np.float64)
    if squeeze:
        cot = cot[None]
    z0 = x @ mlp.w0 + mlp.b0
    h0 = np.maximum(z0, 0.0)
    z1 = h0 @ mlp.w1 + mlp.b1
    h1 = np.maximum(z1, 0.0)

    d_w2 = h1.T @ cot
    d_b2 = cot.sum(axis=0)
    d_h1 = cot @ mlp.w2.T
    d_z1 = d_h1 * (z1 > 0)
    d_w1 = h0.T @ d_z1
    d_b1 = d_z1.sum(axis=0)
    d_h0 = d_z1 @ mlp.w1.T
    d_z0 = d_h0 * (z0 > 0)
    d_w0 = x.T @ d_z0
    d_b0 = d_z0.sum(axis=0)
    d_x = d_z0 @ mlp.w0.T

    d_flat = np.concatenate([a.reshape(-1) for a in (d_w0, d_b0, d_w1, d_b1, d_w2, d_b2)])
    return (d_x[0] if squeeze else d_x), d_flat


# ---------------------------------------------------------------------------
# gated parameter head


@dataclass(eq=False)
class GateHead:
    """Per-token gate MLP (C_tok -> 32 -> 1, sigmoid) + linear readout from
    the mean-pooled gated tokens to raw parameter predictions."""

    gw0: np.ndarray
    gb0: np.ndarray
    gw1: np.ndarray
    gb1: np.ndarray
    read_w: np.ndarray
    read_b: np.ndarray

    _FIELDS = ("gw0", "gb0", "gw1", "gb1", "read_w", "read_b")

    @property
    def token_dim(self) -> int:
        return self.gw0.shape[0]

    @property
    def out_dim(self) -> int:
        return self.read_w.shape[1]

    def flatten(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).reshape(-1) for n in self._FIELDS])

    def with_flat(self, flat: np.ndarray) -> "GateHead":
        out = {}
        offset = 0
        for name in self._FIELDS:
            shape = getattr(self, name).shape
            size = int(np.prod(shape))
            out[name] = np.asarray(flat[offset : offset + size], dtype=np.float64).reshape(shape)
            offset += size
        assert offset == flat.size, "flat weight vector has wrong length"
        return GateHead(**out)


def init_gate_head(seed: int, token_dim: int, out_dim: int, hidden: int = 32) -> GateHead:
    rng = np.random.default_rng(seed)
    return GateHead(
        gw0=_kaiming_uniform(rng, token_dim, hidden),
        gb0=np.zeros(hidden),
        gw1=_kaiming_uniform(rng, hidden, 1),
        gb1=np.zeros(1),
        read_w=_kaiming_uniform(rng, token_dim, out_dim),
        read_b=np.zeros(out_dim),
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gate_tokens(head: GateHead, tokens: np.ndarray):
    """Importance-gate each token: returns (gated (n, C), gates (n,))."""
    t = np.asarray(tokens, dtype=np.float64)
    h = np.maximum(t @ head.gw0 + head.gb0, 0.0)
    logits = (h @ head.gw1 + head.gb1)[:, 0]
    gates = _sigmoid(logits)
    return gates[:, None] * t, gates


def regress_params(head: GateHead, tokens: np.ndarray) -> np.ndarray:
    """Mean-pool gated tokens, then linear readout to raw parameters."""
    gated, _ = gate_tokens(head, tokens)
    pooled = gated.mean(axis=0)
    return pooled @ head.read_w + head.read_b


def vjp_regress_params(head: GateHead, tokens: np.ndarray, cotangent: np.ndarray):
    """Backward of regress_params: (d_tokens, d_weights_flat)."""
    t = np.asarray(tokens, dtype=np.float64)
    n = t.shape[0]
    cot = np.asarray(cotangent, dtype=np.float64)

    h = np.maximum(t @ head.gw0 + head.gb0, 0.0)
    z = t @ head.gw0 + head.gb0
    logits = (h @ head.gw1 + head.gb1)[:, 0]
    gates = _sigmoid(logits)
    gated = gates[:, None] * t
    pooled = gated.mean(axis=0)

    d_read_w = np.outer(pooled, cot)
    d_read_b = cot.copy()
    d_pooled = head.read_w @ cot
    d_gated = np.tile(d_pooled / n, (n, 1))

    d_gates = np.sum(d_gated * t, axis=1)
    d_tokens = d_gated * gates[:, None]
    d_logits = d_gates * gates * (1.0 - gates)
    d_h = d_logits[:, None] * head.gw1[None, :, 0]
    d_gw1 = h.T @ d_logits[:, None]
    d_gb1 = np.array([d_logits.sum()])
    d_z = d_h * (z > 0)
    d_gw0 = t.T @ d_z
    d_gb0 = d_z.sum(axis=0)
    d_tokens += d_z @ head.gw0.T

    d_flat = np.concatenate(
        [a.reshape(-1) for a in (d_gw0, d_gb0, d_gw1, d_gb1, d_read_w, d_read_b)]
    )
    return d_tokens, d_flat
