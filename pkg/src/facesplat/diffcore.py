"""Flat parameter vectors, Adam, and finite-difference gradient checking.

Every optimizable quantity lives in a named block of one flat float64 array.
Blocks come from a fixed vocabulary so optimizers and serializers can agree
on layout without extra plumbing; a given pipeline registers the subset it
actually optimizes.
"""

from __future__ import annotations

import numpy as np

CANONICAL_BLOCKS = (
    "beta",
    "psi",
    "theta",
    "log_scale",
    "translation",
    "triplane_features",
    "decoder_weights",
    "gate_weights",
)


class ParamVector:
    """Named blocks packed into one flat float64 array."""

    def __init__(self, blocks: dict[str, np.ndarray]):
        unknown = [k for k in blocks if k not in CANONICAL_BLOCKS]
        assert not unknown, f"unknown parameter blocks: {unknown}"
        names = [k for k in CANONICAL_BLOCKS if k in blocks]
        self._layout: dict[str, tuple[int, tuple[int, ...]]] = {}
        offset = 0
        parts = []
        for name in names:
            arr = np.asarray(blocks[name], dtype=np.float64)
            self._layout[name] = (offset, arr.shape)
            offset += arr.size
            parts.append(arr.reshape(-1))
        self.data = np.concatenate(parts) if parts else np.zeros(0)

    @property
    def block_names(self) -> tuple[str, ...]:
        return tuple(self._layout)

    def _span(self, name: str) -> tuple[int, int, tuple[int, ...]]:
        offset, shape = self._layout[name]
        size = int(np.prod(shape)) if shape else 1
        return offset, offset + size, shape

    def get(self, name: str) -> np.ndarray:
        lo, hi, shape = self._span(name)
        return self.data[lo:hi].reshape(shape)

    def set(self, name: str, value) -> None:
        lo, hi, shape = self._span(name)
        arr = np.asarray(value, dtype=np.float64).reshape(shape)
        self.data[lo:hi] = arr.reshape(-1)

    def add_to(self, name: str, value) -> None:
        lo, hi, shape = self._span(name)
        arr = np.asarray(value, dtype=np.float64).reshape(shape)
        self.data[lo:hi] += arr.reshape(-1)

    def copy(self) -> "ParamVector":
        out = object.__new__(ParamVector)
        out._layout = dict(self._layout)
        out.data = self.data.copy()
        return out

    def zeros_like(self) -> "ParamVector":
        out = self.copy()
        out.data[:] = 0.0
        return out

    def asdict(self) -> dict[str, np.ndarray]:
        return {name: self.get(name).copy() for name in self._layout}

    def block_of_index(self, flat_index: int) -> str:
        for name in self._layout:
            lo, hi, _ = self._span(name)
            if lo <= flat_index < hi:
                return name
        raise IndexError(flat_index)

    def __len__(self) -> int:
        return self.data.size


class Adam:
    """Adam with bias correction and optional per-block learning rates."""

    def __init__(self, params: ParamVector, lr: float = 1e-2, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 lr_multipliers: dict[str, float] | None = None):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros_like(params.data)
        self.v = np.zeros_like(params.data)
        self.t = 0
        self._scale = np.full_like(params.data, lr)
        for name, mult in (lr_multipliers or {}).items():
            lo, hi, _ = params._span(name)
            self._scale[lo:hi] = lr * mult

    def step(self, grad: ParamVector) -> None:
        g = grad.data
        if not np.all(np.isfinite(g)):
            bad = int(np.flatnonzero(~np.isfinite(g))[0])
            name = grad.block_of_index(bad)
            raise FloatingPointError(f"non-finite gradient in block '{name}'")
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        self.params.data -= self._scale * m_hat / (np.sqrt(v_hat) + self.eps)


def fd_check(f, grad, point: ParamVector, step: float = 1e-5,
             n_probes: int = 64, seed: int = 0) -> list[dict]:
    """Compare an analytic gradient against central differences.

    f: ParamVector -> float.  grad: ParamVector -> ParamVector.
    Probes a deterministic random subset of coordinates per block (all of
    them if the block is smaller than n_probes) and reports, per block,
    {"name", "probes", "max_rel_err", "argmax_index"}.
    """
    analytic = grad(point)
    rng = np.random.default_rng(seed)
    report = []
    for name in point.block_names:
        lo, hi, _ = point._span(name)
        size = hi - lo
        if size <= n_probes:
            idx = np.arange(lo, hi)
        else:
            idx = lo + rng.choice(size, size=n_probes, replace=False)
        max_rel = 0.0
        arg = int(idx[0]) - lo
        for i in idx:
            x = point.copy()
            x.data[i] += step
            up = f(x)
            x.data[i] -= 2.0 * step
            dn = f(x)
            numeric = (up - dn) / (2.0 * step)
            a = float(analytic.data[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > max_rel:
                max_rel = rel
                arg = int(i) - lo
        report.append({
            "name": name,
            "probes": int(len(idx)),
            "max_rel_err": float(max_rel),
            "argmax_index": arg,
        })
    return report
