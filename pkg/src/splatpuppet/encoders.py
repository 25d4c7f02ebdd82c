"""Positional and condition encoders feeding the deformation branches.

A tri-plane multiresolution hash encoder maps canonical 3D positions to a
36-dim code (3 planes x 4 levels x 3 features).  Condition vectors (the
per-frame mouth-movement feature and the 6 action-unit intensities) pass
through small perceptrons and are gated per primitive by sigmoid attention
over the position code, so the same frame-wide signal modulates each
primitive differently.

Evaluation is read-only and thread-safe; parameter updates must be
single-writer between rendering passes.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Var, value_of
from .nn import MLP

HASH_PRIMES = (73856093, 19349663)  # standard 2-prime XOR spatial hashing


class TriPlaneHashEncoder:
    """Hash-grid encoder H: R^3 -> R^(3 * levels * features).

    Each of the XY / XZ / YZ planes carries `levels` feature grids whose
    vertices live in a hash table of 2**hash_size_log2 rows.  Codes are
    bilinear interpolations of the four hashed corner rows, so they are
    piecewise-bilinear in the input and exactly equal a vertex row when
    queried at that vertex.  Identical inputs always produce identical codes.
    """

    PLANES = ((0, 1), (0, 2), (1, 2))

    def __init__(self, rng: np.random.Generator, bbox_min, bbox_max, *,
                 levels: int = 4, features: int = 3, hash_size_log2: int = 14,
                 base_resolution: int = 16, growth: float = 1.5,
                 trainable: bool = True, grad_position: bool = False):
        self.bbox_min = np.asarray(bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(bbox_max, dtype=np.float64)
        if np.any(self.bbox_max <= self.bbox_min):
            raise ValueError("bounding box must have positive extent")
        self.levels = levels
        self.features = features
        self.table_size = 1 << hash_size_log2
        self.resolutions = [max(2, int(np.floor(base_resolution * growth ** l)))
                            for l in range(levels)]
        self.grad_position = grad_position
        self.clamped_inputs = 0  # out-of-box queries seen (they are clamped)
        tables = rng.uniform(-1e-4, 1e-4, (3 * levels, self.table_size, features))
        self.tables = Var(tables, requires_grad=True) if trainable else tables

    @property
    def out_dim(self) -> int:
        return 3 * self.levels * self.features

    def params(self, prefix: str = "encoder") -> dict:
        return {f"{prefix}.tables": self.tables}

    def _hash(self, xi: np.ndarray, yi: np.ndarray) -> np.ndarray:
        return ((xi * HASH_PRIMES[0]) ^ (yi * HASH_PRIMES[1])) % self.table_size

    def encode(self, mu):
        """Codes for positions (N, 3); clamps out-of-box inputs and counts them.

        Gradients flow into the hash tables; they flow into the positions only
        when the encoder was built with grad_position=True.
        """
        muv = value_of(mu)
        if muv.ndim != 2 or muv.shape[1] != 3:
            raise ValueError("positions must have shape (N, 3)")
        span = self.bbox_max - self.bbox_min
        uv_raw = (muv - self.bbox_min) / span
        clamped = (uv_raw < 0.0) | (uv_raw > 1.0)
        self.clamped_inputs += int(clamped.any(axis=1).sum())

        if self.grad_position and isinstance(mu, Var):
            u = ad.mul(ad.sub(mu, self.bbox_min), 1.0 / span)
        else:
            u = np.clip(uv_raw, 0.0, 1.0)
        uval = np.clip(uv_raw, 0.0, 1.0)

        parts = []
        for pi, pj in self.PLANES:
            for level in range(self.levels):
                parts.append(self._encode_plane_level(u, uval, pi, pj, level))
        return ad.concat(parts, axis=-1)

    def _encode_plane_level(self, u, uval, pi, pj, level):
        res = self.resolutions[level]
        plane_index = self.PLANES.index((pi, pj)) * self.levels + level
        xv = uval[:, pi] * (res - 1)
        yv = uval[:, pj] * (res - 1)
        x0 = np.floor(xv).astype(np.int64)
        y0 = np.floor(yv).astype(np.int64)
        x0 = np.clip(x0, 0, res - 2) if res > 1 else x0
        y0 = np.clip(y0, 0, res - 2) if res > 1 else y0
        x1 = x0 + 1
        y1 = y0 + 1

        if self.grad_position and isinstance(u, Var):
            fx = ad.sub(ad.mul(u[:, pi], float(res - 1)), x0.astype(np.float64))
            fy = ad.sub(ad.mul(u[:, pj], float(res - 1)), y0.astype(np.float64))
        else:
            fx = xv - x0
            fy = yv - y0

        idx = np.stack([self._hash(x0, y0), self._hash(x1, y0),
                        self._hash(x0, y1), self._hash(x1, y1)], axis=1)  # (N, 4)
        gx = ad.sub(1.0, fx)
        gy = ad.sub(1.0, fy)
        w = ad.stack([ad.mul(gx, gy), ad.mul(fx, gy),
                      ad.mul(gx, fy), ad.mul(fx, fy)], axis=1)            # (N, 4)
        rows = ad.take(self.tables, (plane_index, idx)) if isinstance(self.tables, Var) \
            else self.tables[plane_index, idx]                            # (N, 4, F)
        wexp = ad.reshape(w, value_of(w).shape + (1,))
        return ad.vsum(ad.mul(rows, wexp), axis=1)


class ConditionModulator:
    """Enc(raw) gated per primitive: feature = Enc(raw) * sigmoid(gate(code)).

    Enc is a 2-layer perceptron with a zero-initialized final layer, so a
    fresh modulator emits exactly zero features; the gate is a 2-layer
    perceptron over the 36-dim position code with sigmoid output, hence gate
    components always lie strictly inside (0, 1).
    """

    def __init__(self, rng: np.random.Generator, raw_dim: int, code_dim: int,
                 emb_dim: int = 32, hidden: int = 32):
        self.raw_dim = raw_dim
        self.emb_dim = emb_dim
        self.enc = MLP(rng, [raw_dim, hidden, emb_dim], zero_last=True)
        self.gate = MLP(rng, [code_dim, hidden, emb_dim], out_activation="sigmoid")

    def params(self, prefix: str) -> dict:
        out = self.enc.params(f"{prefix}.enc")
        out.update(self.gate.params(f"{prefix}.gate"))
        return out

    def __call__(self, code, raw):
        """Modulated feature (N, emb_dim) for codes (N, 36) and one raw vector."""
        rawv = value_of(raw)
        if rawv.shape != (self.raw_dim,):
            raise ValueError(f"condition vector must have shape ({self.raw_dim},), "
                             f"got {rawv.shape}")
        emb = self.enc(ad.reshape(raw, (1, self.raw_dim)))
        gate = self.gate(code)
        return ad.mul(gate, emb)
