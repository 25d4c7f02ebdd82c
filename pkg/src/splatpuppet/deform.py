"""Deformation branches: per-primitive offsets from codes and conditions.

The face branch consumes code + audio feature + expression feature; the
inside-mouth branch consumes code + audio feature only, so mouth offsets are
invariant to the expression vector by construction.  Offsets are additive in
position and log-scale and additive in quaternion space; the quaternion is
renormalized at activation time (inside covariance construction), which keeps
the zero-offset render bit-identical to the static render.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import value_of
from .nn import MLP
from .render import GaussianCloud


@dataclass
class DeformationOffsets:
    d_mu: object      # (N, 3)
    d_log_s: object   # (N, 3)
    d_q: object       # (N, 4)

    @property
    def count(self) -> int:
        return value_of(self.d_mu).shape[0]


class DeformationBranch:
    """MLP head mapping concatenated features to {d_mu, d_log_s, d_q}.

    Hidden width 64, three linear layers, zero-initialized output layer so a
    fresh branch is the identity deformation.  Position offsets are soft
    bounded by mu_bound * tanh(raw / mu_bound) to keep early training stable.
    """

    def __init__(self, rng: np.random.Generator, in_dim: int, *,
                 hidden: int = 64, mu_bound: float = 0.1):
        self.in_dim = in_dim
        self.mu_bound = float(mu_bound)
        self.mlp = MLP(rng, [in_dim, hidden, hidden, 10], zero_last=True)

    def params(self, prefix: str) -> dict:
        return self.mlp.params(prefix)

    def __call__(self, features) -> DeformationOffsets:
        fv = value_of(features)
        if fv.ndim != 2 or fv.shape[1] != self.in_dim:
            raise ValueError(
                f"branch expects features of width {self.in_dim}, got {fv.shape}")
        raw = self.mlp(features)
        d_mu = ad.mul(ad.tanh(ad.mul(raw[:, 0:3], 1.0 / self.mu_bound)), self.mu_bound)
        return DeformationOffsets(d_mu=d_mu, d_log_s=raw[:, 3:6], d_q=raw[:, 6:10])


def face_offsets(branch: DeformationBranch, code, a_feat, e_feat) -> DeformationOffsets:
    """Offsets for the face cloud from code + audio + expression features."""
    return branch(ad.concat([code, a_feat, e_feat], axis=-1))


def mouth_offsets(branch: DeformationBranch, code, a_feat) -> DeformationOffsets:
    """Offsets for the inside-mouth cloud; takes no expression input."""
    return branch(ad.concat([code, a_feat], axis=-1))


def apply_offsets(cloud: GaussianCloud, off: DeformationOffsets) -> GaussianCloud:
    """Deformed cloud: mu + d_mu, log_s + d_log_s, q + d_q; alpha and SH as-is.

    The summed quaternion is normalized by the activation in covariance
    construction, so the effective rotation is normalize(q + d_q).
    """
    if off.count != cloud.count:
        raise ValueError(f"offsets cover {off.count} primitives, cloud has {cloud.count}")
    return GaussianCloud(mu=ad.add(cloud.mu, off.d_mu),
                         log_s=ad.add(cloud.log_s, off.d_log_s),
                         q=ad.add(cloud.q, off.d_q),
                         alpha_logit=cloud.alpha_logit,
                         sh=cloud.sh)
