"""Assembly of the full deformable two-branch portrait model.

Holds the face and inside-mouth Gaussian clouds, the shared tri-plane hash
encoder and audio modulator, the expression modulator (face only) and both
deformation branches.  Rigid head motion is carried entirely by the per-frame
camera; the branches only model non-rigid offsets.

The hash encoder is queried at anchored canonical positions: a snapshot of
the cloud means taken at construction (and refreshed once via `reanchor()`
when dynamic training starts).  This keeps position gradients out of the
encoder path by definition rather than by an ad-hoc detach; set
`encode_grad_mu=True` to feed live positions instead.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Var, value_of
from .deform import DeformationBranch, apply_offsets, face_offsets, mouth_offsets
from .encoders import ConditionModulator, TriPlaneHashEncoder
from .render import Camera, GaussianCloud, RenderOutput, render

CODE_DIM = 36
EMB_DIM = 32


class PortraitModel:
    def __init__(self, face_cloud: GaussianCloud, mouth_cloud: GaussianCloud, *,
                 bbox_min, bbox_max, a_dim: int = 32, seed: int = 0,
                 hash_size_log2: int = 14, encode_grad_mu: bool = False,
                 mu_bound: float = 0.1):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE17C0DE]))
        self.face = face_cloud
        self.mouth = mouth_cloud
        self.a_dim = a_dim
        self.encode_grad_mu = encode_grad_mu
        self.encoder = TriPlaneHashEncoder(rng, bbox_min, bbox_max,
                                           hash_size_log2=hash_size_log2,
                                           grad_position=encode_grad_mu)
        if self.encoder.out_dim != CODE_DIM:
            raise ValueError("encoder output dimensionality must be 36")
        self.mod_a = ConditionModulator(rng, a_dim, CODE_DIM, emb_dim=EMB_DIM)
        self.mod_e = ConditionModulator(rng, 6, CODE_DIM, emb_dim=EMB_DIM)
        self.face_branch = DeformationBranch(rng, CODE_DIM + 2 * EMB_DIM,
                                             mu_bound=mu_bound)
        self.mouth_branch = DeformationBranch(rng, CODE_DIM + EMB_DIM,
                                              mu_bound=mu_bound)
        self.reanchor()

    # -- parameters ----------------------------------------------------------

    def params(self) -> dict:
        out = {}
        for region, cloud in (("face", self.face), ("mouth", self.mouth)):
            for k, v in cloud.params().items():
                out[f"prim.{region}.{k}"] = v
        out.update(self.encoder.params("net.encoder"))
        out.update(self.mod_a.params("net.mod_a"))
        out.update(self.mod_e.params("net.mod_e"))
        out.update(self.face_branch.params("net.face_mlp"))
        out.update(self.mouth_branch.params("net.mouth_mlp"))
        return out

    @staticmethod
    def decay_param(name: str) -> bool:
        """Decoupled weight decay applies to MLP weight matrices only."""
        leaf = name.rsplit(".", 1)[-1]
        return name.startswith("net.") and leaf.startswith("w") and leaf[1:].isdigit()

    @staticmethod
    def mouth_branch_params(name: str) -> bool:
        return name.startswith("prim.mouth.") or name.startswith("net.mouth_mlp.")

    @staticmethod
    def face_branch_params(name: str) -> bool:
        return not PortraitModel.mouth_branch_params(name)

    def reanchor(self):
        """Snapshot current cloud means as the canonical encoder positions."""
        self.anchor_face = np.array(value_of(self.face.mu))
        self.anchor_mouth = np.array(value_of(self.mouth.mu))

    # -- forward -------------------------------------------------------------

    def _codes(self, which: str):
        if self.encode_grad_mu:
            src = self.face.mu if which == "face" else self.mouth.mu
        else:
            src = self.anchor_face if which == "face" else self.anchor_mouth
        return self.encoder.encode(src)

    def offsets(self, a_vec, e_vec):
        """Per-frame deformation offsets for both clouds."""
        code_f = self._codes("face")
        code_m = self._codes("mouth")
        a_f = self.mod_a(code_f, a_vec)
        a_m = self.mod_a(code_m, a_vec)
        e_f = self.mod_e(code_f, e_vec)
        off_f = face_offsets(self.face_branch, code_f, a_f, e_f)
        off_m = mouth_offsets(self.mouth_branch, code_m, a_m)
        return off_f, off_m

    def deformed(self, a_vec, e_vec):
        off_f, off_m = self.offsets(a_vec, e_vec)
        return apply_offsets(self.face, off_f), apply_offsets(self.mouth, off_m)

    def render_frame(self, cam: Camera, a_vec, e_vec, *, deform: bool = True,
                     workers: int = 1) -> tuple[RenderOutput, RenderOutput]:
        """Render (face, mouth) for one frame's camera and conditions."""
        if deform:
            face, mouth = self.deformed(a_vec, e_vec)
        else:
            face, mouth = self.face, self.mouth
        out_f = render(face, cam, workers=workers)
        out_m = render(mouth, cam, workers=workers)
        return out_f, out_m

    def render_region(self, region: str, cam: Camera, a_vec=None, e_vec=None, *,
                      deform: bool = True, workers: int = 1) -> RenderOutput:
        if region not in ("face", "mouth"):
            raise ValueError("region must be 'face' or 'mouth'")
        if deform:
            if a_vec is None or e_vec is None:
                raise ValueError("deformation requires condition vectors")
            face, mouth = self.deformed(a_vec, e_vec)
        else:
            face, mouth = self.face, self.mouth
        cloud = face if region == "face" else mouth
        return render(cloud, cam, workers=workers)
