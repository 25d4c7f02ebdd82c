"""Head pose estimation from flow-tracked rigid keypoints.

Keypoints are selected where the flow field is spatially smooth (small
Laplacian of the flow magnitude) and temporally stable (small variance of
the magnitude), which favors rigid regions over deforming ones without any
semantic prior.  Tracked trajectories are aligned with projected rigid 3D
landmarks by first-order descent with a backtracking line search over
per-frame axis-angle increments, per-frame translations and one shared
focal length.  Frames whose residual exceeds mean + 2 std are flagged
ineligible for the motion-consistency loss but stay in the training set.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve

from . import autodiff as ad
from . import geometry as geo
from .autodiff import Var, value_of
from .render import Camera

log = logging.getLogger(__name__)

NMS_RADIUS = 8.0
OUTLIER_SIGMA = 2.0
MIN_KEYPOINTS_PER_FRAME = 4
_LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


@dataclass
class PoseSolution:
    """Per-frame extrinsics over a shared base rotation, plus one focal."""

    base_rot: np.ndarray               # (3, 3)
    axis_angle: np.ndarray             # (T, 3) increments over base_rot
    trans: np.ndarray                  # (T, 3)
    focal: float
    width: int
    height: int
    residuals: np.ndarray = None       # (T,) flow-error scores
    mcc_eligible: np.ndarray = None    # (T,) bool
    constrained: np.ndarray = None     # (T,) bool: >= 4 valid keypoints

    def __post_init__(self):
        T = self.axis_angle.shape[0]
        if self.residuals is None:
            self.residuals = np.zeros(T)
        if self.mcc_eligible is None:
            self.mcc_eligible = np.ones(T, dtype=bool)
        if self.constrained is None:
            self.constrained = np.ones(T, dtype=bool)
        if self.focal <= 0:
            raise ValueError("focal must be positive")

    @property
    def frame_count(self) -> int:
        return self.axis_angle.shape[0]

    def rotation(self, t: int) -> np.ndarray:
        return np.asarray(geo.axis_angle_to_rotmat(self.axis_angle[t])) @ self.base_rot

    def camera(self, t: int) -> Camera:
        return Camera(rot=self.rotation(t), trans=self.trans[t].copy(),
                      focal=self.focal, width=self.width, height=self.height)

    def to_json(self) -> dict:
        frames = []
        for t in range(self.frame_count):
            # export the total rotation so entries stand alone
            aa_total = geo.rotmat_to_axis_angle(self.rotation(t))
            frames.append({
                "frame": t,
                "axis_angle": [float(v) for v in aa_total],
                "translation": [float(v) for v in self.trans[t]],
                "residual": float(self.residuals[t]),
                "mcc_eligible": bool(self.mcc_eligible[t]),
            })
        return {"focal": float(self.focal), "width": self.width,
                "height": self.height, "frames": frames}

    @staticmethod
    def from_json(obj: dict) -> "PoseSolution":
        frames = obj["frames"]
        T = len(frames)
        aa = np.array([f["axis_angle"] for f in frames], dtype=np.float64)
        tr = np.array([f["translation"] for f in frames], dtype=np.float64)
        sol = PoseSolution(base_rot=np.eye(3), axis_angle=aa, trans=tr,
                           focal=float(obj["focal"]), width=int(obj["width"]),
                           height=int(obj["height"]))
        sol.residuals = np.array([f["residual"] for f in frames])
        sol.mcc_eligible = np.array([f["mcc_eligible"] for f in frames], dtype=bool)
        return sol

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)

    @staticmethod
    def load(path) -> "PoseSolution":
        with open(path) as fh:
            return PoseSolution.from_json(json.load(fh))


# -- keypoint selection --------------------------------------------------------


def extract_rigid_keypoints(flows: np.ndarray, count: int) -> np.ndarray:
    """Pixels minimizing |Laplacian of flow magnitude| + temporal variance.

    `flows` is (T-1, H, W, 2).  Returns up to `count` keypoints (x, y) at
    pixel centers, greedily selected in ascending score order subject to a
    minimum pairwise distance of NMS_RADIUS pixels; border pixels are
    excluded (the discrete Laplacian needs a full 3x3 neighborhood).
    """
    flows = np.asarray(flows, dtype=np.float64)
    if count == 0:
        return np.zeros((0, 2))
    if flows.ndim != 4 or flows.shape[0] < 1 or flows.shape[3] != 2:
        raise ValueError("flows must have shape (T-1, H, W, 2) with T >= 2")
    mag = np.sqrt(flows[..., 0] ** 2 + flows[..., 1] ** 2)
    lap = np.stack([np.abs(convolve(m, _LAPLACIAN, mode="nearest")) for m in mag])
    score = lap.mean(axis=0) + mag.var(axis=0)
    score[0, :] = np.inf
    score[-1, :] = np.inf
    score[:, 0] = np.inf
    score[:, -1] = np.inf

    order = np.argsort(score, axis=None, kind="stable")
    h, w = score.shape
    chosen = []
    for flat in order:
        if len(chosen) == count:
            break
        if not np.isfinite(score.flat[flat]):
            break
        i, j = divmod(int(flat), w)
        ok = all((i - ci) ** 2 + (j - cj) ** 2 >= NMS_RADIUS ** 2 for ci, cj in chosen)
        if ok:
            chosen.append((i, j))
    if len(chosen) < count:
        log.warning("only %d of %d keypoints satisfy the NMS spacing",
                    len(chosen), count)
    return np.array([(j + 0.5, i + 0.5) for i, j in chosen], dtype=np.float64)


def _bilinear(field: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample (H, W, C) at pixel-center coordinates (x, y), edge-clamped."""
    h, w = field.shape[:2]
    fx = np.clip(x - 0.5, 0.0, w - 1.0)
    fy = np.clip(y - 0.5, 0.0, h - 1.0)
    x0 = np.clip(np.floor(fx).astype(int), 0, w - 2) if w > 1 else np.zeros_like(fx, int)
    y0 = np.clip(np.floor(fy).astype(int), 0, h - 2) if h > 1 else np.zeros_like(fy, int)
    tx = fx - x0
    ty = fy - y0
    v00 = field[y0, x0]
    v01 = field[y0, x0 + 1]
    v10 = field[y0 + 1, x0]
    v11 = field[y0 + 1, x0 + 1]
    tx = tx[..., None]
    ty = ty[..., None]
    return (v00 * (1 - tx) * (1 - ty) + v01 * tx * (1 - ty)
            + v10 * (1 - tx) * ty + v11 * tx * ty)


@dataclass
class RigidTrajectory:
    positions: np.ndarray   # (T, K, 2)
    valid: np.ndarray       # (T, K) bool

    @property
    def frame_count(self):
        return self.positions.shape[0]


def track_trajectory(keypoints: np.ndarray, flows: np.ndarray) -> RigidTrajectory:
    """Advect keypoints through consecutive flow fields by bilinear sampling.

    A point leaving the image stays invalid for all later frames.
    """
    flows = np.asarray(flows, dtype=np.float64)
    tm1, h, w = flows.shape[:3]
    k = keypoints.shape[0]
    pos = np.zeros((tm1 + 1, k, 2))
    valid = np.ones((tm1 + 1, k), dtype=bool)
    pos[0] = keypoints
    valid[0] = ((keypoints[:, 0] >= 0) & (keypoints[:, 0] <= w)
                & (keypoints[:, 1] >= 0) & (keypoints[:, 1] <= h))
    for t in range(tm1):
        f = _bilinear(flows[t], pos[t, :, 0], pos[t, :, 1])
        pos[t + 1] = pos[t] + f
        inside = ((pos[t + 1, :, 0] >= 0) & (pos[t + 1, :, 0] <= w)
                  & (pos[t + 1, :, 1] >= 0) & (pos[t + 1, :, 1] <= h))
        valid[t + 1] = valid[t] & inside
    return RigidTrajectory(positions=pos, valid=valid)


def match_keypoints_to_landmarks(keypoints: np.ndarray, landmarks3d: np.ndarray,
                                 camera: Camera, max_px: float = 3.0):
    """Greedy 1:1 pairing of keypoints to landmarks by frame-0 projection.

    Returns (landmark_indices, keypoint_indices); unmatched keypoints (no
    landmark projects within max_px) are dropped.
    """
    R, t = value_of(camera.rot), value_of(camera.trans)
    p = (landmarks3d @ R.T) + t
    cx, cy = camera.principal_point
    proj = np.column_stack([camera.focal * p[:, 0] / p[:, 2] + cx,
                            camera.focal * p[:, 1] / p[:, 2] + cy])
    li, ki = [], []
    used = set()
    for kidx, kp in enumerate(keypoints):
        d = np.linalg.norm(proj - kp, axis=1)
        for cand in np.argsort(d, kind="stable"):
            if d[cand] > max_px:
                break
            if int(cand) not in used:
                used.add(int(cand))
                li.append(int(cand))
                ki.append(kidx)
                break
    return np.array(li, dtype=int), np.array(ki, dtype=int)


# -- camera fitting --------------------------------------------------------------


@dataclass
class FitReport:
    loss_history: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def fit_camera(trajectory: RigidTrajectory, landmarks3d: np.ndarray,
               init: PoseSolution, *, max_iters: int = 5000,
               tol: float = 1e-8, patience: int = 50) -> tuple[PoseSolution, FitReport]:
    """Minimize the flow-alignment loss sum_t ||P_t - K_t||_2.

    P_t projects the rigid 3D landmarks through per-frame (R, T) and the
    shared focal; K_t is the tracked trajectory.  First-order descent with a
    backtracking (Armijo) line search; the accepted-iteration loss is
    non-increasing.  Frames with fewer than MIN_KEYPOINTS_PER_FRAME valid
    keypoints are unconstrained and skipped in the sum.
    """
    T = trajectory.frame_count
    K = landmarks3d.shape[0]
    if trajectory.positions.shape[1] != K:
        raise ValueError("landmarks must correspond 1:1 to tracked keypoints")
    valid = trajectory.valid
    constrained = valid.sum(axis=1) >= MIN_KEYPOINTS_PER_FRAME
    for t in np.nonzero(~constrained)[0]:
        log.warning("frame %d has < %d valid keypoints; unconstrained",
                    t, MIN_KEYPOINTS_PER_FRAME)

    X = np.asarray(landmarks3d, dtype=np.float64)          # (K, 3)
    target = np.transpose(trajectory.positions, (0, 2, 1))  # (T, 2, K)
    wmask = (valid.astype(np.float64) * constrained[:, None])[:, None, :]  # (T,1,K)
    base = init.base_rot
    cx, cy = init.width / 2.0, init.height / 2.0
    f0 = float(init.focal)

    aa = Var(init.axis_angle.copy(), requires_grad=True)
    tr = Var(init.trans.copy(), requires_grad=True)
    phi = Var(np.zeros(()), requires_grad=True)

    def forward(aa_p, tr_p, phi_p):
        R = ad.matmul(geo.axis_angle_to_rotmat(aa_p), base)          # (T,3,3)
        pts = ad.add(ad.matmul(R, X.T), ad.reshape(tr_p, (T, 3, 1)))  # (T,3,K)
        f = ad.mul(ad.exp(phi_p), f0)
        x, y, z = pts[:, 0, :], pts[:, 1, :], pts[:, 2, :]
        u = ad.add(ad.div(ad.mul(x, f), z), cx)
        v = ad.add(ad.div(ad.mul(y, f), z), cy)
        proj = ad.stack([u, v], axis=1)                               # (T,2,K)
        diff = ad.mul(ad.sub(proj, target), wmask)
        r = ad.safe_norm(ad.reshape(diff, (T, 2 * K)), axis=1)        # (T,)
        return ad.vsum(r), r

    # First-order descent with backtracking step control.  The raw gradient
    # direction stalls in the nearly flat focal-vs-depth valley, so the
    # direction is rescaled by adaptive first/second moments (Adam-style
    # diagonal preconditioning); a step is accepted only if the loss strictly
    # decreases, which keeps the loss non-increasing across iterations.
    report = FitReport()
    params = [aa, tr, phi]
    loss_v, _ = forward(*params)
    loss_val = float(value_of(loss_v))
    report.loss_history.append(loss_val)
    lr0 = 1e-2
    lr = lr0
    b1, b2, eps = 0.9, 0.999, 1e-8
    mom = [np.zeros_like(p.value) for p in params]
    sec = [np.zeros_like(p.value) for p in params]
    for it in range(1, max_iters + 1):
        for p in params:
            p.zero_grad()
        loss_var, _ = forward(*params)
        ad.backward(loss_var)
        g = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in params]
        if all(np.all(gi == 0.0) for gi in g):
            report.converged = True
            break
        mom = [b1 * mi + (1 - b1) * gi for mi, gi in zip(mom, g)]
        sec = [b2 * si + (1 - b2) * gi * gi for si, gi in zip(sec, g)]
        direction = [(mi / (1 - b1 ** it)) / (np.sqrt(si / (1 - b2 ** it)) + eps)
                     for mi, si in zip(mom, sec)]
        old = [p.value.copy() for p in params]
        accepted = False
        trial = lr
        for _ in range(30):
            for p, o, di in zip(params, old, direction):
                p.value = o - trial * di
            with ad.no_grad():
                new_loss = float(value_of(forward(aa.value, tr.value, phi.value)[0]))
            if new_loss < loss_val:
                accepted = True
                break
            trial *= 0.5
        if not accepted:
            for p, o in zip(params, old):
                p.value = o
            report.converged = True
            break
        loss_val = new_loss
        report.loss_history.append(loss_val)
        lr = min(trial * 1.2, lr0)
        report.iterations = it
        if len(report.loss_history) > patience and \
                report.loss_history[-patience - 1] - loss_val < tol:
            report.converged = True
            break

    with ad.no_grad():
        _, res = forward(aa.value, tr.value, phi.value)
    sol = PoseSolution(base_rot=base.copy(), axis_angle=aa.value.copy(),
                       trans=tr.value.copy(), focal=f0 * float(np.exp(phi.value)),
                       width=init.width, height=init.height)
    sol.residuals = np.asarray(value_of(res)).copy()
    sol.constrained = constrained
    return sol, report


def filter_outlier_frames(solution: PoseSolution) -> PoseSolution:
    """Flag frames with residual > mean + 2 std as ineligible for MCC.

    Flagged frames remain in the training set; only the motion-consistency
    term skips them.  With fewer than 3 frames no filtering happens.  The
    flags depend only on the residual statistics, never on frame order.
    """
    res = solution.residuals
    eligible = np.ones(solution.frame_count, dtype=bool)
    if solution.frame_count >= 3:
        mean = float(res.mean())
        std = float(res.std())
        eligible = res <= mean + OUTLIER_SIGMA * std
    solution.mcc_eligible = eligible
    return solution
