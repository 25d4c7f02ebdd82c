"""Synthetic puppet scenes with exact ground truth.

A scene is a head-frame Gaussian "puppet": a face dome with a mouth opening
(plus optional semi-transparent lip cover), an inside-mouth blob behind it,
and a torso that lives in screen space (it does not follow head rotation).
The camera orbits the head center with a scripted yaw oscillation, mouth and
brow deform under scripted sinusoidal drives, the torso sways and breathes
on its own.  Every frame is rendered with the engine's own rasterizer and
composited exactly the way the training pipeline composites, so a model that
recovers the ground-truth parameters reproduces the frames bit for bit.

Emitted per frame: the composite image, the face and mouth opacity masks
(opacity thresholded at 0.5), the torso-over-backdrop background image, an
analytic flow field to the next frame (per-pixel backprojection of the
dominant layer's depth through that layer's motion model), and condition
vectors: the mouth drive embedded into a fixed random orthogonal direction
(standing in for an opaque audio embedding) and six slow action-unit
sinusoids, of which the first drives the brow.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import formats
from .errors import ValidationError
from .losses import compose_fused
from .render import SH_C0, Camera, GaussianCloud, render
from .autodiff import value_of

BACKDROP = np.array([0.05, 0.06, 0.08])
HEAD_DEPTH = 2.2
E_PERIODS = (41.0, 47.0, 53.0, 59.0, 61.0, 67.0)


@dataclass
class SyntheticSceneSpec:
    name: str = "default"
    face_count: int = 200
    mouth_count: int = 60
    torso_count: int = 120
    width: int = 64
    height: int = 64
    frame_count: int = 100
    focal: float = 77.0
    yaw_amplitude_deg: float = 8.0
    yaw_period: float = 50.0
    mouth_amplitude: float = 0.06
    mouth_period: float = 10.0
    brow_amplitude: float = 0.05
    torso_sway_amplitude: float = 0.06
    torso_sway_period: float = 37.0
    torso_breathe_amplitude: float = 0.03
    torso_breathe_period: float = 23.0
    lip_cover_opacity: float = 0.0
    lip_cover_count: int = 9
    noise_sigma: float = 0.0
    a_dim: int = 32
    sh_degree: int = 1

    def validate(self):
        if min(self.face_count, self.mouth_count, self.torso_count) <= 0:
            raise ValidationError("gaussian counts must be positive")
        for f in ("yaw_amplitude_deg", "mouth_amplitude", "brow_amplitude",
                  "torso_sway_amplitude", "noise_sigma"):
            if not np.isfinite(getattr(self, f)):
                raise ValidationError(f"{f} must be finite")


def scene_preset(name: str) -> SyntheticSceneSpec:
    """Named scene presets used by the CLI and the acceptance suite."""
    base = SyntheticSceneSpec()
    if name == "default":
        return base
    if name == "static":
        return replace(base, name=name, yaw_amplitude_deg=0.0, mouth_amplitude=0.0,
                       brow_amplitude=0.0, torso_sway_amplitude=0.0,
                       torso_breathe_amplitude=0.0)
    if name == "torso-motion":
        return replace(base, name=name, torso_sway_amplitude=0.14,
                       torso_breathe_amplitude=0.05, yaw_amplitude_deg=6.0)
    if name == "mouth-occlusion":
        return replace(base, name=name, lip_cover_opacity=0.36)
    raise ValidationError(f"unknown scene preset '{name}'")


def _logit(p):
    return np.log(p / (1.0 - p))


def _colors_to_sh(rgb: np.ndarray, rng, degree: int) -> np.ndarray:
    n = rgb.shape[0]
    basis = (degree + 1) ** 2
    sh = np.zeros((n, basis, 3))
    sh[:, 0, :] = (rgb - 0.5) / SH_C0
    if basis > 1:
        sh[:, 1:, :] = rng.uniform(-0.03, 0.03, (n, basis - 1, 3))
    return sh


@dataclass
class GroundTruthScene:
    spec: SyntheticSceneSpec
    seed: int
    face: GaussianCloud
    mouth: GaussianCloud
    torso: GaussianCloud
    brow_mask: np.ndarray      # (Nf,) bool, deforms with e1
    rigid_indices: np.ndarray  # indices into face of the rigid landmarks
    a_embed: np.ndarray        # (a_dim,) unit vector carrying the mouth drive
    canonical_bbox: tuple = None

    # -- scripts ---------------------------------------------------------------

    def yaw(self, t: float) -> float:
        s = self.spec
        if s.yaw_amplitude_deg == 0.0:
            return 0.0
        return np.radians(s.yaw_amplitude_deg) * np.sin(2 * np.pi * t / s.yaw_period)

    def camera(self, t: float) -> Camera:
        th = self.yaw(t)
        rot = np.array([[np.cos(th), 0.0, np.sin(th)],
                        [0.0, 1.0, 0.0],
                        [-np.sin(th), 0.0, np.cos(th)]])
        return Camera(rot=rot, trans=np.array([0.0, 0.0, HEAD_DEPTH]),
                      focal=self.spec.focal, width=self.spec.width,
                      height=self.spec.height)

    def base_camera(self) -> Camera:
        return Camera(rot=np.eye(3), trans=np.array([0.0, 0.0, HEAD_DEPTH]),
                      focal=self.spec.focal, width=self.spec.width,
                      height=self.spec.height)

    def mouth_drive(self, t: float) -> float:
        return float(np.sin(2 * np.pi * t / self.spec.mouth_period))

    def a_vector(self, t: float) -> np.ndarray:
        return self.a_embed * self.mouth_drive(t)

    def e_vector(self, t: float) -> np.ndarray:
        return np.array([0.5 + 0.4 * np.sin(2 * np.pi * t / p + 0.7 * i)
                         for i, p in enumerate(E_PERIODS)])

    def brow_drive(self, t: float) -> float:
        # centered version of e1 so the canonical cloud is the temporal mean
        return float((self.e_vector(t)[0] - 0.5) / 0.4)

    def face_delta(self, t: float) -> np.ndarray:
        d = np.zeros((self.face.count, 3))
        d[self.brow_mask, 1] = -self.spec.brow_amplitude * self.brow_drive(t)
        return d

    def mouth_delta(self, t: float) -> np.ndarray:
        d = np.zeros((self.mouth.count, 3))
        d[:, 1] = self.spec.mouth_amplitude * self.mouth_drive(t)
        return d

    def torso_sway(self, t: float) -> float:
        s = self.spec
        if s.torso_sway_amplitude == 0.0:
            return 0.0
        return s.torso_sway_amplitude * np.sin(2 * np.pi * t / s.torso_sway_period + 0.9)

    def torso_breathe(self, t: float) -> float:
        s = self.spec
        if s.torso_breathe_amplitude == 0.0:
            return 0.0
        return s.torso_breathe_amplitude * np.sin(
            2 * np.pi * t / s.torso_breathe_period + 0.4)

    # -- per-frame clouds --------------------------------------------------------

    def _shifted(self, cloud: GaussianCloud, delta_mu, delta_log_s=None):
        return GaussianCloud(value_of(cloud.mu) + delta_mu,
                             value_of(cloud.log_s) + (delta_log_s if delta_log_s
                                                      is not None else 0.0),
                             value_of(cloud.q), value_of(cloud.alpha_logit),
                             value_of(cloud.sh))

    def face_at(self, t: float) -> GaussianCloud:
        return self._shifted(self.face, self.face_delta(t))

    def mouth_at(self, t: float) -> GaussianCloud:
        return self._shifted(self.mouth, self.mouth_delta(t))

    def torso_delta(self, t: float) -> np.ndarray:
        # sway plus breathing expansion about the chest line: spatially
        # varying motion keeps torso pixels unattractive to the keypoint
        # selector without any semantic prior
        d = np.zeros((self.torso.count, 3))
        d[:, 0] = self.torso_sway(t)
        d[:, 1] = self.torso_breathe(t) * (value_of(self.torso.mu)[:, 1] - 1.0) * 0.6
        return d

    def torso_at(self, t: float) -> GaussianCloud:
        dls = np.zeros((self.torso.count, 3))
        dls[:, 1] = self.torso_breathe(t)
        return self._shifted(self.torso, self.torso_delta(t), dls)

    def background(self, t: float):
        out = render(self.torso_at(t), self.base_camera())
        a = value_of(out.opacity)[:, :, None]
        img = value_of(out.color) + (1.0 - a) * BACKDROP
        return img, value_of(out.opacity), out.aux["dominant"]

    def render_frame(self, t: float) -> dict:
        cam = self.camera(t)
        f = render(self.face_at(t), cam)
        m = render(self.mouth_at(t), cam)
        bg, torso_alpha, torso_dom = self.background(t)
        image = value_of(compose_fused(f, m, bg))
        return {"camera": cam, "face": f, "mouth": m, "background": bg,
                "torso_alpha": torso_alpha, "torso_dominant": torso_dom,
                "image": image,
                "mask_face": (value_of(f.opacity) > 0.5).astype(np.float64),
                "mask_mouth": (value_of(m.opacity) > 0.5).astype(np.float64)}


def build_ground_truth(spec: SyntheticSceneSpec, seed: int) -> GroundTruthScene:
    """Deterministic puppet construction for a spec + seed."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9A9A17]))

    # face dome with a mouth opening
    n_cover = spec.lip_cover_count if spec.lip_cover_opacity > 0.0 else 0
    n_disc = spec.face_count - n_cover
    mouth_xy = np.array([0.0, 0.18])
    pts = []
    while len(pts) < n_disc:
        u, v = rng.random(2)
        r = 0.55 * np.sqrt(u)
        ang = 2 * np.pi * v
        x, y = r * np.cos(ang), r * np.sin(ang)
        if np.hypot(x - mouth_xy[0], y - mouth_xy[1]) < 0.20:
            continue
        pts.append((x, y))
    face_xy = np.array(pts)
    r_xy = np.linalg.norm(face_xy, axis=1)
    face_z = -0.25 * (1.0 - (r_xy / 0.55) ** 2) + rng.uniform(-0.01, 0.01, n_disc)
    face_mu = np.column_stack([face_xy, face_z])
    if n_cover:
        # lip covers on a sparse jittered pattern so their combined opacity
        # stays below the mask threshold over the mouth
        ring = min(n_cover - 1, 8)
        ang = 2 * np.pi * np.arange(ring) / ring
        pat = [(0.0, 0.0)] + [(0.085 * np.cos(a), 0.085 * np.sin(a)) for a in ang]
        while len(pat) < n_cover:
            u, v = rng.random(2)
            pat.append((0.13 * np.sqrt(u) * np.cos(2 * np.pi * v),
                        0.13 * np.sqrt(u) * np.sin(2 * np.pi * v)))
        offs = np.array(pat[:n_cover]) + rng.uniform(-0.008, 0.008, (n_cover, 2))
        cover_xy = mouth_xy + offs
        rc = np.linalg.norm(cover_xy, axis=1)
        cover_z = -0.25 * (1.0 - (rc / 0.55) ** 2) - 0.02
        face_mu = np.vstack([face_mu, np.column_stack([cover_xy, cover_z])])

    nf = face_mu.shape[0]
    sigma_f = 0.55 / np.sqrt(n_disc) * 1.7
    face_log_s = np.log(rng.uniform(0.8, 1.3, (nf, 3)) * sigma_f)
    face_log_s[:, 2] -= 0.7  # flatter along the viewing axis
    near_mouth = np.linalg.norm(face_mu[:, :2] - mouth_xy, axis=1)
    shrink = np.clip((near_mouth - 0.20) / 0.12, 0.45, 1.0)
    face_log_s[:, :2] += np.log(shrink)[:, None]
    if n_cover:
        face_log_s[n_disc:] = np.log(0.03)
    face_q = rng.standard_normal((nf, 4))
    face_q /= np.linalg.norm(face_q, axis=1, keepdims=True)
    edge = np.clip((np.linalg.norm(face_mu[:, :2], axis=1) - 0.42) / 0.13, 0, 1)
    face_alpha = 0.93 * (1.0 - 0.5 * edge * edge * (3 - 2 * edge))
    if n_cover:
        face_alpha[n_disc:] = spec.lip_cover_opacity
    base = np.array([0.78, 0.62, 0.54])
    tex = 0.10 * np.column_stack([np.sin(7 * face_mu[:, 0] + 1.0),
                                  np.sin(6 * face_mu[:, 1]),
                                  np.sin(5 * (face_mu[:, 0] + face_mu[:, 1]))])
    face_rgb = np.clip(base + tex, 0.05, 0.95)
    face = GaussianCloud(face_mu, face_log_s, face_q, _logit(face_alpha),
                         _colors_to_sh(face_rgb, rng, spec.sh_degree))
    brow_mask = (face_mu[:, 1] > -0.38) & (face_mu[:, 1] < -0.22) & \
        (np.abs(face_mu[:, 0]) < 0.35)

    # rigid landmark band: solid-alpha interior, clear of brow and mouth
    r_all = np.linalg.norm(face_mu[:, :2], axis=1)
    mouth_dist = np.linalg.norm(face_mu[:, :2] - mouth_xy, axis=1)
    band = ((r_all > 0.28) & (r_all < 0.42) & (mouth_dist > 0.26)
            & ((face_mu[:, 1] < -0.46) | (face_mu[:, 1] > -0.14)))
    rigid_candidates = np.nonzero(band)[0]

    # inside-mouth blob, behind the face opening
    u, v = rng.random(spec.mouth_count), rng.random(spec.mouth_count)
    r = 0.07 * np.sqrt(u)
    ang = 2 * np.pi * v
    mouth_mu = np.column_stack([mouth_xy[0] + r * np.cos(ang),
                                mouth_xy[1] + r * np.sin(ang),
                                0.03 + rng.uniform(-0.02, 0.02, spec.mouth_count)])
    sigma_m = 0.07 / np.sqrt(spec.mouth_count) * 1.9
    mouth_log_s = np.log(rng.uniform(0.8, 1.3, (spec.mouth_count, 3)) * sigma_m)
    mouth_q = rng.standard_normal((spec.mouth_count, 4))
    mouth_q /= np.linalg.norm(mouth_q, axis=1, keepdims=True)
    mouth_alpha = np.full(spec.mouth_count, 0.9)
    mouth_rgb = np.clip(np.array([0.45, 0.16, 0.16])
                        + 0.08 * np.column_stack([np.sin(20 * mouth_mu[:, 0]),
                                                  np.sin(18 * mouth_mu[:, 1]),
                                                  np.sin(16 * mouth_mu[:, 2])]),
                        0.03, 0.9)
    mouth = GaussianCloud(mouth_mu, mouth_log_s, mouth_q, _logit(mouth_alpha),
                          _colors_to_sh(mouth_rgb, rng, spec.sh_degree))

    # torso in screen space
    tx = rng.uniform(-0.9, 0.9, spec.torso_count)
    ty = rng.uniform(0.55, 1.45, spec.torso_count)
    tz = rng.uniform(0.25, 0.55, spec.torso_count)
    torso_mu = np.column_stack([tx, ty, tz])
    sigma_t = 1.6 / np.sqrt(spec.torso_count) * 1.8
    torso_log_s = np.log(rng.uniform(0.8, 1.3, (spec.torso_count, 3)) * sigma_t)
    torso_q = rng.standard_normal((spec.torso_count, 4))
    torso_q /= np.linalg.norm(torso_q, axis=1, keepdims=True)
    torso_alpha = np.full(spec.torso_count, 0.92)
    torso_rgb = np.clip(np.array([0.25, 0.30, 0.45])
                        + 0.12 * np.column_stack([np.sin(8 * tx), np.sin(6 * ty),
                                                  np.sin(7 * (tx + ty))]),
                        0.05, 0.95)
    torso = GaussianCloud(torso_mu, torso_log_s, torso_q, _logit(torso_alpha),
                          _colors_to_sh(torso_rgb, rng, spec.sh_degree))

    q = np.linalg.qr(rng.standard_normal((spec.a_dim, spec.a_dim)))[0]
    a_embed = q[:, 0]

    lo = np.minimum(face_mu.min(axis=0), mouth_mu.min(axis=0))
    hi = np.maximum(face_mu.max(axis=0), mouth_mu.max(axis=0))
    margin = 0.15 * (hi - lo) + 0.05
    bbox = (lo - margin, hi + margin)
    scene = GroundTruthScene(spec=spec, seed=seed, face=face, mouth=mouth,
                             torso=torso, brow_mask=brow_mask,
                             rigid_indices=np.zeros(0, dtype=int),
                             a_embed=a_embed, canonical_bbox=bbox)
    scene.rigid_indices = _select_landmarks(scene, rigid_candidates)
    return scene


def _select_landmarks(scene: GroundTruthScene, candidates: np.ndarray,
                      count: int = 16) -> np.ndarray:
    """Promote well-spread rigid candidates to locally dominant landmarks.

    Chosen Gaussians get a slightly larger footprint and near-full opacity
    (prominent rigid features, the ear/hairline analog), then only those that
    actually dominate their own pixel neighborhood at frame 0 are kept, so
    advecting them through the emitted flows reproduces their projected
    trajectories exactly.
    """
    if len(candidates) == 0:
        return np.zeros(0, dtype=int)
    mu = value_of(scene.face.mu)
    chosen = [int(candidates[0])]
    while len(chosen) < min(2 * count, len(candidates)):
        d = np.min(np.linalg.norm(mu[candidates, None, :2]
                                  - mu[None, chosen, :2], axis=2), axis=1)
        best = int(candidates[int(np.argmax(d))])
        if best in chosen:
            break
        chosen.append(best)
    chosen = np.array(sorted(set(chosen)), dtype=int)

    log_s = value_of(scene.face.log_s)
    log_s[chosen, 0:2] += np.log(1.45)
    al = value_of(scene.face.alpha_logit)
    al[chosen] = _logit(0.985)
    mu[chosen, 2] -= 0.05  # protrude toward the camera so they blend first

    cam = scene.camera(0)
    out = render(scene.face_at(0), cam)
    dom = out.aux["dominant"]
    alpha = value_of(out.opacity)
    R, T = value_of(cam.rot), value_of(cam.trans)
    proj = _project_px(mu[chosen] @ R.T + T, cam)
    keep = []
    h, w = alpha.shape
    for c, (x, y) in zip(chosen, proj):
        x0, y0 = int(np.floor(x - 0.5)), int(np.floor(y - 0.5))
        corners = [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)]
        if not all(1 <= yy < h - 1 and 1 <= xx < w - 1 for yy, xx in corners):
            continue
        if all(dom[yy, xx] == c and alpha[yy, xx] >= 0.8 for yy, xx in corners):
            keep.append(int(c))
    return np.array(sorted(keep[:count]), dtype=int)


# -- flow synthesis ---------------------------------------------------------------


def _project_px(p: np.ndarray, cam: Camera):
    cx, cy = cam.principal_point
    return np.stack([cam.focal * p[:, 0] / p[:, 2] + cx,
                     cam.focal * p[:, 1] / p[:, 2] + cy], axis=1)


def _backproject(px: np.ndarray, z: np.ndarray, cam: Camera) -> np.ndarray:
    cx, cy = cam.principal_point
    x = (px[:, 0] - cx) / cam.focal * z
    y = (px[:, 1] - cy) / cam.focal * z
    return np.column_stack([x, y, z])


def _dominant_flow(sel: np.ndarray, dominant: np.ndarray, mu_t: np.ndarray,
                   mu_t1: np.ndarray, cam_t: Camera, cam_t1: Camera,
                   flow: np.ndarray):
    """Flow for pixels `sel`: projected displacement of the dominant Gaussian.

    A pixel moves with the center of the Gaussian that dominates its blend,
    which is exact at that Gaussian's own projection and makes advecting a
    point through the emitted flows reproduce the point's true trajectory.
    """
    ys, xs = np.nonzero(sel)
    if ys.size == 0:
        return
    g = dominant[ys, xs]
    R0, T0 = value_of(cam_t.rot), value_of(cam_t.trans)
    R1, T1 = value_of(cam_t1.rot), value_of(cam_t1.trans)
    p0 = _project_px(mu_t[g] @ R0.T + T0, cam_t)
    p1 = _project_px(mu_t1[g] @ R1.T + T1, cam_t1)
    flow[ys, xs] = p1 - p0


def synth_flow(scene: GroundTruthScene, t: int, frame: dict) -> np.ndarray:
    """Analytic flow field from frame t to t+1.

    Pixels are claimed by the front-most layer whose opacity exceeds 0.5
    (face, then mouth, then torso); each claimed pixel takes the projected
    center displacement of its layer's dominant Gaussian, so rigid, brow,
    mouth and torso motion all appear with their own statistics.  Unclaimed
    pixels get zero flow.
    """
    s = scene.spec
    h, w = s.height, s.width
    flow = np.zeros((h, w, 2))
    cam_t, cam_t1 = frame["camera"], scene.camera(t + 1)

    a_face = value_of(frame["face"].opacity)
    a_mouth = value_of(frame["mouth"].opacity)
    face_sel = a_face >= 0.5
    mouth_sel = ~face_sel & (a_mouth >= 0.5)
    torso_sel = ~face_sel & ~mouth_sel & (frame["torso_alpha"] >= 0.5)

    face_mu = value_of(scene.face.mu)
    mouth_mu = value_of(scene.mouth.mu)
    torso_mu = value_of(scene.torso.mu)
    _dominant_flow(face_sel, frame["face"].aux["dominant"],
                   face_mu + scene.face_delta(t), face_mu + scene.face_delta(t + 1),
                   cam_t, cam_t1, flow)
    _dominant_flow(mouth_sel, frame["mouth"].aux["dominant"],
                   mouth_mu + scene.mouth_delta(t),
                   mouth_mu + scene.mouth_delta(t + 1), cam_t, cam_t1, flow)
    base = scene.base_camera()
    _dominant_flow(torso_sel, frame["torso_dominant"],
                   torso_mu + scene.torso_delta(t),
                   torso_mu + scene.torso_delta(t + 1), base, base, flow)
    return flow


# -- dataset writing / loading ------------------------------------------------------


def quantize_unit(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and quantize to float32, the on-disk image precision."""
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_puppet_dataset(spec: SyntheticSceneSpec, seed: int, out_dir) -> dict:
    """Render and write a full dataset; returns the manifest dict."""
    scene = build_ground_truth(spec, seed)
    out_dir = str(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    noise_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4015E]))

    frames_meta = []
    frames = [scene.render_frame(t) for t in range(spec.frame_count)]
    for t, fr in enumerate(frames):
        img = fr["image"]
        if spec.noise_sigma > 0:
            img = img + noise_rng.normal(0.0, spec.noise_sigma, img.shape)
        names = {"image": f"img_{t:04d}.pfm", "background": f"bg_{t:04d}.pfm",
                 "mask_face": f"mask_face_{t:04d}.pgm",
                 "mask_mouth": f"mask_mouth_{t:04d}.pgm"}
        formats.pfm_write(os.path.join(out_dir, names["image"]), quantize_unit(img))
        formats.pfm_write(os.path.join(out_dir, names["background"]),
                          quantize_unit(fr["background"]))
        formats.pgm_write(os.path.join(out_dir, names["mask_face"]), fr["mask_face"])
        formats.pgm_write(os.path.join(out_dir, names["mask_mouth"]), fr["mask_mouth"])
        flow_name = None
        if t < spec.frame_count - 1:
            flow_name = f"flow_{t:04d}.pfm"
            formats.pfm_write(os.path.join(out_dir, flow_name),
                              synth_flow(scene, t, fr).astype(np.float32))
        cam = fr["camera"]
        frames_meta.append({
            "index": t, "flow": flow_name,
            **names,
            "camera": {"rot": value_of(cam.rot).tolist(),
                       "trans": value_of(cam.trans).tolist()},
        })

    cond_path = os.path.join(out_dir, "conditions.csv")
    with open(cond_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["frame"] + [f"a_{i}" for i in range(spec.a_dim)]
                    + [f"e_{i}" for i in range(6)])
        for t in range(spec.frame_count):
            row = [t] + [repr(float(v)) for v in scene.a_vector(t)] \
                + [repr(float(v)) for v in scene.e_vector(t)]
            wr.writerow(row)

    def region_init(cloud: GaussianCloud, count: int):
        mu = value_of(cloud.mu)
        rgb = 0.5 + value_of(cloud.sh)[:, 0, :] * SH_C0
        lo, hi = mu.min(axis=0), mu.max(axis=0)
        pad = 0.1 * (hi - lo) + 0.02
        return {"count": count, "bbox_min": (lo - pad).tolist(),
                "bbox_max": (hi + pad).tolist(),
                "mean_color": rgb.mean(axis=0).tolist()}

    manifest = {
        "version": 1,
        "width": spec.width, "height": spec.height,
        "frame_count": spec.frame_count,
        "focal": spec.focal,
        "a_dim": spec.a_dim,
        "backdrop": BACKDROP.tolist(),
        "frames": frames_meta,
        "conditions": "conditions.csv",
        "rigid_points": value_of(scene.face.mu)[scene.rigid_indices].tolist(),
        "canonical_bbox": {"min": scene.canonical_bbox[0].tolist(),
                           "max": scene.canonical_bbox[1].tolist()},
        "init": {"face": region_init(scene.face, spec.face_count),
                 "mouth": region_init(scene.mouth, spec.mouth_count)},
        "scene": {"seed": seed, "spec": asdict(spec)},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


@dataclass
class FrameRecord:
    index: int
    image: np.ndarray        # (H, W, 3) float64 in [0, 1]
    mask_face: np.ndarray    # (H, W) {0, 1}
    mask_mouth: np.ndarray
    background: np.ndarray   # (H, W, 3)
    flow: np.ndarray | None  # (H, W, 2) motion to the next frame
    a: np.ndarray            # (a_dim,)
    e: np.ndarray            # (6,)
    camera: Camera


class PuppetDataset:
    """In-memory dataset with validation; see generate_puppet_dataset."""

    def __init__(self, manifest: dict, root: str, frames: list[FrameRecord]):
        self.manifest = manifest
        self.root = root
        self.frames = frames
        self.width = manifest["width"]
        self.height = manifest["height"]
        self.focal = manifest["focal"]
        self.a_dim = manifest["a_dim"]
        self.rigid_points = np.array(manifest["rigid_points"], dtype=np.float64)
        bbox = manifest["canonical_bbox"]
        self.canonical_bbox = (np.array(bbox["min"]), np.array(bbox["max"]))

    def __len__(self):
        return len(self.frames)

    def flows(self) -> np.ndarray:
        return np.stack([f.flow for f in self.frames[:-1]])


def load_dataset(manifest_path) -> PuppetDataset:
    """Load and validate a dataset; errors name the offending frame/file."""
    manifest_path = str(manifest_path)
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    root = os.path.dirname(manifest_path)
    h, w = manifest["height"], manifest["width"]
    a_dim = manifest["a_dim"]

    cond = {}
    cond_file = os.path.join(root, manifest["conditions"])
    if not os.path.exists(cond_file):
        raise FileNotFoundError(f"conditions table missing: {cond_file}")
    with open(cond_file, newline="") as fh:
        reader = csv.DictReader(fh)
        e_cols = [c for c in reader.fieldnames if c.startswith("e_")]
        if len(e_cols) != 6:
            raise ValidationError(
                f"expression feature must have width 6, found {len(e_cols)}")
        a_cols = [f"a_{i}" for i in range(a_dim)]
        for row in reader:
            t = int(row["frame"])
            cond[t] = (np.array([float(row[c]) for c in a_cols]),
                       np.array([float(row[f"e_{i}"]) for i in range(6)]))

    frames = []
    for meta in manifest["frames"]:
        t = meta["index"]

        def _load(kind, reader_fn):
            path = os.path.join(root, meta[kind])
            if not os.path.exists(path):
                raise FileNotFoundError(f"frame {t}: missing {kind} file {path}")
            return reader_fn(path)

        image = _load("image", formats.pfm_read).astype(np.float64)
        bgimg = _load("background", formats.pfm_read).astype(np.float64)
        mf = _load("mask_face", formats.pgm_read)
        mm = _load("mask_mouth", formats.pgm_read)
        flow = None
        if meta.get("flow"):
            flow = _load("flow", formats.pfm_read).astype(np.float64)
        for name, arr, shape in (("image", image, (h, w, 3)),
                                 ("background", bgimg, (h, w, 3)),
                                 ("mask_face", mf, (h, w)),
                                 ("mask_mouth", mm, (h, w))):
            if arr.shape != shape:
                raise ValidationError(
                    f"frame {t}: {name} has shape {arr.shape}, expected {shape}")
        if flow is not None and flow.shape != (h, w, 2):
            raise ValidationError(f"frame {t}: flow has shape {flow.shape}")
        for name, m in (("mask_face", mf), ("mask_mouth", mm)):
            if not np.all((m == 0.0) | (m == 1.0)):
                raise ValidationError(f"frame {t}: {name} is not binary")
        if t not in cond:
            raise ValidationError(f"frame {t}: missing condition row")
        cam = Camera(rot=np.array(meta["camera"]["rot"], dtype=np.float64),
                     trans=np.array(meta["camera"]["trans"], dtype=np.float64),
                     focal=manifest["focal"], width=w, height=h)
        frames.append(FrameRecord(index=t, image=image, mask_face=mf,
                                  mask_mouth=mm, background=bgimg, flow=flow,
                                  a=cond[t][0], e=cond[t][1], camera=cam))
    frames.sort(key=lambda f: f.index)
    return PuppetDataset(manifest, root, frames)


def build_initial_cloud(manifest: dict, region: str, seed: int,
                        sh_degree: int = 1) -> GaussianCloud:
    """Seeded random initialization inside the region's bounding box."""
    info = manifest["init"][region]
    rng = np.random.default_rng(np.random.SeedSequence(
        [seed, 0x1217 if region == "face" else 0x1218]))
    n = info["count"]
    lo = np.array(info["bbox_min"])
    hi = np.array(info["bbox_max"])
    mu = rng.uniform(lo, hi, (n, 3))
    diag = float(np.linalg.norm((hi - lo)[:2]))
    log_s = np.full((n, 3), np.log(max(diag / np.sqrt(n) * 0.9, 1e-3)))
    q = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    alpha_logit = np.full(n, _logit(0.15))
    rgb = np.clip(np.array(info["mean_color"]) + rng.uniform(-0.05, 0.05, (n, 3)),
                  0.02, 0.98)
    sh = _colors_to_sh(rgb, rng, sh_degree)
    return GaussianCloud.trainable(mu, log_s, q, alpha_logit, sh)
