"""Forward and backward splatting of a Gaussian cloud under a pinhole camera.

The pipeline is: activate parameters, project each Gaussian to a 2D mean and
covariance, depth-sort, then alpha-blend front to back in 16x16 pixel tiles.
Projection and color evaluation run through the generic autodiff ops; the
per-pixel blending recursion is a fused custom op with a hand-derived
backward (suffix-sum form of the blending Jacobian), since taping it node by
node would dominate the runtime.

Conventions: pixel (row i, col j) has center (j + 0.5, i + 0.5); the
principal point is (width/2, height/2).  The camera stores a world-to-camera
rotation, a translation, and a shared focal length in pixels.

Determinism: per-tile accumulation runs in a fixed pixel order and tiles are
merged in fixed row-major order, so renders and gradients are bitwise
reproducible for any tile worker count.  The cloud must not be mutated while
a render is in flight.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .autodiff import Var, value_of

TILE = 16
COV2D_DILATION = 0.3      # anti-aliasing floor added to the projected covariance
FOOTPRINT_POWER = -4.5    # 3 sigma cutoff: exp(-0.5 * 9)
MIN_TRANSMITTANCE = 1e-4  # blending stops once transmittance drops below this
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)


class GaussianCloud:
    """Struct-of-arrays Gaussian primitives.

    Scale is stored as log (activated by exp) and opacity as a logit
    (activated by sigmoid) so optimizer steps cannot leave the valid domain.
    `sh` has shape (N, (K+1)^2, 3).
    """

    def __init__(self, mu, log_s, q, alpha_logit, sh):
        self.mu = mu
        self.log_s = log_s
        self.q = q
        self.alpha_logit = alpha_logit
        self.sh = sh
        n = value_of(mu).shape[0]
        for name, arr, shape in (("mu", mu, (n, 3)), ("log_s", log_s, (n, 3)),
                                 ("q", q, (n, 4)), ("alpha_logit", alpha_logit, (n,))):
            if value_of(arr).shape != shape:
                raise ValueError(f"{name} must have shape {shape}")
        shv = value_of(sh)
        if shv.ndim != 3 or shv.shape[0] != n or shv.shape[2] != 3:
            raise ValueError("sh must have shape (N, (K+1)^2, 3)")
        basis = shv.shape[1]
        if basis not in (1, 4, 9):
            raise ValueError("sh basis size must be 1, 4 or 9 (degree 0..2)")

    @property
    def count(self) -> int:
        return value_of(self.mu).shape[0]

    @property
    def sh_degree(self) -> int:
        return {1: 0, 4: 1, 9: 2}[value_of(self.sh).shape[1]]

    def params(self) -> dict:
        return {"mu": self.mu, "log_s": self.log_s, "q": self.q,
                "alpha_logit": self.alpha_logit, "sh": self.sh}

    def detached(self) -> "GaussianCloud":
        return GaussianCloud(*[np.array(value_of(p)) for p in
                               (self.mu, self.log_s, self.q, self.alpha_logit, self.sh)])

    @staticmethod
    def trainable(mu, log_s, q, alpha_logit, sh) -> "GaussianCloud":
        return GaussianCloud(*(Var(np.array(a, dtype=np.float64), requires_grad=True)
                               for a in (mu, log_s, q, alpha_logit, sh)))


@dataclass
class Camera:
    """Pinhole camera: world-to-camera rotation + translation, focal in px."""

    rot: object            # (3,3), may be a Var
    trans: object          # (3,)
    focal: object          # scalar
    width: int
    height: int
    znear: float = 0.01

    def __post_init__(self):
        if float(value_of(self.focal)) <= 0.0:
            raise ValueError("focal length must be positive")
        R = value_of(self.rot)
        if R.shape != (3, 3) or np.abs(R @ R.T - np.eye(3)).max() > 1e-6:
            raise ValueError("rot must be a 3x3 rotation matrix")

    @property
    def principal_point(self):
        return (self.width / 2.0, self.height / 2.0)

    def center_world(self):
        """Camera center in world coordinates, -R^T t."""
        Rt = ad.transpose(self.rot) if isinstance(self.rot, Var) else value_of(self.rot).T
        return ad.mul(ad.matmul(Rt, self.trans), -1.0)


@dataclass
class RenderOutput:
    """Blended color image C, opacity map A and backward bookkeeping."""

    color: object          # (H, W, 3)
    opacity: object        # (H, W)
    cloud: GaussianCloud | None = None
    camera: Camera | None = None
    aux: dict = field(default_factory=dict)


def project_cloud(cloud: GaussianCloud, cam: Camera):
    """Project all primitives.

    Returns (mean2d, conic, depth, valid) where `conic` packs the inverse 2D
    covariance as (a, b, c) for [[a, b], [b, c]], and `valid` is a plain bool
    mask: False for primitives behind znear or with a singular projected
    covariance (those are culled, not errors).
    """
    n = cloud.count
    # camera-space positions
    p_cam = ad.add(ad.matmul(cloud.mu, ad.transpose(cam.rot)), cam.trans)
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    zv = value_of(z)
    valid = zv > cam.znear

    cx, cy = cam.principal_point
    # guard culled entries so the graph stays finite; they are never consumed
    z_safe = ad.add(z, (~valid) * 1e6)
    mean2d = ad.stack([ad.add(ad.div(ad.mul(cam.focal, x), z_safe), cx),
                       ad.add(ad.div(ad.mul(cam.focal, y), z_safe), cy)], axis=-1)

    scale = ad.exp(cloud.log_s)
    cov3d = geo.build_covariance(scale, cloud.q)
    Rw = cam.rot
    cov_cam = ad.matmul(ad.matmul(Rw, cov3d), ad.transpose(Rw))

    # Jacobian of the pinhole map, rows [F/z, 0, -Fx/z^2], [0, F/z, -Fy/z^2]
    fz = ad.div(cam.focal, z_safe)
    zero = np.zeros(n)
    j02 = ad.mul(ad.div(ad.mul(cam.focal, x), ad.mul(z_safe, z_safe)), -1.0)
    j12 = ad.mul(ad.div(ad.mul(cam.focal, y), ad.mul(z_safe, z_safe)), -1.0)
    J = ad.reshape(ad.stack([fz, zero, j02, zero, fz, j12], axis=-1), (n, 2, 3))
    cov2d = ad.matmul(ad.matmul(J, cov_cam), ad.transpose(J, (0, 2, 1)))

    a = ad.add(cov2d[:, 0, 0], COV2D_DILATION)
    b = cov2d[:, 0, 1]
    c = ad.add(cov2d[:, 1, 1], COV2D_DILATION)
    det = ad.sub(ad.mul(a, c), ad.mul(b, b))
    detv = value_of(det)
    valid = valid & (detv > 1e-12)
    det_safe = ad.add(det, (~valid) * 1.0)
    conic = ad.stack([ad.div(c, det_safe),
                      ad.div(ad.mul(b, -1.0), det_safe),
                      ad.div(a, det_safe)], axis=-1)
    return mean2d, conic, z, valid


def sort_by_depth(depths) -> np.ndarray:
    """Ascending stable order (ties keep input order)."""
    return np.argsort(value_of(depths), kind="stable")


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values, (N, (degree+1)^2), for unit directions."""
    n = dirs.shape[0] if dirs.ndim == 2 else 1
    cols = [np.full(n, SH_C0)]
    if degree >= 1:
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        cols += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        cols += [SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * zz - xx - yy),
                 SH_C2[3] * x * z, SH_C2[4] * (xx - yy)]
    return np.stack(cols, axis=-1)


def sh_colors(cloud: GaussianCloud, cam: Camera, mode: str = "camera"):
    """Per-primitive RGB from SH.

    `mode="camera"` uses the direction from the camera center to each mu
    (one direction per primitive, a documented approximation); `"frontal"`
    uses the fixed +z direction.  Colors are 0.5 + SH dot basis, unclamped.
    """
    degree = cloud.sh_degree
    if mode == "frontal" or degree == 0:
        dirs = np.broadcast_to(np.array([0.0, 0.0, 1.0]), (cloud.count, 3))
        basis = sh_basis(np.asarray(dirs), degree)
        basis_var = basis
    elif mode == "camera":
        center = cam.center_world()
        rel = ad.sub(cloud.mu, center)
        norm = ad.safe_norm(rel, axis=-1, keepdims=True)
        dirs = ad.div(rel, ad.add(norm, 1e-12))
        if isinstance(dirs, Var):
            basis_var = _sh_basis_var(dirs, degree)
        else:
            basis_var = sh_basis(np.asarray(dirs), degree)
    else:
        raise ValueError(f"unknown sh view-dir mode: {mode}")
    prod = ad.mul(cloud.sh, ad.reshape(basis_var, value_of(basis_var).shape + (1,)))
    return ad.add(ad.vsum(prod, axis=1), 0.5)


def _sh_basis_var(dirs, degree: int):
    n = value_of(dirs).shape[0]
    cols = [np.full(n, SH_C0)]
    if degree >= 1:
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        cols += [ad.mul(y, -SH_C1), ad.mul(z, SH_C1), ad.mul(x, -SH_C1)]
    if degree >= 2:
        xx, yy, zz = ad.mul(x, x), ad.mul(y, y), ad.mul(z, z)
        cols += [ad.mul(ad.mul(x, y), SH_C2[0]),
                 ad.mul(ad.mul(y, z), SH_C2[1]),
                 ad.mul(ad.sub(ad.mul(zz, 2.0), ad.add(xx, yy)), SH_C2[2]),
                 ad.mul(ad.mul(x, z), SH_C2[3]),
                 ad.mul(ad.sub(xx, yy), SH_C2[4])]
    return ad.stack(cols, axis=-1)


# -- fused blending kernel ----------------------------------------------------


def _tile_lists(mean2d: np.ndarray, radii: np.ndarray, order: np.ndarray,
                width: int, height: int):
    """Per-tile index lists in blend (depth) order."""
    ntx = (width + TILE - 1) // TILE
    nty = (height + TILE - 1) // TILE
    tiles = [[] for _ in range(ntx * nty)]
    for idx in order:
        mx, my = mean2d[idx]
        r = radii[idx] + 1.0
        tx0 = max(0, int((mx - r) // TILE))
        tx1 = min(ntx - 1, int((mx + r) // TILE))
        ty0 = max(0, int((my - r) // TILE))
        ty1 = min(nty - 1, int((my + r) // TILE))
        if tx0 > tx1 or ty0 > ty1:
            continue
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                tiles[ty * ntx + tx].append(idx)
    return tiles, ntx, nty


def _blend_tile(mean2d, conic, alpha, colors, idxs, px, py):
    """Vectorized front-to-back blending for one tile.

    Returns (C, A, cache).  The cumulative product over 1 - alpha' realizes
    the blending recursion; terms whose incoming transmittance is below
    MIN_TRANSMITTANCE are masked out, which matches early termination of the
    sequential loop because transmittance is non-increasing.
    """
    g = len(idxs)
    p = px.size
    if g == 0:
        return np.zeros((p, colors.shape[1])), np.zeros(p), (None, np.full(p, -1))
    sub = np.asarray(idxs)
    mx = mean2d[sub, 0][:, None]
    my = mean2d[sub, 1][:, None]
    ca = conic[sub, 0][:, None]
    cb = conic[sub, 1][:, None]
    cc = conic[sub, 2][:, None]
    al = alpha[sub][:, None]
    col = colors[sub]

    dx = px[None, :] - mx
    dy = py[None, :] - my
    power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
    w = np.where(power > FOOTPRINT_POWER, np.exp(power), 0.0)
    aprime = al * w
    om = 1.0 - aprime
    cp = np.cumprod(om, axis=0)
    T = np.vstack([np.ones((1, p)), cp[:-1]])
    live = T >= MIN_TRANSMITTANCE
    wb = aprime * live * T
    C = wb.T @ col
    A = wb.sum(axis=0)
    dominant = np.where(A > 0.0, sub[np.argmax(wb, axis=0)], -1)
    cache = (sub, dx, dy, w, aprime, om, T, live, wb, col,
             ca.ravel(), cb.ravel(), cc.ravel(), al.ravel())
    return C, A, (cache, dominant)


def _blend_tile_backward(cache, gC, gA, grads):
    """Accumulate gradients for one tile into the global buffers."""
    (sub, dx, dy, w, aprime, om, T, live, wb, col, ca, cb, cc, al) = cache
    g_mean, g_conic, g_alpha, g_col = grads

    gwb = col @ gC.T + gA[None, :]                    # (G, P)
    np.add.at(g_col, sub, wb @ gC)

    contrib = gwb * wb
    incl = np.cumsum(contrib[::-1], axis=0)[::-1]      # suffix sums incl. self
    suffix = incl - contrib
    with np.errstate(divide="ignore", invalid="ignore"):
        tail = np.where(om > 1e-12, suffix / np.where(om > 1e-12, om, 1.0), 0.0)
    ga_prime = gwb * live * T - tail

    np.add.at(g_alpha, sub, (ga_prime * w).sum(axis=1))
    gp = ga_prime * aprime                            # d alpha' / d power = alpha'
    np.add.at(g_conic, (sub, 0), (gp * (-0.5 * dx * dx)).sum(axis=1))
    np.add.at(g_conic, (sub, 1), (gp * (-dx * dy)).sum(axis=1))
    np.add.at(g_conic, (sub, 2), (gp * (-0.5 * dy * dy)).sum(axis=1))
    gmx = (gp * (ca[:, None] * dx + cb[:, None] * dy)).sum(axis=1)
    gmy = (gp * (cb[:, None] * dx + cc[:, None] * dy)).sum(axis=1)
    np.add.at(g_mean, (sub, 0), gmx)
    np.add.at(g_mean, (sub, 1), gmy)


def rasterize(mean2d, conic, alpha, colors, order, width, height, workers: int = 1):
    """Blend ordered, projected Gaussians into an (H, W, F+1) buffer.

    `colors` may carry any per-primitive feature vector (F >= 1); channels
    0..F-1 hold the blended features and channel F the opacity map A.
    `order` must already be restricted to valid primitives and depth-sorted.
    Dispatches like the generic ops: plain-array inputs return a plain array.
    """
    m2 = value_of(mean2d)
    co = value_of(conic)
    alv = value_of(alpha)
    colv = value_of(colors)
    fdim = colv.shape[1]
    n = m2.shape[0]
    radii = np.zeros(n)
    if n and len(order):
        # 3 sigma of the largest eigenvalue of the 2D covariance
        a_c = co[order]
        det = np.maximum(a_c[:, 0] * a_c[:, 2] - a_c[:, 1] ** 2, 1e-300)
        cov_a = a_c[:, 2] / det
        cov_c = a_c[:, 0] / det
        cov_b = -a_c[:, 1] / det
        mid = 0.5 * (cov_a + cov_c)
        lam = mid + np.sqrt(np.maximum(mid * mid - (cov_a * cov_c - cov_b ** 2), 0.0))
        radii[order] = 3.0 * np.sqrt(np.maximum(lam, 0.0))

    tiles, ntx, nty = _tile_lists(m2, radii, order, width, height)
    out = np.zeros((height, width, fdim + 1))
    dominant = np.full((height, width), -1, dtype=np.int64)
    caches = [None] * len(tiles)
    spans = []
    for t in range(len(tiles)):
        ty, tx = divmod(t, ntx)
        x0, x1 = tx * TILE, min((tx + 1) * TILE, width)
        y0, y1 = ty * TILE, min((ty + 1) * TILE, height)
        spans.append((x0, x1, y0, y1))

    def run_tile(t):
        x0, x1, y0, y1 = spans[t]
        xs = np.arange(x0, x1) + 0.5
        ys = np.arange(y0, y1) + 0.5
        pxg, pyg = np.meshgrid(xs, ys)
        C, A, (cache, dom) = _blend_tile(m2, co, alv, colv, tiles[t],
                                         pxg.ravel(), pyg.ravel())
        return (t, C.reshape(y1 - y0, x1 - x0, fdim),
                A.reshape(y1 - y0, x1 - x0), cache,
                dom.reshape(y1 - y0, x1 - x0))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run_tile, range(len(tiles))))
    else:
        results = [run_tile(t) for t in range(len(tiles))]
    for t, C, A, cache, dom in results:
        x0, x1, y0, y1 = spans[t]
        out[y0:y1, x0:x1, :fdim] = C
        out[y0:y1, x0:x1, fdim] = A
        dominant[y0:y1, x0:x1] = dom
        caches[t] = cache

    if not ad.grad_enabled() or not any(isinstance(x, Var) and x.needs_grad()
                                        for x in (mean2d, conic, alpha, colors)):
        if not any(isinstance(x, Var) for x in (mean2d, conic, alpha, colors)):
            return out, dominant
        return Var(out), dominant

    def vjp(g):
        if g.shape != (height, width, fdim + 1):
            raise ValueError("mismatched image dimensions in rasterize backward")
        g_mean = np.zeros_like(m2)
        g_conic = np.zeros_like(co)
        g_alpha = np.zeros_like(alv)
        g_col = np.zeros_like(colv)
        grads = (g_mean, g_conic, g_alpha, g_col)
        # fixed tile order keeps gradient accumulation deterministic
        for t in range(len(tiles)):
            if caches[t] is None:
                continue
            x0, x1, y0, y1 = spans[t]
            gC = g[y0:y1, x0:x1, :fdim].reshape(-1, fdim)
            gA = g[y0:y1, x0:x1, fdim].reshape(-1)
            _blend_tile_backward(caches[t], gC, gA, grads)
        return [g_mean, g_conic, g_alpha, g_col]

    return ad.custom_op([mean2d, conic, alpha, colors], out, vjp), dominant


def render(cloud: GaussianCloud, cam: Camera, *, sh_view_dir_mode: str = "camera",
           workers: int = 1, with_depth_map: bool = False) -> RenderOutput:
    """Project, sort and rasterize a cloud; see module docstring for layout.

    With `with_depth_map` the expected camera-space depth per pixel (blend
    weights normalized by opacity) lands in aux["depth_map"], for data
    generation; it is not differentiated.
    """
    mean2d, conic, depth, valid = project_cloud(cloud, cam)
    depths = value_of(depth)
    order_all = sort_by_depth(np.where(valid, depths, np.inf))
    order = order_all[valid[order_all]].astype(np.int64)
    opacity = ad.sigmoid(cloud.alpha_logit)
    colors = sh_colors(cloud, cam, mode=sh_view_dir_mode)
    feats = colors
    if with_depth_map:
        feats = ad.concat([colors, ad.reshape(depth, (cloud.count, 1))], axis=1)
    buf, dominant = rasterize(mean2d, conic, opacity, feats, order,
                              cam.width, cam.height, workers=workers)
    fdim = value_of(feats).shape[1]
    color = buf[:, :, :3]
    alpha = buf[:, :, fdim]
    aux = {"depth": depths, "valid": valid, "order": order, "dominant": dominant}
    if with_depth_map:
        pre = value_of(buf)[:, :, 3]
        av = value_of(alpha)
        with np.errstate(invalid="ignore"):
            aux["depth_map"] = np.where(av > 1e-12, pre / np.where(av > 1e-12, av, 1.0), np.inf)
    return RenderOutput(color=color, opacity=alpha, cloud=cloud, camera=cam, aux=aux)


def rasterize_backward(out: RenderOutput, grad_color, grad_opacity) -> dict:
    """Gradients of sum(grad_color * C) + sum(grad_opacity * A) w.r.t. cloud params.

    The forward render must have been taped (Var cloud).  Returns a dict of
    parameter-name -> gradient array; raises on mismatched image dimensions.
    """
    gc = np.asarray(grad_color, dtype=np.float64)
    ga = np.asarray(grad_opacity, dtype=np.float64)
    if gc.shape != value_of(out.color).shape or ga.shape != value_of(out.opacity).shape:
        raise ValueError("gradient shapes do not match render dimensions")
    if not isinstance(out.color, Var):
        raise ValueError("render was not taped; build the cloud with Vars")
    params = out.cloud.params()
    for p in params.values():
        if isinstance(p, Var):
            p.zero_grad()
    ad.backward_multi([(out.color, gc), (out.opacity, ga)])
    return {k: (v.grad if isinstance(v, Var) and v.grad is not None
                else np.zeros_like(value_of(v)))
            for k, v in params.items()}
