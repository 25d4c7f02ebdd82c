"""Reconstruction losses, compositing rules and image-quality metrics.

Structural loss is mean L1 plus a weighted structural dissimilarity term
lambda * (1 - SSIM); SSIM uses the reference 11x11 Gaussian window (sigma
1.5, C1 = 0.01^2, C2 = 0.03^2) over valid window positions, averaged across
channels.  The perceptual slot is a Sobel edge-map proxy (full plus half
resolution), which keeps the term differentiable without a pretrained
network; it is invariant to constant intensity offsets.

All functions are pure and safe to call from any thread.  They dispatch on
Var vs ndarray like the rest of the engine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from . import autodiff as ad
from .autodiff import Var, value_of
from .render import RenderOutput

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossWeights:
    """lambda scales the DSSIM term, gamma the perceptual proxy."""

    lambda_dssim: float = 0.2
    gamma: float = 0.5

    def __post_init__(self):
        if self.lambda_dssim < 0 or self.gamma < 0:
            raise ValueError("loss weights must be non-negative")


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()

_SSIM_W = _gaussian_window()
_SOBEL_SMOOTH = np.array([1.0, 2.0, 1.0])
_SOBEL_DIFF = np.array([-1.0, 0.0, 1.0])


def _corr_valid_value(x: np.ndarray, w: np.ndarray, axis: int) -> np.ndarray:
    m = w.size
    full = correlate1d(x, w, axis=axis, mode="constant", origin=0)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(m // 2, x.shape[axis] - (m // 2))
    return full[tuple(sl)]


def _corr_valid_backward(g: np.ndarray, w: np.ndarray, axis: int, n: int) -> np.ndarray:
    m = w.size
    pad = [(0, 0)] * g.ndim
    pad[axis] = (m - 1, m - 1)
    gpad = np.pad(g, pad)
    full = correlate1d(gpad, w[::-1], axis=axis, mode="constant", origin=0)
    sl = [slice(None)] * g.ndim
    sl[axis] = slice(m // 2, m // 2 + n)
    return full[tuple(sl)]


def corr_valid(x, w: np.ndarray, axis: int):
    """Valid-region correlation along one axis with a constant 1D kernel."""
    if not isinstance(x, Var):
        return _corr_valid_value(np.asarray(x, dtype=np.float64), w, axis)
    n = x.value.shape[axis]
    val = _corr_valid_value(x.value, w, axis)

    def vjp(g):
        return [_corr_valid_backward(g, w, axis, n)]

    return ad.custom_op([x], val, vjp)


def _window_mean(img, w=_SSIM_W):
    return corr_valid(corr_valid(img, w, 0), w, 1)


def _check_image_pair(pred, target, min_hw=None):
    p, t = value_of(pred), value_of(target)
    if p.shape != t.shape:
        raise ValueError(f"image shapes differ: {p.shape} vs {t.shape}")
    if p.ndim not in (2, 3):
        raise ValueError("expected (H, W) or (H, W, C) images")
    if min_hw and (p.shape[0] < min_hw or p.shape[1] < min_hw):
        raise ValueError(f"images must be at least {min_hw}x{min_hw} for this loss")


def mask_apply(image, mask):
    """Elementwise product I * M; the mask must be binary {0, 1}."""
    iv, mv = value_of(image), value_of(mask)
    if mv.shape != iv.shape[:2]:
        raise ValueError(f"mask shape {mv.shape} does not match image {iv.shape}")
    if not np.all((mv == 0.0) | (mv == 1.0)):
        raise ValueError("mask must be binary")
    m = mask
    if iv.ndim == 3:
        m = ad.reshape(mask, mv.shape + (1,))
    return ad.mul(image, m)


def ssim(pred, target):
    """Mean SSIM over valid window positions and channels (differentiable)."""
    _check_image_pair(pred, target, min_hw=SSIM_WINDOW)
    mu_p = _window_mean(pred)
    mu_t = _window_mean(target)
    pp = _window_mean(ad.mul(pred, pred))
    tt = _window_mean(ad.mul(target, target))
    pt = _window_mean(ad.mul(pred, target))
    mu_pp = ad.mul(mu_p, mu_p)
    mu_tt = ad.mul(mu_t, mu_t)
    mu_pt = ad.mul(mu_p, mu_t)
    var_p = ad.sub(pp, mu_pp)
    var_t = ad.sub(tt, mu_tt)
    cov = ad.sub(pt, mu_pt)
    num = ad.mul(ad.add(ad.mul(mu_pt, 2.0), SSIM_C1), ad.add(ad.mul(cov, 2.0), SSIM_C2))
    den = ad.mul(ad.add(ad.add(mu_pp, mu_tt), SSIM_C1),
                 ad.add(ad.add(var_p, var_t), SSIM_C2))
    return ad.vmean(ad.div(num, den))


def structural_loss(pred, target, weights: LossWeights):
    """L_s = mean |pred - target| + lambda * (1 - SSIM)."""
    _check_image_pair(pred, target)
    l1 = ad.vmean(ad.absolute(ad.sub(pred, target)))
    if weights.lambda_dssim == 0.0:
        return l1
    return ad.add(l1, ad.mul(ad.sub(1.0, ssim(pred, target)), weights.lambda_dssim))


def _sobel_pair(img):
    """Sobel x/y responses per channel, valid region."""
    gx = corr_valid(corr_valid(img, _SOBEL_SMOOTH, 0), _SOBEL_DIFF, 1)
    gy = corr_valid(corr_valid(img, _SOBEL_DIFF, 0), _SOBEL_SMOOTH, 1)
    return gx, gy


def _half_res(img):
    v = value_of(img)
    h2, w2 = v.shape[0] // 2, v.shape[1] // 2
    crop = img[: 2 * h2, : 2 * w2]
    rest = v.shape[2:]
    r = ad.reshape(crop, (h2, 2, w2, 2) + rest)
    return ad.vmean(ad.vmean(r, axis=3), axis=1)


def _edge_distance(pred, target):
    gx_p, gy_p = _sobel_pair(pred)
    gx_t, gy_t = _sobel_pair(target)
    return ad.mul(ad.add(ad.vmean(ad.absolute(ad.sub(gx_p, gx_t))),
                         ad.vmean(ad.absolute(ad.sub(gy_p, gy_t)))), 0.5)


def perceptual_proxy(pred, target):
    """Mean L1 between Sobel edge maps at full and half resolution.

    Zero exactly when the edge maps agree, in particular for any constant
    intensity offset between the images.
    """
    _check_image_pair(pred, target, min_hw=6)
    full = _edge_distance(pred, target)
    half = _edge_distance(_half_res(pred), _half_res(target))
    return ad.mul(ad.add(full, half), 0.5)


def composite_over_background(face_render: RenderOutput, background):
    """I_hat_bg = C_f * A_f + I_bg * (1 - A_f), the full-portrait composite."""
    c = face_render.color
    a = face_render.opacity
    bgv, cv = value_of(background), value_of(c)
    if bgv.shape != cv.shape:
        raise ValueError(f"background shape {bgv.shape} does not match render {cv.shape}")
    av = value_of(a)
    if av.shape != cv.shape[:2]:
        raise ValueError("opacity map does not match color image")
    a3 = ad.reshape(a, av.shape + (1,))
    return ad.add(ad.mul(c, a3), ad.mul(background, ad.sub(1.0, a3)))


def mcc_loss(face_render: RenderOutput, background, image, weights: LossWeights):
    """Motion-consistency loss: structural + perceptual on the composite.

    Callers must skip frames whose pose residual flagged them ineligible;
    this function does not know about eligibility.
    """
    comp = composite_over_background(face_render, background)
    loss = structural_loss(comp, image, weights)
    if weights.gamma == 0.0:
        return loss
    return ad.add(loss, ad.mul(perceptual_proxy(comp, image), weights.gamma))


def compose_fused(face_render: RenderOutput, mouth_render: RenderOutput, background):
    """Layered composite: face over (mouth over background)."""
    cf, af = face_render.color, face_render.opacity
    cm, am = mouth_render.color, mouth_render.opacity
    bgv = value_of(background)
    if value_of(cf).shape != bgv.shape or value_of(cm).shape != bgv.shape:
        raise ValueError("render and background shapes differ")
    af3 = ad.reshape(af, value_of(af).shape + (1,))
    am3 = ad.reshape(am, value_of(am).shape + (1,))
    inner = ad.add(ad.mul(cm, am3), ad.mul(background, ad.sub(1.0, am3)))
    return ad.add(ad.mul(cf, af3), ad.mul(inner, ad.sub(1.0, af3)))


def fused_loss(fused, image, weights: LossWeights):
    """L_fuse = L_s(fused, I) + gamma * proxy(fused, I)."""
    loss = structural_loss(fused, image, weights)
    if weights.gamma == 0.0:
        return loss
    return ad.add(loss, ad.mul(perceptual_proxy(fused, image), weights.gamma))


# -- metrics (plain floats, evaluation side) ----------------------------------


def psnr(pred, target) -> float:
    """10 log10(1 / MSE) on [0, 1] images; +inf for identical inputs."""
    p, t = value_of(pred), value_of(target)
    if p.shape != t.shape:
        raise ValueError(f"image shapes differ: {p.shape} vs {t.shape}")
    mse = float(np.mean((p - t) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def ssim_metric(pred, target) -> float:
    """Mean SSIM as a plain float (same kernel as the loss)."""
    with ad.no_grad():
        return float(value_of(ssim(value_of(pred), value_of(target))))
