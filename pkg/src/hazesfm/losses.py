"""Image losses with hand-written gradients.

Every loss that the optimizer consumes comes in two flavours: ``name(...)``
returning the value and ``name_and_grad(...)`` (or a ``*_vjp`` helper)
returning the value plus gradients with respect to its array arguments.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Protocol

import numpy as np

from .imagecore import (as_image, box3, box3_adjoint, downsample2, downsample2_adjoint,
                        sobel_adjoint, sobel_gradients)

log = logging.getLogger(__name__)

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class LossWeights:
    eta: float = 1e-1      # reconstruction
    gamma: float = 2e-1    # misaligned reference
    xi: float = 1e-3       # edge-aware smoothness
    omega1: float = 4e-3   # frequency/image adversarial
    omega2: float = 1e-3   # depth adversarial
    alpha: float = 0.85    # SSIM/L1 mix of the photometric error

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0")
        if self.alpha > 1:
            raise ValueError("alpha must lie in [0, 1]")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: float(v) for k, v in d.items()})

    @classmethod
    def zeros(cls):
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.85)


# ---------------------------------------------------------------------------
# SSIM and photometric error

def _ssim_stats(a, b):
    mx, my = box3(a), box3(b)
    ex, ey, exy = box3(a * a), box3(b * b), box3(a * b)
    n1 = 2 * mx * my + SSIM_C1
    n2 = 2 * (exy - mx * my) + SSIM_C2
    d1 = mx * mx + my * my + SSIM_C1
    d2 = (ex - mx * mx) + (ey - my * my) + SSIM_C2
    return mx, my, n1, n2, d1, d2


def _check_pair(a, b):
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def ssim(a, b):
    """Per-pixel SSIM map ``(1, H, W)``: 3x3 mean windows, channel-averaged."""
    a, b = _check_pair(a, b)
    _, _, n1, n2, d1, d2 = _ssim_stats(a, b)
    return (n1 * n2 / (d1 * d2)).mean(axis=0, keepdims=True)


def ssim_vjp(a, b, grad):
    """Gradients of ``sum(grad * ssim(a, b))`` w.r.t. ``a`` and ``b``."""
    a, b = _check_pair(a, b)
    mx, my, n1, n2, d1, d2 = _ssim_stats(a, b)
    g = np.broadcast_to(np.asarray(grad).reshape((1,) + a.shape[1:]), a.shape) / a.shape[0]
    den = d1 * d2
    s = n1 * n2 / den
    # partials of s w.r.t. (mx, my, E[a^2], E[b^2], E[ab])
    g_mx = g * (2 * my * (n2 - n1) / den - s * 2 * mx * (1 / d1 - 1 / d2))
    g_my = g * (2 * mx * (n2 - n1) / den - s * 2 * my * (1 / d1 - 1 / d2))
    g_ex = g * (-s / d2)
    g_exy = g * (2 * n1 / den)
    bx, by = box3_adjoint(g_mx), box3_adjoint(g_my)
    bex, bey, bexy = box3_adjoint(g_ex), box3_adjoint(g_ex), box3_adjoint(g_exy)
    return bx + 2 * a * bex + b * bexy, by + 2 * b * bey + a * bexy


def photometric_error(pred, target, alpha=0.85):
    """``alpha/2 * (1 - SSIM) + (1 - alpha) * mean_c |pred - target|`` per pixel."""
    pred, target = _check_pair(pred, target)
    l1 = np.abs(pred - target).mean(axis=0, keepdims=True)
    return 0.5 * alpha * (1.0 - ssim(pred, target)) + (1.0 - alpha) * l1


def photometric_vjp(pred, target, alpha, grad):
    pred, target = _check_pair(pred, target)
    g = np.asarray(grad).reshape((1,) + pred.shape[1:])
    gp, gt = ssim_vjp(pred, target, -0.5 * alpha * g)
    l1 = (1.0 - alpha) / pred.shape[0] * g * np.sign(pred - target)
    return gp + l1, gt - l1


def auto_mask(target, warped, sources, alpha=0.85, valid=None):
    """Binary mask of pixels where some warped source beats every unwarped one.

    ``valid`` optionally lists the per-source warp validity masks; invalid
    warped pixels score ``+inf`` and can never win.
    """
    if not sources:
        raise ValueError("auto_mask needs at least one source")
    if len(warped) != len(sources):
        raise ValueError("one warped frame per source is required")
    pe_warp = []
    for i, w in enumerate(warped):
        pe = photometric_error(w, target, alpha)
        if valid is not None:
            pe = np.where(as_image(valid[i]) > 0, pe, np.inf)
        pe_warp.append(pe)
    pe_id = [photometric_error(s, target, alpha) for s in sources]
    return (np.min(pe_warp, axis=0) < np.min(pe_id, axis=0)).astype(np.float64)


# ---------------------------------------------------------------------------
# Edge-aware smoothness

def smoothness_loss_and_grad(depth, reference):
    """Edge-aware smoothness of mean-normalised inverse depth.

    Returns ``(loss, g_log_depth (H, W), g_reference (C, H, W))``.
    """
    depth = as_image(depth, 1)[0]
    if np.any(depth <= 0):
        raise ValueError("depth must be strictly positive")
    ref = as_image(reference)
    q = 1.0 / depth
    m = q.mean()
    ds = q / m
    dx = ds[:, 1:] - ds[:, :-1]
    dy = ds[1:, :] - ds[:-1, :]
    jx = ref[:, :, 1:] - ref[:, :, :-1]
    jy = ref[:, 1:, :] - ref[:, :-1, :]
    wx = np.exp(-np.abs(jx).mean(axis=0))
    wy = np.exp(-np.abs(jy).mean(axis=0))
    nx, ny = max(dx.size, 1), max(dy.size, 1)
    loss = (np.abs(dx) * wx).sum() / nx + (np.abs(dy) * wy).sum() / ny

    sx = np.sign(dx) * wx / nx
    sy = np.sign(dy) * wy / ny
    g_ds = np.zeros_like(ds)
    g_ds[:, 1:] += sx
    g_ds[:, :-1] -= sx
    g_ds[1:, :] += sy
    g_ds[:-1, :] -= sy
    g_q = g_ds / m - (g_ds * q).sum() / (m * m * q.size)
    g_logd = -q * g_q

    c = ref.shape[0]
    gjx = -(np.abs(dx) / nx * wx / c) * np.sign(jx)
    gjy = -(np.abs(dy) / ny * wy / c) * np.sign(jy)
    g_ref = np.zeros_like(ref)
    g_ref[:, :, 1:] += gjx
    g_ref[:, :, :-1] -= gjx
    g_ref[:, 1:, :] += gjy
    g_ref[:, :-1, :] -= gjy
    return loss, g_logd, g_ref


def smoothness_loss(depth, reference):
    return smoothness_loss_and_grad(depth, reference)[0]


# ---------------------------------------------------------------------------
# Feature extractors and cosine distances

class FeatureExtractor(Protocol):
    levels: int

    def features(self, image) -> list: ...

    def vjp(self, image_shape, grads) -> np.ndarray: ...


class PyramidFeatures:
    """Linear multi-scale features: luminance plus its Sobel gradients.

    Level ``l`` (1-based) works on the luminance box-downsampled ``l - 1``
    times.  Levels stop early once the image is too small to halve.
    """

    def __init__(self, levels=5):
        self.levels = levels

    def _luma(self, img):
        if img.shape[0] == 3:
            return np.tensordot(LUMA, img, axes=1)
        return img.mean(axis=0)

    def _pyramid(self, img):
        y = self._luma(as_image(img))[None]
        pyr = [y]
        while len(pyr) < self.levels and min(pyr[-1].shape[1:]) >= 2:
            pyr.append(downsample2(pyr[-1]))
        return pyr

    def features(self, image):
        out = []
        for y in self._pyramid(image):
            gx, gy = sobel_gradients(y)
            out.append(np.concatenate([y, gx, gy]))
        return out

    def vjp(self, image_shape, grads):
        shapes = [f.shape[1:] for f in grads]
        acc = None
        for level in range(len(grads) - 1, -1, -1):
            g = grads[level]
            gy_level = g[0:1] + sobel_adjoint(g[1:2], g[2:3])
            if acc is not None:
                gy_level = gy_level + downsample2_adjoint(acc, (1,) + shapes[level])
            acc = gy_level
        if image_shape[0] == 3:
            return LUMA[:, None, None] * acc
        return np.broadcast_to(acc / image_shape[0], image_shape).copy()


def cosine_distance_and_grad(a, b):
    """``1 - cos(a, b)`` with gradients; flags zero-norm vectors.

    Identical vectors (including two zero vectors) have distance 0; a single
    zero vector gives distance 1 and zero gradients.
    """
    a = np.ravel(a)
    b = np.ravel(b)
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    if na == 0 or nb == 0:
        if np.array_equal(a, b):
            return 0.0, np.zeros_like(a), np.zeros_like(b), False
        log.warning("zero-norm feature vector in cosine distance")
        return 1.0, np.zeros_like(a), np.zeros_like(b), True
    dot = a @ b
    cos = dot / (na * nb)
    ga = -(b / (na * nb) - dot * a / (na ** 3 * nb))
    gb = -(a / (na * nb) - dot * b / (nb ** 3 * na))
    return 1.0 - cos, ga, gb, False


def feature_distances_and_grad(x, y, feat):
    """Per-level cosine distances between feature stacks of ``x`` and ``y``."""
    x, y = _check_pair(x, y)
    fx, fy = feat.features(x), feat.features(y)
    dists, gxs, gys, flags = [], [], [], []
    for a, b in zip(fx, fy):
        d, ga, gb, flag = cosine_distance_and_grad(a, b)
        dists.append(d)
        gxs.append(ga.reshape(a.shape))
        gys.append(gb.reshape(b.shape))
        flags.append(flag)
    return np.array(dists), gxs, gys, flags


def misaligned_reference_loss_and_grad(clear, reference, feat=None):
    """Summed per-level cosine distance; returns ``(loss, g_clear)``."""
    feat = feat or PyramidFeatures()
    dists, gxs, _, _ = feature_distances_and_grad(clear, reference, feat)
    return float(dists.sum()), feat.vjp(as_image(clear).shape, gxs)


def misaligned_reference_loss(clear, reference, feat=None):
    feat = feat or PyramidFeatures()
    return float(feature_distances_and_grad(clear, reference, feat)[0].sum())


# ---------------------------------------------------------------------------
# Reconstruction loss

def reconstruction_loss_and_grad(observed, recon, feat=None):
    """Mean L1 + SSIM dissimilarity + multi-scale feature cosine distance.

    Returns ``(loss, g_observed, g_recon)``.
    """
    feat = feat or PyramidFeatures()
    observed, recon = _check_pair(observed, recon)
    n = observed.size
    diff = recon - observed
    l1 = np.abs(diff).sum() / n
    s = ssim(observed, recon)
    s_term = 0.5 * (1.0 - s.mean())
    dists, g_fo, g_fr, _ = feature_distances_and_grad(observed, recon, feat)
    perc = dists.mean()
    g_l1 = np.sign(diff) / n
    g_so, g_sr = ssim_vjp(observed, recon, np.full(s.shape, -0.5 / s.size))
    scale = 1.0 / len(dists)
    g_po = feat.vjp(observed.shape, [scale * g for g in g_fo])
    g_pr = feat.vjp(recon.shape, [scale * g for g in g_fr])
    return l1 + s_term + perc, -g_l1 + g_so + g_po, g_l1 + g_sr + g_pr


def reconstruction_loss(observed, recon, feat=None):
    return reconstruction_loss_and_grad(observed, recon, feat)[0]


# ---------------------------------------------------------------------------
# Least-squares adversarial losses and depth normalisation

def _scores(x):
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty score map")
    if not np.all(np.isfinite(x)):
        raise ValueError("score map contains non-finite values")
    return x


def lsgan_d_loss(real, fake):
    """Discriminator loss ``mean((real - 1)^2) + mean(fake^2)``."""
    real, fake = _scores(real), _scores(fake)
    return float(((real - 1.0) ** 2).mean() + (fake ** 2).mean())


def lsgan_g_loss(fake):
    """Generator loss ``mean((fake - 1)^2)``."""
    return float(((_scores(fake) - 1.0) ** 2).mean())


def normalize_depth(depth):
    """Scale-free depth ``d / mean(d)``."""
    d = np.asarray(depth, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("depth must be strictly positive")
    return d / d.mean()
