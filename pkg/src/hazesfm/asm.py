"""Atmospheric scattering: haze synthesis, dark channel, airlight, inversion.

The image formation model is ``I = J * t + A * (1 - t)`` with transmission
``t = exp(-beta * d)``.  ``beta`` is a scalar or a ``(1, H, W)`` field and the
airlight ``A`` is one value per colour channel (a scalar is broadcast).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import minimum_filter

from .imagecore import as_image, check_depth

DEFAULT_T_MIN = 0.1


@dataclass
class HazeParams:
    """Scattering coefficient (1/m) and airlight."""

    beta: object = 0.0
    airlight: object = 1.0

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim == 2:
            beta = beta[None]
        if np.any(beta < 0) or not np.all(np.isfinite(beta)):
            raise ValueError("beta must be finite and >= 0")
        self.beta = beta
        self.airlight = airlight_vector(self.airlight)

    def beta_map(self, shape):
        """``beta`` broadcast to a ``(1, H, W)`` field."""
        return np.broadcast_to(self.beta, (1,) + tuple(shape[-2:])).astype(np.float64)


@dataclass
class DarkChannelConfig:
    window: int = 15
    top_fraction: float = 0.01

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("dark channel window must be odd and >= 1")
        if not 0.0 < self.top_fraction <= 1.0:
            raise ValueError("top_fraction must lie in (0, 1]")


def airlight_vector(airlight):
    a = np.asarray(airlight, dtype=np.float64).reshape(-1)
    if a.size == 1:
        a = np.repeat(a, 3)
    if a.size != 3:
        raise ValueError("airlight needs one or three components")
    if np.any(a < 0) or np.any(a > 1):
        raise ValueError("airlight components must lie in [0, 1]")
    return a


def _as_params(params):
    if isinstance(params, HazeParams):
        return params
    beta, airlight = params
    return HazeParams(beta, airlight)


def transmission(depth, beta):
    """``exp(-beta * d)`` as a ``(1, H, W)`` map.

    ``beta`` may be a :class:`HazeParams`, a scalar or a broadcastable field.
    """
    depth = check_depth(depth)
    if isinstance(beta, HazeParams):
        beta = beta.beta
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(beta < 0):
        raise ValueError("beta must be >= 0")
    return np.exp(-beta * depth)


def synthesize_haze(clear, depth, params):
    """Render a hazy image from a clear one, per the scattering model."""
    clear = as_image(clear)
    params = _as_params(params)
    t = transmission(depth, params.beta)
    if t.shape[-2:] != clear.shape[-2:]:
        raise ValueError(f"shape mismatch: clear {clear.shape}, transmission {t.shape}")
    a = params.airlight[:clear.shape[0], None, None]
    return clear * t + a * (1.0 - t)


def dark_channel(image, window=15):
    """Min over colour channels and a ``window x window`` neighbourhood.

    Borders replicate the edge pixels.
    """
    img = as_image(image)
    if img.shape[0] != 3:
        raise ValueError(f"dark channel needs an RGB image, got {img.shape[0]} channels")
    cmin = img.min(axis=0)
    if window == 1:
        return cmin[None]
    return minimum_filter(cmin, size=window, mode="nearest")[None]


def estimate_airlight(hazy, cfg=None):
    """Per-channel mean of the hazy image over the brightest dark-channel pixels.

    ``ceil(top_fraction * H * W)`` pixels are used.  Ties in the dark channel
    are broken by ascending row-major index.
    """
    cfg = cfg or DarkChannelConfig()
    img = as_image(hazy, 3)
    dark = dark_channel(img, cfg.window).ravel()
    n = dark.size
    k = max(1, math.ceil(cfg.top_fraction * n - 1e-9))
    # stable sort on -dark keeps row-major order among equal values
    order = np.argsort(-dark, kind="stable")[:k]
    pixels = img.reshape(3, -1)[:, order]
    return np.clip(pixels.mean(axis=1), 0.0, 1.0)


def dehaze_closed_form(hazy, depth, params, t_min=DEFAULT_T_MIN):
    """Invert the scattering model: ``J = (I - A) / max(t, t_min) + A``, clamped."""
    if not 0.0 < t_min <= 1.0:
        raise ValueError("t_min must lie in (0, 1]")
    hazy = as_image(hazy)
    params = _as_params(params)
    t = transmission(depth, params.beta)
    if t.shape[-2:] != hazy.shape[-2:]:
        raise ValueError(f"shape mismatch: hazy {hazy.shape}, transmission {t.shape}")
    a = params.airlight[:hazy.shape[0], None, None]
    return np.clip((hazy - a) / np.maximum(t, t_min) + a, 0.0, 1.0)


def asm_residual_and_grad(hazy, clear, log_depth, log_beta, airlight):
    """Reconstructed hazy frame and its elementwise partial derivatives.

    Returns ``(recon, d_log_depth, d_log_beta, d_clear)`` where each partial is
    the pixelwise derivative of ``recon`` (same shape as ``clear``).  ``hazy``
    only fixes the expected shape; the residual is ``recon - hazy``.
    """
    clear = as_image(clear)
    if hazy is not None and as_image(hazy).shape != clear.shape:
        raise ValueError("hazy and clear shapes differ")
    a = airlight_vector(airlight)[:clear.shape[0], None, None]
    bd = np.exp(np.asarray(log_beta, dtype=np.float64) + np.asarray(log_depth, dtype=np.float64))
    bd = np.broadcast_to(bd, (1,) + clear.shape[1:])
    t = np.exp(-bd)
    recon = clear * t + a * (1.0 - t)
    d_log = (a - clear) * t * bd
    return recon, d_log, d_log.copy(), np.broadcast_to(t, clear.shape).copy()
