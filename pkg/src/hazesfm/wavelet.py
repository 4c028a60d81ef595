"""Single-level orthonormal 2-D Haar pooling and unpooling.

For a 2x2 block ``[[a, b], [c, d]]`` the four coefficients are::

    ll = ( a + b + c + d) / 2
    lh = ( a + b - c - d) / 2     # row difference, responds to horizontal edges
    hl = ( a - b + c - d) / 2     # column difference, responds to vertical edges
    hh = ( a - b - c + d) / 2
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imagecore import as_image


@dataclass
class HaarBands:
    ll: np.ndarray
    lh: np.ndarray
    hl: np.ndarray
    hh: np.ndarray
    # rows/cols appended by replicate padding before pooling
    pad: tuple = (0, 0)

    def high(self):
        """High-frequency bands stacked as ``(3, C, h, w)`` in LH, HL, HH order."""
        return np.stack([self.lh, self.hl, self.hh])


def haar_pool(image):
    img = as_image(image)
    if img.size == 0:
        raise ValueError("cannot pool an empty image")
    _, h, w = img.shape
    pad = (h % 2, w % 2)
    if any(pad):
        img = np.pad(img, ((0, 0), (0, pad[0]), (0, pad[1])), mode="edge")
    a = img[:, 0::2, 0::2]
    b = img[:, 0::2, 1::2]
    c = img[:, 1::2, 0::2]
    d = img[:, 1::2, 1::2]
    return HaarBands(
        ll=(a + b + c + d) / 2,
        lh=(a + b - c - d) / 2,
        hl=(a - b + c - d) / 2,
        hh=(a - b - c + d) / 2,
        pad=pad,
    )


def haar_unpool(bands):
    ll, lh, hl, hh = (np.asarray(x, dtype=np.float64) for x in (bands.ll, bands.lh, bands.hl, bands.hh))
    if not (ll.shape == lh.shape == hl.shape == hh.shape):
        raise ValueError("band shapes differ")
    c, h, w = ll.shape
    out = np.empty((c, 2 * h, 2 * w))
    out[:, 0::2, 0::2] = (ll + lh + hl + hh) / 2
    out[:, 0::2, 1::2] = (ll + lh - hl - hh) / 2
    out[:, 1::2, 0::2] = (ll - lh + hl - hh) / 2
    out[:, 1::2, 1::2] = (ll - lh - hl + hh) / 2
    ph, pw = getattr(bands, "pad", (0, 0))
    return out[:, :2 * h - ph, :2 * w - pw]


def mfir_input(image):
    """High-frequency Haar bands concatenated with the image along channels.

    The half-resolution bands are upsampled by 2x2 duplication.  For an RGB
    input the result has 12 channels: LH(rgb), HL(rgb), HH(rgb), image(rgb).
    """
    img = as_image(image)
    if img.shape[0] != 3:
        raise ValueError(f"mfir_input needs an RGB image, got {img.shape[0]} channels")
    _, h, w = img.shape
    bands = haar_pool(img)
    up = [np.repeat(np.repeat(b, 2, axis=1), 2, axis=2)[:, :h, :w] for b in (bands.lh, bands.hl, bands.hh)]
    return np.concatenate(up + [img], axis=0)
