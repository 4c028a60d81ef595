"""Planar float images, resampling helpers and PFM/PPM file I/O.

Images are plain ``numpy`` arrays laid out channel-planar as ``(C, H, W)``
with ``float64`` samples.  Single-channel fields (depth, beta, masks, score
maps) use ``C == 1``.  The pixel convention used throughout the package puts
``(0, 0)`` at the centre of the top-left pixel with ``x`` along columns and
``y`` along rows.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

# Largest width/height accepted by the readers.
MAX_DIM = 1 << 16


class ImageFormatError(ValueError):
    """Base class for PFM/PPM decoding failures."""


class MalformedHeader(ImageFormatError):
    pass


class DimensionOverflow(ImageFormatError):
    pass


class TruncatedPayload(ImageFormatError):
    pass


class UnsupportedMaxval(ImageFormatError):
    pass


class NaNPayload(ImageFormatError):
    pass


def as_image(array, channels=None):
    """Return ``array`` as a float64 ``(C, H, W)`` image.

    2-D input is promoted to a single channel.  When ``channels`` is given the
    channel count is checked.
    """
    img = np.asarray(array, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {img.shape}")
    if channels is not None and img.shape[0] != channels:
        raise ValueError(f"expected {channels} channel(s), got {img.shape[0]}")
    return img


def check_rgb(img):
    img = as_image(img, 3)
    if not np.all(np.isfinite(img)):
        raise ValueError("RGB image contains NaN or Inf")
    return img


def check_depth(depth):
    depth = as_image(depth, 1)
    if not np.all(np.isfinite(depth)) or np.any(depth <= 0):
        raise ValueError("depth must be finite and strictly positive")
    return depth


@dataclass
class FrameSequence:
    """Short clip centred on a target frame.

    ``frames`` holds ``2 * window + 1`` (or more) images of identical shape;
    the target is ``frames[target_index]``.
    """

    frames: list
    intrinsics: object
    window: int = 1
    target_index: int = field(default=None)

    def __post_init__(self):
        self.frames = [as_image(f) for f in self.frames]
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if 2 * self.window + 1 > len(self.frames):
            raise ValueError(
                f"window {self.window} needs {2 * self.window + 1} frames, got {len(self.frames)}")
        shape = self.frames[0].shape
        if any(f.shape != shape for f in self.frames):
            raise ValueError("all frames must share one shape")
        if self.target_index is None:
            self.target_index = len(self.frames) // 2

    @property
    def target(self):
        return self.frames[self.target_index]

    @property
    def source_indices(self):
        lo = max(0, self.target_index - self.window)
        hi = min(len(self.frames), self.target_index + self.window + 1)
        return [i for i in range(lo, hi) if i != self.target_index]

    @property
    def sources(self):
        return [self.frames[i] for i in self.source_indices]

    @property
    def shape(self):
        return self.frames[0].shape


# ---------------------------------------------------------------------------
# PFM

def _read_token(buf, pos):
    """Read one whitespace-delimited ASCII token starting at ``pos``."""
    n = len(buf)
    while pos < n and buf[pos:pos + 1].isspace():
        pos += 1
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise MalformedHeader("unexpected end of header")
    return buf[start:pos], pos


def read_pfm(path, depth=False):
    """Read a PFM file into a ``(C, H, W)`` float64 image.

    Rows are stored bottom-up on disk and are flipped to top-down here.  With
    ``depth=True`` a NaN sample raises :class:`NaNPayload`.
    """
    with open(path, "rb") as f:
        buf = f.read()
    magic, pos = _read_token(buf, 0)
    if magic == b"PF":
        channels = 3
    elif magic == b"Pf":
        channels = 1
    else:
        raise MalformedHeader(f"bad PFM magic {magic!r}")
    tokens = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        tokens.append(tok)
    try:
        width, height = int(tokens[0]), int(tokens[1])
        scale = float(tokens[2])
    except ValueError:
        raise MalformedHeader(f"bad PFM header fields {tokens!r}") from None
    if width <= 0 or height <= 0 or scale == 0.0:
        raise MalformedHeader(f"bad PFM dimensions/scale {width}x{height}, {scale}")
    if width > MAX_DIM or height > MAX_DIM:
        raise DimensionOverflow(f"PFM dimensions {width}x{height} exceed {MAX_DIM}")
    # exactly one whitespace byte separates the header from the payload
    pos += 1
    count = width * height * channels
    payload = buf[pos:]
    if len(payload) < 4 * count:
        raise TruncatedPayload(f"PFM payload has {len(payload)} bytes, need {4 * count}")
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(payload, dtype=dtype, count=count)
    data = data.reshape(height, width, channels)[::-1]
    if depth and np.isnan(data).any():
        raise NaNPayload(f"{path}: NaN samples in depth map")
    return np.ascontiguousarray(data.transpose(2, 0, 1), dtype=np.float64)


def write_pfm(image, path):
    """Write a 1- or 3-channel image as little-endian PFM (scale -1.0)."""
    img = as_image(image)
    channels, height, width = img.shape
    if channels == 3:
        magic = b"PF"
    elif channels == 1:
        magic = b"Pf"
    else:
        raise ValueError(f"PFM holds 1 or 3 channels, got {channels}")
    header = magic + b"\n%d %d\n-1.0\n" % (width, height)
    payload = img.transpose(1, 2, 0)[::-1].astype("<f4").tobytes()
    _atomic_write(path, header + payload)


# ---------------------------------------------------------------------------
# PPM

def _ppm_fields(buf):
    """Parse ``P6 width height maxval`` allowing ``#`` comments."""
    if not buf.startswith(b"P6"):
        raise MalformedHeader(f"bad PPM magic {buf[:2]!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf):
            ch = buf[pos:pos + 1]
            if ch == b"#":
                end = buf.find(b"\n", pos)
                pos = len(buf) if end < 0 else end + 1
            elif ch.isspace():
                pos += 1
            else:
                break
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise MalformedHeader(f"bad PPM header token {tok!r}")
        fields.append(int(tok))
    return fields, pos + 1


def read_ppm(path):
    """Read an 8-bit binary P6 file as a ``(3, H, W)`` image in ``[0, 1]``."""
    with open(path, "rb") as f:
        buf = f.read()
    (width, height, maxval), pos = _ppm_fields(buf)
    if maxval != 255:
        raise UnsupportedMaxval(f"only maxval 255 is supported, got {maxval}")
    if width <= 0 or height <= 0:
        raise MalformedHeader(f"bad PPM dimensions {width}x{height}")
    if width > MAX_DIM or height > MAX_DIM:
        raise DimensionOverflow(f"PPM dimensions {width}x{height} exceed {MAX_DIM}")
    count = width * height * 3
    if len(buf) - pos < count:
        raise TruncatedPayload(f"PPM payload has {len(buf) - pos} bytes, need {count}")
    data = np.frombuffer(buf, dtype=np.uint8, count=count, offset=pos)
    return data.reshape(height, width, 3).transpose(2, 0, 1) / 255.0


def to_bytes(image):
    """Quantise ``[0, 1]`` floats to bytes with ``round(clamp(v) * 255)``."""
    img = np.clip(as_image(image), 0.0, 1.0)
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def write_ppm(image, path):
    img = as_image(image, 3)
    header = b"P6\n%d %d\n255\n" % (img.shape[2], img.shape[1])
    _atomic_write(path, header + to_bytes(img).transpose(1, 2, 0).tobytes())


def _atomic_write(path, data):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Resampling and filters

def downsample2(image):
    """2x2 box average.  A trailing odd row/column is dropped."""
    img = as_image(image)
    _, h, w = img.shape
    if h < 2 or w < 2:
        raise ValueError(f"downsample2 needs height, width >= 2, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    x = img[:, :2 * h2, :2 * w2]
    return 0.25 * (x[:, 0::2, 0::2] + x[:, 0::2, 1::2] + x[:, 1::2, 0::2] + x[:, 1::2, 1::2])


def downsample2_adjoint(grad, shape):
    """Adjoint of :func:`downsample2` for an input of ``shape``."""
    out = np.zeros(shape)
    h2, w2 = grad.shape[-2:]
    q = 0.25 * grad
    for dy in (0, 1):
        for dx in (0, 1):
            out[..., dy:2 * h2:2, dx:2 * w2:2] += q
    return out


def pad_edge_adjoint(grad, pad):
    """Fold the gradient of an edge-padded array back onto the original.

    ``grad`` has the padded shape ``(..., H + 2p, W + 2p)``.
    """
    g = np.array(grad, dtype=np.float64)
    # rows: fold padded rows into the first/last row
    top = g[..., :pad + 1, :].sum(axis=-2)
    bottom = g[..., -pad - 1:, :].sum(axis=-2)
    g = g[..., pad:-pad, :].copy()
    g[..., 0, :] = top
    g[..., -1, :] = bottom
    left = g[..., :, :pad + 1].sum(axis=-1)
    right = g[..., :, -pad - 1:].sum(axis=-1)
    g = g[..., :, pad:-pad].copy()
    g[..., :, 0] = left
    g[..., :, -1] = right
    return g


def _pad_spec(ndim, pad):
    return [(0, 0)] * (ndim - 2) + [(pad, pad), (pad, pad)]


def _sum3x3(p, h, w):
    # separable and window-local: identical neighbourhoods give identical sums,
    # which running-sum filters do not guarantee
    r = p[..., :, 0:w] + p[..., :, 1:w + 1] + p[..., :, 2:w + 2]
    return r[..., 0:h, :] + r[..., 1:h + 1, :] + r[..., 2:h + 2, :]


def box3(x):
    """3x3 mean filter with replicate padding over the last two axes."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    return _sum3x3(np.pad(x, _pad_spec(x.ndim, 1), mode="edge"), h, w) / 9.0


def box3_adjoint(grad):
    g = np.asarray(grad, dtype=np.float64) / 9.0
    h, w = g.shape[-2:]
    # centred 3x3 sums of the zero-padded gradient, folded back onto the edges
    p = _sum3x3(np.pad(g, _pad_spec(g.ndim, 2)), h + 2, w + 2)
    return pad_edge_adjoint(p, 1)


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 8.0


def _correlate3(x, kernel):
    p = np.pad(x, _pad_spec(x.ndim, 1), mode="edge")
    h, w = x.shape[-2:]
    out = np.zeros(x.shape)
    for dy in range(3):
        for dx in range(3):
            k = kernel[dy, dx]
            if k:
                out += k * p[..., dy:dy + h, dx:dx + w]
    return out


def _correlate3_adjoint(grad, kernel):
    h, w = grad.shape[-2:]
    p = np.zeros(grad.shape[:-2] + (h + 2, w + 2))
    for dy in range(3):
        for dx in range(3):
            k = kernel[dy, dx]
            if k:
                p[..., dy:dy + h, dx:dx + w] += k * grad
    return pad_edge_adjoint(p, 1)


def sobel_gradients(image):
    """Sobel derivatives ``(gx, gy)`` with replicate padding.

    Kernels are scaled by 1/8 so that a unit-slope ramp gives a unit response.
    ``gx`` differentiates along columns, ``gy`` along rows.
    """
    img = as_image(image)
    return _correlate3(img, _SOBEL_X), _correlate3(img, _SOBEL_X.T)


def sobel_adjoint(grad_x, grad_y):
    return _correlate3_adjoint(grad_x, _SOBEL_X) + _correlate3_adjoint(grad_y, _SOBEL_X.T)


def linear_interp_matrix(n_out, n_in, scale):
    """Matrix sampling an ``n_in`` signal at ``(i + 0.5) / scale - 0.5``.

    Pixel-centre aligned linear interpolation with clamped ends; used to move
    fields between pyramid levels and to expand coarse control grids.
    """
    pos = (np.arange(n_out) + 0.5) / scale - 0.5
    return interp_matrix_at(pos, n_in)


def interp_matrix_at(pos, n_in):
    pos = np.clip(np.asarray(pos, dtype=np.float64), 0.0, n_in - 1)
    m = np.zeros((len(pos), n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    i0 = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - i0
    rows = np.arange(len(pos))
    m[rows, i0] = 1.0 - frac
    m[rows, i0 + 1] += frac
    return m


def resize_bilinear(field2d, height, width, scale=None):
    """Pixel-centre aligned bilinear resize of a 2-D field to ``height x width``.

    ``scale`` is the fine/coarse pixel ratio; it defaults to the size ratio
    per axis but pyramid levels pass 2 so dropped odd rows do not skew it.
    """
    f = np.asarray(field2d, dtype=np.float64)
    h, w = f.shape
    my = linear_interp_matrix(height, h, scale or height / h)
    mx = linear_interp_matrix(width, w, scale or width / w)
    return np.einsum("ij,jk,lk->il", my, f, mx)
