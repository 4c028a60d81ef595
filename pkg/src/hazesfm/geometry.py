"""Pinhole projection, SE(3) poses and differentiable inverse warping.

A pose maps points from the target camera frame into a source camera frame,
``X_s = R X_t + t``.  Target pixel ``x`` with depth ``d`` back-projects to
``d * K^-1 [x, y, 1]`` and lands at ``y ~ K (R X + t)`` in the source.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .imagecore import as_image

# Transformed depths at or below this are treated as behind the camera.
MIN_DEPTH = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def validate(self, height, width):
        if not (0 <= self.cx <= width - 1 and 0 <= self.cy <= height - 1):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside {width}x{height}")
        return self

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def half(self):
        """Intrinsics for an image downsampled by a 2x2 box average."""
        return CameraIntrinsics(self.fx / 2, self.fy / 2, (self.cx - 0.5) / 2, (self.cy - 0.5) / 2)

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))


def skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def rotation_matrix(axis_angle):
    """Rodrigues' formula."""
    w = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < 1e-8:
        return np.eye(3) + W + 0.5 * W @ W
    return np.eye(3) + np.sin(theta) / theta * W + (1 - np.cos(theta)) / theta ** 2 * W @ W


def rotation_log(R):
    """Axis-angle vector of a rotation matrix (angle < pi)."""
    R = np.asarray(R, dtype=np.float64)
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-6:
        return 0.5 * vee
    if np.pi - theta < 1e-6:
        # near pi the antisymmetric part vanishes; use the symmetric part
        B = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(B), 0.0, None))
        i = int(np.argmax(axis))
        axis = B[i] / axis[i]
        return theta * axis / np.linalg.norm(axis)
    return theta / (2.0 * np.sin(theta)) * vee


def right_jacobian(axis_angle):
    """Right Jacobian of SO(3): ``R(w + dw) ~ R(w) Exp(Jr dw)``."""
    w = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < 1e-5:
        return np.eye(3) - 0.5 * W + W @ W / 6.0
    return (np.eye(3) - (1 - np.cos(theta)) / theta ** 2 * W
            + (theta - np.sin(theta)) / theta ** 3 * W @ W)


@dataclass(frozen=True)
class PoseSE3:
    rotation: tuple = (0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "rotation", tuple(float(v) for v in self.rotation))
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:3], v[3:])

    def vector(self):
        return np.array(self.rotation + self.translation)

    def to_matrix(self):
        T = np.eye(4)
        T[:3, :3] = rotation_matrix(self.rotation)
        T[:3, 3] = self.translation
        return T

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=np.float64)
        return cls(rotation_log(T[:3, :3]), T[:3, 3])

    def compose(self, other):
        """``self * other``: apply ``other`` first."""
        return PoseSE3.from_matrix(self.to_matrix() @ other.to_matrix())

    def inverse(self):
        R = rotation_matrix(self.rotation)
        return PoseSE3(-np.asarray(self.rotation), -R.T @ np.asarray(self.translation))

    def to_dict(self):
        return {"axis_angle": list(self.rotation), "translation": list(self.translation)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["axis_angle"], d["translation"])


def save_json(obj, path):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2)
        f.write("\n")


@dataclass
class WarpResult:
    warped: np.ndarray
    valid_mask: np.ndarray
    sample_coords: np.ndarray


def pixel_rays(height, width, K):
    """``K^-1 [x, y, 1]`` for every pixel, shape ``(3, H, W)``."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([(xs - K.cx) / K.fx, (ys - K.cy) / K.fy, np.ones_like(xs)])


def transform_points(depth, pose, K):
    """Target pixels back-projected with ``depth`` and moved into the source frame.

    Returns ``(P, rays)`` with ``P`` of shape ``(3, H, W)``.
    """
    depth = as_image(depth, 1)[0]
    R = rotation_matrix(pose.rotation)
    t = pose.translation
    rays = pixel_rays(*depth.shape, K)
    X = rays * depth
    P = np.stack([R[i, 0] * X[0] + R[i, 1] * X[1] + R[i, 2] * X[2] + t[i] for i in range(3)])
    return P, rays


def project(P, K):
    """Pixel coordinates ``(2, H, W)`` of camera-frame points ``P``.

    Points with depth ``<= MIN_DEPTH`` map to ``(-1, -1)``, outside every image.
    """
    z = P[2]
    ok = z > MIN_DEPTH
    zs = np.where(ok, z, 1.0)
    u = np.where(ok, K.fx * P[0] / zs + K.cx, -1.0)
    v = np.where(ok, K.fy * P[1] / zs + K.cy, -1.0)
    return np.stack([u, v])


def reproject(depth, pose, K):
    """Source-frame sample coordinates ``(2, H, W)`` for every target pixel."""
    P, _ = transform_points(depth, pose, K)
    return project(P, K)


class _Bilinear:
    """Four-neighbour bilinear lookup at fixed coordinates, with its adjoints."""

    def __init__(self, shape, coords):
        h, w = shape
        self.shape = shape
        x, y = coords[0], coords[1]
        self.valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
        xc = np.clip(x, 0.0, w - 1)
        yc = np.clip(y, 0.0, h - 1)
        x0 = np.minimum(np.floor(xc), max(w - 2, 0)).astype(np.int64)
        y0 = np.minimum(np.floor(yc), max(h - 2, 0)).astype(np.int64)
        self.fx = xc - x0
        self.fy = yc - y0
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        self.idx = [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1]

    def weights(self):
        fx, fy = self.fx, self.fy
        return [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy]

    def corners(self, source):
        flat = source.reshape(source.shape[0], -1)
        return [flat[:, i] for i in self.idx]

    def sample(self, source):
        c = self.corners(source)
        wts = self.weights()
        return sum(wt * ci for wt, ci in zip(wts, c))

    def coord_derivatives(self, source):
        """``d sample / dx`` and ``d sample / dy``; zero outside the image."""
        c00, c01, c10, c11 = self.corners(source)
        fx, fy = self.fx, self.fy
        dx = (1 - fy) * (c01 - c00) + fy * (c11 - c10)
        dy = (1 - fx) * (c10 - c00) + fx * (c11 - c01)
        return dx * self.valid, dy * self.valid

    def source_adjoint(self, grad):
        """Scatter ``grad`` (C, H', W') back onto the source grid."""
        n = self.shape[0] * self.shape[1]
        out = np.zeros((grad.shape[0], n))
        wts = self.weights()
        for c in range(grad.shape[0]):
            g = grad[c]
            for i, wt in zip(self.idx, wts):
                out[c] += np.bincount(i.ravel(), weights=(g * wt).ravel(), minlength=n)
        return out.reshape((grad.shape[0],) + self.shape)


def bilinear_sample(source, coords):
    """Bilinear lookup with clamp-to-edge values and an in-bounds validity mask."""
    source = as_image(source)
    coords = np.asarray(coords, dtype=np.float64)
    if not np.all(np.isfinite(coords)):
        raise ValueError("sample coordinates must be finite")
    lut = _Bilinear(source.shape[1:], coords)
    return WarpResult(lut.sample(source), lut.valid[None].astype(np.float64), coords)


@dataclass
class WarpCache:
    """Forward intermediates of :func:`warp_forward` needed by :func:`warp_vjp`."""

    depth: np.ndarray
    rays: np.ndarray
    P: np.ndarray
    coords: np.ndarray
    valid: np.ndarray
    warped: np.ndarray
    lut: _Bilinear
    source: np.ndarray
    pose: PoseSE3
    K: CameraIntrinsics

    @property
    def z(self):
        return self.P[2]


def warp_forward(source, depth, pose, K):
    source = as_image(source)
    depth = as_image(depth, 1)
    P, rays = transform_points(depth, pose, K)
    coords = project(P, K)
    lut = _Bilinear(source.shape[1:], coords)
    valid = lut.valid & (P[2] > MIN_DEPTH)
    return WarpCache(depth[0], rays, P, coords, valid, lut.sample(source), lut, source, pose, K)


def warp_frame(source, depth, pose, K):
    """Inverse-warp ``source`` into the target view."""
    c = warp_forward(source, depth, pose, K)
    return WarpResult(c.warped, c.valid[None].astype(np.float64), c.coords)


def warp_vjp(cache, grad_warped, grad_z=None, need_source=True):
    """Vector-Jacobian product of the warp.

    ``grad_warped`` is the upstream gradient on the warped image and
    ``grad_z`` an optional upstream gradient on the transformed depth.  Invalid
    pixels contribute nothing.  Returns ``(g_log_depth (H, W), g_pose (6,),
    g_source)``; ``g_source`` is ``None`` unless requested.
    """
    c = cache
    K = c.K
    gw = np.where(c.valid, grad_warped, 0.0)
    dx, dy = c.lut.coord_derivatives(c.source)
    gu = (gw * dx).sum(axis=0)
    gv = (gw * dy).sum(axis=0)
    P = c.P
    z = np.where(c.valid, P[2], 1.0)
    gP = np.stack([
        gu * K.fx / z,
        gv * K.fy / z,
        -(gu * K.fx * P[0] + gv * K.fy * P[1]) / (z * z),
    ])
    if grad_z is not None:
        gP[2] += np.where(c.valid, grad_z, 0.0)
    R = rotation_matrix(c.pose.rotation)
    # dP/dlogd = d * R r
    Rr = np.stack([R[i, 0] * c.rays[0] + R[i, 1] * c.rays[1] + R[i, 2] * c.rays[2] for i in range(3)])
    g_logd = c.depth * (gP * Rr).sum(axis=0)
    g_t = gP.reshape(3, -1).sum(axis=1)
    # dP/dw = -R [X]x Jr  =>  g_w = Jr^T sum(X x (R^T gP))
    a = np.stack([R[0, i] * gP[0] + R[1, i] * gP[1] + R[2, i] * gP[2] for i in range(3)])
    X = c.rays * c.depth
    cross = np.stack([X[1] * a[2] - X[2] * a[1], X[2] * a[0] - X[0] * a[2], X[0] * a[1] - X[1] * a[0]])
    g_w = right_jacobian(c.pose.rotation).T @ cross.reshape(3, -1).sum(axis=1)
    g_src = c.lut.source_adjoint(gw) if need_source else None
    return g_logd, np.concatenate([g_w, g_t]), g_src


def warp_gradients(source, depth, pose, K, upstream):
    """Gradients of ``sum(upstream * warped)`` w.r.t. log depth, pose and source."""
    cache = warp_forward(source, depth, pose, K)
    g_logd, g_pose, g_src = warp_vjp(cache, as_image(upstream))
    return g_logd[None], g_pose, g_src
