"""Deterministic synthetic hazy sequences with full ground truth.

Scene geometry is a slanted ground plane whose inverse depth is affine in the
target image row, plus axis-aligned boxes whose front faces are given in
target pixel coordinates.  Every frame is ray cast against this geometry and
coloured with a lattice value-noise texture evaluated at the point's
projection into the target frame, so frame ``k`` is an exact geometric warp of
the (continuous) target frame.  Points the target cannot see are excluded
through the validity masks.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .asm import HazeParams, synthesize_haze
from .geometry import (CameraIntrinsics, PoseSE3, pixel_rays, rotation_matrix, save_json,
                       warp_frame)
from .imagecore import read_pfm, read_ppm, write_pfm, write_ppm

SELF_CONSISTENCY_TOL = 2e-3


class SceneRejected(ValueError):
    """The scene violates a generation bound (depth range or disparity)."""


@dataclass
class Box:
    """Axis-aligned box; its front face covers target pixels ``[u0, u1] x [v0, v1]``."""

    u0: float
    u1: float
    v0: float
    v1: float
    depth: float
    thickness: float = 2.0


@dataclass
class TextureSpec:
    octaves: int = 4
    base_cell: float = 24.0
    persistence: float = 0.5
    low: float = 0.05
    high: float = 0.85


@dataclass
class SceneSpec:
    seed: int = 0
    width: int = 96
    height: int = 96
    intrinsics: CameraIntrinsics = None
    plane_depth_top: float = 30.0
    plane_depth_bottom: float = 8.0
    boxes: list = field(default_factory=list)
    texture: TextureSpec = field(default_factory=TextureSpec)
    beta: float = 0.05
    # relative amplitude of a smooth non-uniform beta field; 0 keeps beta scalar
    beta_amplitude: float = 0.0
    beta_cell: float = 32.0
    airlight: tuple = (0.85, 0.85, 0.85)
    # pose of every frame relative to the target (target itself is identity)
    poses: list = field(default_factory=lambda: [PoseSE3(), PoseSE3(), PoseSE3()])
    d_min: float = 0.1
    d_max: float = 100.0
    max_disparity: float = 8.0

    def __post_init__(self):
        if self.intrinsics is None:
            self.intrinsics = CameraIntrinsics(float(self.width), float(self.width),
                                               (self.width - 1) / 2, (self.height - 1) / 2)
        elif isinstance(self.intrinsics, dict):
            self.intrinsics = CameraIntrinsics.from_dict(self.intrinsics)
        self.boxes = [b if isinstance(b, Box) else Box(**b) for b in self.boxes]
        if isinstance(self.texture, dict):
            self.texture = TextureSpec(**self.texture)
        self.poses = [p if isinstance(p, PoseSE3) else PoseSE3.from_dict(p) for p in self.poses]
        if len(self.poses) % 2 != 1:
            raise SceneRejected("need an odd number of frames centred on the target")
        self.airlight = tuple(float(a) for a in np.broadcast_to(self.airlight, 3))

    @property
    def window(self):
        return len(self.poses) // 2

    @property
    def target_index(self):
        return self.window

    def to_dict(self):
        d = asdict(self)
        d["intrinsics"] = self.intrinsics.to_dict()
        d["poses"] = [p.to_dict() for p in self.poses]
        d["airlight"] = list(self.airlight)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def linear_trajectory(velocity, angular_velocity=(0.0, 0.0, 0.0), window=1):
    """Constant-velocity camera: frame ``k`` sits at ``k * velocity`` (target coords)."""
    poses = []
    for k in range(-window, window + 1):
        R = rotation_matrix(k * np.asarray(angular_velocity, dtype=np.float64))
        centre = k * np.asarray(velocity, dtype=np.float64)
        poses.append(PoseSE3(k * np.asarray(angular_velocity, dtype=np.float64), -R @ centre))
    return poses


# ---------------------------------------------------------------------------
# value noise

class _Lattice:
    """Random values on an integer lattice, bilinearly interpolated."""

    def __init__(self, rng, cell, extent, margin):
        self.cell = cell
        self.origin = -margin
        n = int(np.ceil((extent + 2 * margin) / cell)) + 2
        self.values = rng.random((n, n))

    def __call__(self, u, v):
        n = self.values.shape[0]
        gx = np.clip((u - self.origin) / self.cell, 0.0, n - 1 - 1e-9)
        gy = np.clip((v - self.origin) / self.cell, 0.0, n - 1 - 1e-9)
        i0 = np.floor(gx).astype(int)
        j0 = np.floor(gy).astype(int)
        fx, fy = gx - i0, gy - j0
        L = self.values
        top = (1 - fx) * L[j0, i0] + fx * L[j0, i0 + 1]
        bot = (1 - fx) * L[j0 + 1, i0] + fx * L[j0 + 1, i0 + 1]
        return (1 - fy) * top + fy * bot


class _Texture:
    """Per-surface RGB value noise as a function of target pixel coordinates."""

    def __init__(self, spec, n_surfaces, rng):
        tex = spec.texture
        extent = max(spec.width, spec.height)
        margin = extent
        self.spec = tex
        self.layers = []
        for _ in range(n_surfaces):
            octaves = []
            for o in range(tex.octaves):
                cell = tex.base_cell / 2 ** o
                # one shared luminance lattice and one lattice per channel
                octaves.append([_Lattice(rng, cell, extent, margin) for _ in range(4)])
            tint = rng.uniform(0.75, 1.0, 3)
            self.layers.append((octaves, tint))

    def __call__(self, surface, u, v):
        out = np.zeros((3,) + u.shape)
        tex = self.spec
        amp_total = sum(tex.persistence ** o for o in range(tex.octaves))
        for sid, (octaves, tint) in enumerate(self.layers):
            sel = surface == sid
            if not sel.any():
                continue
            us, vs = u[sel], v[sel]
            acc = np.zeros((4, us.size))
            for o, lattices in enumerate(octaves):
                amp = tex.persistence ** o
                for c in range(4):
                    acc[c] += amp * lattices[c](us, vs)
            acc /= amp_total
            # stretch the sum of octaves, which clusters around 0.5
            lum = np.clip(0.5 + 1.8 * (acc[0] - 0.5), 0.0, 1.0)
            for c in range(3):
                chroma = np.clip(0.5 + 1.8 * (acc[c + 1] - 0.5), 0.0, 1.0)
                val = tint[c] * (0.75 * lum + 0.25 * chroma)
                out[c][sel] = tex.low + (tex.high - tex.low) * val
        return out


# ---------------------------------------------------------------------------
# ray casting

def _plane_normal(spec):
    K = spec.intrinsics
    s0 = (0 - K.cy) / K.fy
    s1 = (spec.height - 1 - K.cy) / K.fy
    ny = (1 / spec.plane_depth_bottom - 1 / spec.plane_depth_top) / (s1 - s0)
    nz = 1 / spec.plane_depth_top - ny * s0
    return np.array([0.0, ny, nz])


def _cast(spec, origin, dirs):
    """Nearest hit distance and surface id (0 = plane, i+1 = box i) per ray.

    ``dirs`` has shape ``(3, ...)``; distances are in units of ``dirs``.
    """
    shape = dirs.shape[1:]
    best = np.full(shape, np.inf)
    sid = np.full(shape, -1, dtype=int)
    n = _plane_normal(spec)
    nd = n[0] * dirs[0] + n[1] * dirs[1] + n[2] * dirs[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (1.0 - n @ origin) / nd
    hit = (nd > 0) & (s > 0)
    best = np.where(hit, s, best)
    sid = np.where(hit, 0, sid)
    K = spec.intrinsics
    for i, box in enumerate(spec.boxes):
        lo = np.array([(box.u0 - K.cx) / K.fx * box.depth, (box.v0 - K.cy) / K.fy * box.depth, box.depth])
        hi = np.array([(box.u1 - K.cx) / K.fx * box.depth, (box.v1 - K.cy) / K.fy * box.depth,
                       box.depth + box.thickness])
        t_near = np.full(shape, -np.inf)
        t_far = np.full(shape, np.inf)
        for a in range(3):
            d = dirs[a]
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (lo[a] - origin[a]) / d
                t2 = (hi[a] - origin[a]) / d
            par = d == 0
            inside = (origin[a] >= lo[a]) & (origin[a] <= hi[a])
            t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
            t2 = np.where(par, np.where(inside, np.inf, -np.inf), t2)
            t_near = np.maximum(t_near, np.minimum(t1, t2))
            t_far = np.minimum(t_far, np.maximum(t1, t2))
        hit = (t_near <= t_far) & (t_near > 0) & (t_near < best)
        best = np.where(hit, t_near, best)
        sid = np.where(hit, i + 1, sid)
    return best, sid


@dataclass
class SceneBundle:
    spec: SceneSpec
    clear: list
    hazy: list
    depth: list
    beta: np.ndarray          # (1, H, W) on the target grid
    beta_maps: list           # per-frame beta actually used for rendering
    airlight: np.ndarray
    poses: list               # target -> frame k
    valid: list               # (1, H, W) target-grid masks per frame
    intrinsics: CameraIntrinsics
    target_index: int

    @property
    def source_indices(self):
        return [i for i in range(len(self.clear)) if i != self.target_index]


def _render_frame(spec, pose, texture, beta_lattice):
    K = spec.intrinsics
    h, w = spec.height, spec.width
    R = rotation_matrix(pose.rotation)
    t = np.asarray(pose.translation)
    origin = -R.T @ t
    rays = pixel_rays(h, w, K)
    dirs = np.einsum("ji,jhw->ihw", R, rays)
    s, sid = _cast(spec, origin, dirs)
    hit = np.isfinite(s)
    s = np.where(hit, s, spec.d_max)
    X = origin[:, None, None] + s * dirs
    z0 = np.where(X[2] > 1e-9, X[2], 1e-9)
    u0 = K.fx * X[0] / z0 + K.cx
    v0 = K.fy * X[1] / z0 + K.cy
    colour = texture(sid, u0, v0)
    beta = spec.beta * (1.0 + spec.beta_amplitude * (2.0 * beta_lattice(u0, v0) - 1.0))
    # surface point must be the one the target camera sees along its ray
    tdirs = np.stack([(u0 - K.cx) / K.fx, (v0 - K.cy) / K.fy, np.ones_like(u0)])
    tz, tsid = _cast(spec, np.zeros(3), tdirs)
    seen = hit & (X[2] > 0) & (tsid == sid) & (np.abs(tz - X[2]) <= 1e-6 * np.maximum(1.0, X[2]))
    seen &= (u0 >= 0) & (u0 <= w - 1) & (v0 >= 0) & (v0 <= h - 1)
    return colour, s[None], beta[None], sid, seen


def _target_validity(spec, depth0, sid0, pose, frame_sid, frame_seen):
    """Target pixels whose GT warp into frame ``pose`` samples a consistent footprint."""
    K = spec.intrinsics
    h, w = spec.height, spec.width
    from .geometry import reproject
    coords = reproject(depth0, pose, K)
    u, v = coords
    inb = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    uc = np.clip(u, 0, w - 1)
    vc = np.clip(v, 0, h - 1)
    x0 = np.minimum(np.floor(uc), w - 2).astype(int)
    y0 = np.minimum(np.floor(vc), h - 2).astype(int)
    ok = inb.copy()
    for dy in (0, 1):
        for dx in (0, 1):
            ok &= frame_seen[y0 + dy, x0 + dx] & (frame_sid[y0 + dy, x0 + dx] == sid0)
    return ok, coords


def generate(spec):
    """Render clear/hazy frames, depths, beta, airlight, poses and masks."""
    rng = np.random.default_rng(spec.seed)
    K = spec.intrinsics.validate(spec.height, spec.width)
    texture = _Texture(spec, 1 + len(spec.boxes), rng)
    beta_lattice = _Lattice(rng, spec.beta_cell, max(spec.width, spec.height), max(spec.width, spec.height))
    if spec.beta < 0 or spec.beta_amplitude < 0 or spec.beta_amplitude >= 1:
        raise SceneRejected("beta must be >= 0 and beta_amplitude in [0, 1)")
    airlight = np.array(spec.airlight)
    frames = [_render_frame(spec, p, texture, beta_lattice) for p in spec.poses]
    ti = spec.target_index
    _, depth0, _, sid0, _ = frames[ti]
    if depth0.min() < spec.d_min or depth0.max() > spec.d_max:
        raise SceneRejected(
            f"target depth range [{depth0.min():.3g}, {depth0.max():.3g}] outside "
            f"[d_min={spec.d_min}, d_max={spec.d_max}]")
    yy, xx = np.mgrid[0:spec.height, 0:spec.width]
    valid = []
    for k, pose in enumerate(spec.poses):
        if k == ti:
            valid.append(np.ones((1, spec.height, spec.width)))
            continue
        ok, coords = _target_validity(spec, depth0, sid0, pose, frames[k][3], frames[k][4])
        disp = np.hypot(coords[0] - xx, coords[1] - yy)
        inb = (coords[0] >= 0) & (coords[0] <= spec.width - 1) & (coords[1] >= 0) & (coords[1] <= spec.height - 1)
        max_disp = disp[inb].max() if inb.any() else np.inf
        if max_disp > spec.max_disparity:
            raise SceneRejected(
                f"frame {k}: max disparity {max_disp:.2f} px exceeds max_disparity={spec.max_disparity}")
        valid.append(ok[None].astype(np.float64))
    clear, hazy, depth, betas = [], [], [], []
    for colour, d, b, _, _ in frames:
        clear.append(colour)
        depth.append(d)
        betas.append(b)
        hazy.append(synthesize_haze(colour, d, HazeParams(b, airlight)))
    return SceneBundle(spec, clear, hazy, depth, betas[ti], betas, airlight, list(spec.poses),
                       valid, K, ti)


def self_consistency_report(bundle, tol=SELF_CONSISTENCY_TOL):
    """Mean abs error of GT-warped clear source frames against the target."""
    ti = bundle.target_index
    target = bundle.clear[ti]
    errors = {}
    for k in bundle.source_indices:
        res = warp_frame(bundle.clear[k], bundle.depth[ti], bundle.poses[k], bundle.intrinsics)
        mask = (res.valid_mask[0] > 0) & (bundle.valid[k][0] > 0)
        if not mask.any():
            errors[k] = float("inf")
            continue
        errors[k] = float(np.abs(res.warped - target).mean(axis=0)[mask].mean())
    worst = max(errors.values()) if errors else 0.0
    return {"errors": errors, "max_error": worst, "tolerance": tol, "passed": bool(worst <= tol)}


# ---------------------------------------------------------------------------
# directory layout

def write_bundle(bundle, out):
    for sub in ("clear", "hazy", "depth", "valid"):
        os.makedirs(os.path.join(out, sub), exist_ok=True)
    for k in range(len(bundle.clear)):
        name = f"{k:03d}"
        write_ppm(bundle.clear[k], os.path.join(out, "clear", name + ".ppm"))
        write_pfm(bundle.clear[k], os.path.join(out, "clear", name + ".pfm"))
        write_ppm(bundle.hazy[k], os.path.join(out, "hazy", name + ".ppm"))
        write_pfm(bundle.hazy[k], os.path.join(out, "hazy", name + ".pfm"))
        write_pfm(bundle.depth[k], os.path.join(out, "depth", name + ".pfm"))
        write_pfm(bundle.valid[k], os.path.join(out, "valid", name + ".pfm"))
    write_pfm(bundle.beta, os.path.join(out, "beta.pfm"))
    save_json(list(map(float, bundle.airlight)), os.path.join(out, "airlight.json"))
    save_json({"target_index": bundle.target_index,
               "poses": [dict(frame=k, **p.to_dict()) for k, p in enumerate(bundle.poses)]},
              os.path.join(out, "poses.json"))
    save_json(bundle.intrinsics.to_dict(), os.path.join(out, "intrinsics.json"))
    save_json(bundle.spec.to_dict(), os.path.join(out, "scene.json"))


def load_poses(path):
    with open(path) as f:
        data = json.load(f)
    return [PoseSE3.from_dict(p) for p in data["poses"]], data.get("target_index")


def load_bundle(path):
    """Read a directory written by :func:`write_bundle` (float frames)."""
    with open(os.path.join(path, "scene.json")) as f:
        spec = SceneSpec.from_dict(json.load(f))
    n = len(spec.poses)

    def frames(sub, ext="pfm"):
        reader = read_pfm if ext == "pfm" else read_ppm
        return [reader(os.path.join(path, sub, f"{k:03d}.{ext}")) for k in range(n)]

    poses, ti = load_poses(os.path.join(path, "poses.json"))
    with open(os.path.join(path, "airlight.json")) as f:
        airlight = np.array(json.load(f), dtype=np.float64)
    beta = read_pfm(os.path.join(path, "beta.pfm"))
    return SceneBundle(spec, frames("clear"), frames("hazy"), frames("depth"), beta, [beta] * n,
                       airlight, poses, frames("valid"), spec.intrinsics, ti)


def random_scene_spec(seed, beta=None, beta_amplitude=0.0, width=96, height=96, window=1,
                      target_disparity=7.0, static=False, focal=None):
    """Draw a plausible driving-like scene whose max disparity is ``target_disparity``.

    The camera moves forward and sideways so that the focus of expansion sits
    near or beyond the image border, plus a small rotation.  ``focal``
    defaults to half the width.
    """
    rng = np.random.default_rng([seed, 7919])
    if beta is None:
        beta = float(rng.uniform(0.01, 0.1))
    top = float(rng.uniform(15.0, 25.0))
    bottom = float(rng.uniform(5.0, 8.0))
    boxes = []
    for _ in range(int(rng.integers(1, 3))):
        bw, bh = rng.uniform(0.18, 0.3) * width, rng.uniform(0.18, 0.3) * height
        u0 = rng.uniform(0.05 * width, 0.95 * width - bw)
        v0 = rng.uniform(0.25 * height, 0.7 * height - bh)
        boxes.append(Box(float(u0), float(u0 + bw), float(v0), float(v0 + bh),
                         float(rng.uniform(9.0, 14.0)), float(rng.uniform(1.0, 3.0))))
    direction = np.array([rng.choice([-1.0, 1.0]) * rng.uniform(1.0, 1.5), rng.uniform(-0.1, 0.1), 1.0])
    axis = rng.normal(size=3)
    angular = np.deg2rad(rng.uniform(0.2, 0.5)) * axis / np.linalg.norm(axis)
    airlight = tuple(float(a) for a in rng.uniform(0.8, 0.95, 3))
    # a wide field of view keeps rotation and lateral translation distinguishable
    focal = 0.5 * width if focal is None else float(focal)
    intrinsics = CameraIntrinsics(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0)
    spec = SceneSpec(seed=seed, width=width, height=height, intrinsics=intrinsics, plane_depth_top=top,
                     plane_depth_bottom=bottom, boxes=boxes, beta=beta,
                     beta_amplitude=beta_amplitude, airlight=airlight,
                     poses=[PoseSE3()] * (2 * window + 1))
    if static:
        return spec
    scale = 0.5
    for _ in range(6):
        spec.poses = linear_trajectory(scale * direction, angular, window)
        disp = max_disparity(spec)
        scale *= target_disparity / disp
    spec.poses = linear_trajectory(scale * direction, angular, window)
    return spec


def max_disparity(spec):
    """Largest in-bounds GT displacement of a target pixel over all frames."""
    from .geometry import reproject
    s, _ = _cast(spec, np.zeros(3), pixel_rays(spec.height, spec.width, spec.intrinsics))
    yy, xx = np.mgrid[0:spec.height, 0:spec.width]
    worst = 0.0
    for k, pose in enumerate(spec.poses):
        if k == spec.target_index:
            continue
        u, v = reproject(s[None], pose, spec.intrinsics)
        inb = (u >= 0) & (u <= spec.width - 1) & (v >= 0) & (v <= spec.height - 1)
        if inb.any():
            worst = max(worst, float(np.hypot(u - xx, v - yy)[inb].max()))
    return worst
