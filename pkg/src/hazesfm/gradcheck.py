"""Finite-difference verification of the hand-written gradients.

Each component is scalarised with random upstream weights and its analytic
vector-Jacobian product is compared against central differences.  Random
instances that land near a kink (an absolute value, a clamp, a bilinear cell
boundary or a tie between sources) are detected by comparing differences at
two step sizes and redrawn.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .asm import asm_residual_and_grad
from .geometry import CameraIntrinsics, PoseSE3, warp_forward, warp_vjp
from .losses import (LossWeights, photometric_error, photometric_vjp, smoothness_loss_and_grad,
                     ssim, ssim_vjp)
from .objective import LevelData, Variables, objective

COMPONENTS = ("asm", "warp", "ssim", "photometric", "smoothness", "objective")
PIXEL_TOL = 1e-4
POSE_TOL = 1e-3
STEP = 1e-4
MAX_DRAWS = 50


@dataclass
class CheckEntry:
    component: str
    path: str
    max_rel_error: float
    tolerance: float
    passed: bool


@dataclass
class GradcheckReport:
    seed: int
    size: tuple
    entries: list = field(default_factory=list)

    @property
    def passed(self):
        return all(e.passed for e in self.entries)

    def failures(self):
        return [e for e in self.entries if not e.passed]

    def to_dict(self):
        return {"seed": self.seed, "size": list(self.size), "passed": self.passed,
                "entries": [asdict(e) for e in self.entries]}


class _Kink(Exception):
    pass


MAX_COORDS = 16


def _rel_error(analytic, numeric):
    scale = np.abs(numeric).max()
    if scale == 0:
        return float(np.abs(analytic).max())
    return float(np.abs(analytic - numeric).max() / scale)


def _coords(shape, rng):
    """At most ``MAX_COORDS`` coordinates of an array, chosen deterministically."""
    allidx = list(np.ndindex(shape))
    if len(allidx) <= MAX_COORDS:
        return allidx
    pick = rng.choice(len(allidx), MAX_COORDS, replace=False)
    return [allidx[i] for i in sorted(pick)]


def _numeric(f, x, idx, step):
    x = np.array(x, dtype=np.float64)
    out = np.zeros(len(idx))
    for j, i in enumerate(idx):
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        out[j] = (f(xp) - f(xm)) / (2 * step)
    return out


def _compare(path, analytic, f, x, tol, rng, corrupt):
    """Max relative error over sampled coordinates; raises ``_Kink`` near kinks."""
    analytic = np.asarray(analytic, dtype=np.float64).reshape(np.shape(x))
    if corrupt:
        analytic = analytic * 1.1 + 1e-3
    idx = _coords(np.shape(x), rng)
    a = np.array([analytic[i] for i in idx])
    num = _numeric(f, x, idx, STEP)
    err = _rel_error(a, num)
    if err > tol:
        # a smooth function gives nearly the same difference at half the step
        half = _numeric(f, x, idx, STEP / 2)
        if np.abs(num - half).max() > 1e-6 * max(np.abs(num).max(), 1e-12):
            raise _Kink()
    return err


class _Case:
    def __init__(self, rng, size):
        self.rng = rng
        self.h, self.w = size

    def image(self, lo=0.2, hi=0.8, c=3):
        return self.rng.uniform(lo, hi, (c, self.h, self.w))

    def weights(self, shape):
        return self.rng.normal(size=shape)

    def intrinsics(self):
        return CameraIntrinsics(float(self.w), float(self.w), (self.w - 1) / 2, (self.h - 1) / 2)

    def pose(self):
        # moving away from the scene keeps every sample inside the source frame
        rot = self.rng.normal(0, 0.005, 3)
        trans = self.rng.normal(0, 0.03, 3) + [0.0, 0.0, 0.4]
        return np.concatenate([rot, trans])


def _check_asm(case):
    hazy = case.image()
    clear = case.image()
    logd = np.log(case.rng.uniform(1.0, 5.0, (1, case.h, case.w)))
    logb = np.log(0.2)
    a = np.array([0.9, 0.85, 0.8])
    wgt = case.weights(clear.shape)

    def f(logd_, logb_, clear_):
        return float((wgt * asm_residual_and_grad(hazy, clear_, logd_, logb_, a)[0]).sum())

    _, dld, dlb, dcl = asm_residual_and_grad(hazy, clear, logd, logb, a)
    return [("log_depth", (wgt * dld).sum(axis=0, keepdims=True), lambda x: f(x, logb, clear), logd, PIXEL_TOL),
            ("log_beta", (wgt * dlb).sum(), lambda x: f(logd, float(x), clear), np.array(logb), PIXEL_TOL),
            ("clear", wgt * dcl, lambda x: f(logd, logb, x), clear, PIXEL_TOL)]


def _check_warp(case):
    K = case.intrinsics()
    src = case.image()
    depth = case.rng.uniform(2.0, 4.0, (1, case.h, case.w))
    pose = case.pose()
    wgt = case.weights(src.shape)

    def f(logd, pv, s):
        c = warp_forward(s, np.exp(logd), PoseSE3.from_vector(pv), K)
        if not c.valid.all():
            raise _Kink()
        return float((wgt * c.warped).sum())

    cache = warp_forward(src, depth, PoseSE3.from_vector(pose), K)
    if not cache.valid.all():
        raise _Kink()
    g_ld, g_pose, g_src = warp_vjp(cache, wgt)
    logd = np.log(depth)

    def with_pose(part):
        def g(x):
            pv = pose.copy()
            pv[part] = x
            return f(logd, pv, src)
        return g

    return [("log_depth", g_ld[None], lambda x: f(x, pose, src), logd, PIXEL_TOL),
            ("rotation", g_pose[:3], with_pose(slice(0, 3)), pose[:3], POSE_TOL),
            ("translation", g_pose[3:], with_pose(slice(3, 6)), pose[3:], POSE_TOL),
            ("source", g_src, lambda x: f(logd, pose, x), src, PIXEL_TOL)]


def _check_ssim(case):
    a, b = case.image(), case.image()
    wgt = case.weights((1, case.h, case.w))
    ga, gb = ssim_vjp(a, b, wgt)
    return [("a", ga, lambda x: float((wgt * ssim(x, b)).sum()), a, PIXEL_TOL),
            ("b", gb, lambda x: float((wgt * ssim(a, x)).sum()), b, PIXEL_TOL)]


def _check_photometric(case):
    p, t = case.image(), case.image()
    wgt = case.weights((1, case.h, case.w))
    gp, gt = photometric_vjp(p, t, 0.85, wgt[0])
    return [("pred", gp, lambda x: float((wgt * photometric_error(x, t)).sum()), p, PIXEL_TOL),
            ("target", gt, lambda x: float((wgt * photometric_error(p, x)).sum()), t, PIXEL_TOL)]


def _check_smoothness(case):
    logd = np.log(case.rng.uniform(1.0, 10.0, (1, case.h, case.w)))
    ref = case.image(0.0, 1.0)
    _, g_ld, g_ref = smoothness_loss_and_grad(np.exp(logd), ref)
    return [("log_depth", g_ld[None], lambda x: smoothness_loss_and_grad(np.exp(x), ref)[0], logd, PIXEL_TOL),
            ("reference", g_ref, lambda x: smoothness_loss_and_grad(np.exp(logd), x)[0], ref, PIXEL_TOL)]


def _objective_variant(case, mode, beta_mode):
    K = case.intrinsics()
    data = LevelData(case.image(0.3, 0.7), [case.image(0.3, 0.7) for _ in range(2)], K,
                     np.array([0.9, 0.85, 0.88]), reference=case.image())
    if beta_mode == "scalar":
        log_beta = np.array(np.log(0.2))
    else:
        log_beta = np.log(case.rng.uniform(0.1, 0.3, (3, 3)))
    clear = [case.image() for _ in range(3)] if mode == "free-dehaze" else None
    var = Variables(np.log(case.rng.uniform(2.0, 4.0, (case.h, case.w))), log_beta,
                    np.stack([case.pose(), case.pose()]), clear, beta_mode)
    weights = LossWeights()
    base = objective(var, data, weights, mode)
    mask, t_ref = base.mask, base.extras.get("t_ref")

    def total(name, x):
        v = var.copy()
        if name == "log_depth":
            v.log_depth = x
        elif name == "log_beta":
            v.log_beta = x
        elif name == "rotation":
            v.poses[:, :3] = x
        elif name == "translation":
            v.poses[:, 3:] = x
        elif name == "clear":
            v.clear = list(x)
        return objective(v, data, weights, mode, mask=mask, t_ref=t_ref).total

    out = []
    arrays = var.arrays()
    for name, g in base.grads.items():
        tol = POSE_TOL if name in ("rotation", "translation") else PIXEL_TOL
        out.append((f"{mode}/{beta_mode}/{name}", g, lambda x, n=name: total(n, x), arrays[name], tol))
    return out


def _check_objective(case):
    out = []
    for mode, beta_mode in (("tied-dehaze", "scalar"), ("tied-dehaze", "field"), ("free-dehaze", "scalar")):
        out += _objective_variant(case, mode, beta_mode)
    return out


_CHECKS = {"asm": _check_asm, "warp": _check_warp, "ssim": _check_ssim,
           "photometric": _check_photometric, "smoothness": _check_smoothness,
           "objective": _check_objective}


def gradcheck(component="all", seed=0, size=(8, 8), corrupt=None):
    """Compare analytic gradients with central differences.

    ``component`` is one of :data:`COMPONENTS` or ``"all"``.  ``corrupt``
    names a component whose analytic gradients are deliberately scaled, as a
    negative control for the checker itself.
    """
    names = COMPONENTS if component == "all" else (component,)
    for name in names:
        if name not in _CHECKS:
            raise ValueError(f"unknown component {name!r}; expected one of {COMPONENTS} or 'all'")
    h, w = size
    report = GradcheckReport(seed, (int(h), int(w)))
    for name in names:
        entries = None
        for draw in range(MAX_DRAWS):
            rng = np.random.default_rng([seed, COMPONENTS.index(name), draw])
            try:
                entries = [CheckEntry(name, path, err, tol, bool(err <= tol))
                           for path, analytic, f, x, tol in _CHECKS[name](_Case(rng, (h, w)))
                           for err in [_compare(path, analytic, f, x, tol, rng, corrupt == name)]]
                break
            except _Kink:
                continue
        if entries is None:
            entries = [CheckEntry(name, "instance", float("inf"), 0.0, False)]
        report.entries.extend(entries)
    return report
