"""Joint dehazing/depth/pose objective with analytic gradients.

The optimised variables are a per-pixel log depth for the target frame, the
log scattering coefficient (scalar or a coarse control grid expanded
bilinearly), one 6-vector pose per source frame and, in ``free-dehaze`` mode,
the clear frames themselves.

In ``tied-dehaze`` mode the clear target is the closed-form inverse of the
scattering model under the current depth and beta.  A source frame is
sampled at the reprojected location and dehazed there using the depth of the
scene point in the source camera.  Both sides of the photometric comparison
are written as ``A + (x - A) / t_ref`` where ``x`` is the observed target or
the warped source hazed again with the target transmission.  At the current
iterate this is exactly the comparison of dehazed frames.  ``t_ref`` is held
constant during differentiation, like the auto-mask; letting gradients flow
through it rewards shrinking ``beta * d`` because that shrinks every residual.

The objective is::

    eta * L_rec + masked_mean(min_s L_pe) + xi * L_s + gamma * L_mr
        + omega1 * (L_D^I + L_G^I) + omega2 * (L_D^d + L_G^d)

The adversarial terms only enter when external score maps are supplied and
carry no gradient.  The auto-mask is recomputed on every evaluation (unless
given) and treated as a constant.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import PoseSE3, warp_forward, warp_vjp
from .imagecore import interp_matrix_at
from .losses import (PyramidFeatures, lsgan_d_loss, lsgan_g_loss, misaligned_reference_loss_and_grad,
                     photometric_error, photometric_vjp, reconstruction_loss_and_grad,
                     smoothness_loss_and_grad)

MODES = ("tied-dehaze", "free-dehaze")
BETA_MODES = ("scalar", "field", "fixed")


class NumericalError(ArithmeticError):
    """Non-finite objective, state or divergence."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass
class LevelData:
    """Observations at one pyramid level."""

    target: np.ndarray
    sources: list
    intrinsics: object
    airlight: np.ndarray
    reference: np.ndarray = None
    scores: dict = None


@dataclass
class Variables:
    """Point in parameter space; ``log_beta`` is ``()`` or ``(g, g)`` shaped."""

    log_depth: np.ndarray
    log_beta: np.ndarray
    poses: np.ndarray
    clear: list = None
    beta_mode: str = "scalar"
    beta_fixed: float = 0.0

    def arrays(self):
        out = {"log_depth": self.log_depth, "rotation": self.poses[:, :3],
               "translation": self.poses[:, 3:]}
        if self.beta_mode != "fixed":
            out["log_beta"] = self.log_beta
        if self.clear is not None:
            out["clear"] = np.stack(self.clear)
        return out

    def copy(self):
        return Variables(self.log_depth.copy(), np.array(self.log_beta, copy=True), self.poses.copy(),
                         None if self.clear is None else [c.copy() for c in self.clear],
                         self.beta_mode, self.beta_fixed)

    def pose(self, i):
        return PoseSE3.from_vector(self.poses[i])


def beta_expansion(shape, n_nodes):
    """Matrices ``(Uy, Ux)`` mapping an ``n x n`` control grid to ``shape``."""
    h, w = shape
    uy = interp_matrix_at(np.arange(h) * (n_nodes - 1) / max(h - 1, 1), n_nodes)
    ux = interp_matrix_at(np.arange(w) * (n_nodes - 1) / max(w - 1, 1), n_nodes)
    return uy, ux


def beta_map(var, shape):
    """Per-pixel beta ``(H, W)`` for the current variables."""
    if var.beta_mode == "fixed":
        return np.full(shape, float(var.beta_fixed))
    lb = np.asarray(var.log_beta, dtype=np.float64)
    if lb.ndim == 0:
        return np.full(shape, np.exp(lb))
    uy, ux = beta_expansion(shape, lb.shape[0])
    return np.exp(np.einsum("ij,jk,lk->il", uy, lb, ux))


def _beta_grad(var, g_beta, beta):
    if var.beta_mode == "fixed":
        return None
    g_e = g_beta * beta
    lb = np.asarray(var.log_beta)
    if lb.ndim == 0:
        return np.asarray(g_e.sum())
    uy, ux = beta_expansion(g_e.shape, lb.shape[0])
    return np.einsum("ij,jk,kl->il", uy.T, g_e, ux)


@dataclass
class ObjectiveResult:
    total: float
    terms: dict
    grads: dict
    mask: np.ndarray
    dehazed_target: np.ndarray
    extras: dict = field(default_factory=dict)


def _dehaze(hazy, tau, airlight, t_min, clip=True):
    """Closed-form inverse with the pieces needed for its derivative."""
    a = airlight[:, None, None]
    t = np.exp(-tau)
    den = np.maximum(t, t_min)
    raw = (hazy - a) / den + a
    if not clip:
        return raw, np.where(t >= t_min, raw - a, 0.0), np.broadcast_to(1.0 / den, raw.shape)
    clear = np.clip(raw, 0.0, 1.0)
    # d clear / d tau where neither clamp is active
    live = (t >= t_min) & (raw > 0.0) & (raw < 1.0)
    return clear, np.where(live, raw - a, 0.0), np.where((raw > 0.0) & (raw < 1.0), 1.0 / den, 0.0)


def objective(var, data, weights, mode="tied-dehaze", t_min=0.1, mask=None, threads=1,
              features=None, t_ref=None):
    """Evaluate the objective and its gradients at ``var``.

    ``mask`` and ``t_ref`` are recomputed from ``var`` when not given; both
    are returned in the result so that finite-difference checks can hold
    them fixed.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    feat = features or PyramidFeatures()
    alpha = weights.alpha
    K = data.intrinsics
    It = data.target
    A = np.asarray(data.airlight, dtype=np.float64)
    a3 = A[:, None, None]
    h, w = It.shape[1:]
    d = np.exp(var.log_depth)
    beta = beta_map(var, (h, w))
    tau = beta * d
    t = np.exp(-tau)
    tied = mode == "tied-dehaze"
    if tied:
        Jt, dJt_dtau, _ = _dehaze(It, tau, A, t_min)
        if t_ref is None:
            t_ref = np.maximum(t, t_min)
        Jt_n = a3 + (It - a3) / t_ref
    else:
        Jt = var.clear[0]

    g_tau = np.zeros((h, w))
    g_ld = np.zeros((h, w))
    g_beta = np.zeros((h, w))
    g_Jt = np.zeros_like(It)
    terms = {}

    # reconstruction of the hazy target
    recon = Jt * t + a3 * (1.0 - t)
    if weights.eta > 0:
        l_rec, _, g_recon = reconstruction_loss_and_grad(It, recon, feat)
        g_recon *= weights.eta
        g_Jt += g_recon * t
        g_tau += (g_recon * -(Jt - a3) * t).sum(axis=0)
    else:
        l_rec = 0.0
    terms["rec"] = l_rec

    # photometric term over the source frames
    n_src = len(data.sources)

    def forward(i):
        pose = var.pose(i)
        if tied:
            cache = warp_forward(data.sources[i], d[None], pose, K)
            tau_s = beta * cache.z
            # unclamped so that an overestimated beta still receives a gradient
            Jw, dJw_dtau, dJw_dI = _dehaze(cache.warped, tau_s, A, t_min, clip=False)
            pred = a3 + (Jw - a3) * (t / t_ref)
            pe = photometric_error(pred, Jt_n, alpha)[0]
            pe_id = photometric_error(a3 + (data.sources[i] - a3) / t_ref, Jt_n, alpha)[0]
        else:
            cache = warp_forward(var.clear[i + 1], d[None], pose, K)
            Jw, dJw_dtau, dJw_dI = cache.warped, None, None
            pred = Jw
            pe = photometric_error(Jw, Jt, alpha)[0]
            pe_id = photometric_error(var.clear[i + 1], Jt, alpha)[0]
        pe = np.where(cache.valid, pe, np.inf)
        return cache, Jw, dJw_dtau, dJw_dI, pe, pe_id, pred

    pool = ThreadPoolExecutor(threads) if threads > 1 and n_src > 1 else None
    try:
        fw = list(pool.map(forward, range(n_src)) if pool else map(forward, range(n_src)))
        pe_all = np.stack([f[4] for f in fw])
        pe_min = pe_all.min(axis=0)
        best = pe_all.argmin(axis=0)
        if mask is None:
            pe_id_min = np.stack([f[5] for f in fw]).min(axis=0)
            mask = (pe_min < pe_id_min).astype(np.float64)
        else:
            mask = np.asarray(mask, dtype=np.float64).reshape(h, w)
        use = (mask > 0) & np.isfinite(pe_min)
        count = max(int(use.sum()), 1)
        l_pe = float(np.where(use, pe_min, 0.0).sum() / count)
        terms["pe"] = l_pe

        def backward(i):
            cache, Jw, dJw_dtau, dJw_dI, _, _, pred = fw[i]
            g_pe = np.where(use & (best == i), 1.0 / count, 0.0)
            if tied:
                g_pred = photometric_vjp(pred, Jt_n, alpha, g_pe)[0] / t_ref
                g_Jw = g_pred * t
                g_tau_i = (g_pred * -(Jw - a3) * t).sum(axis=0)
                g_tau_s = np.where(cache.valid, (g_Jw * dJw_dtau).sum(axis=0), 0.0)
                g_beta_i = g_tau_s * cache.z
                g_ld_i, g_pose_i, _ = warp_vjp(cache, g_Jw * dJw_dI, g_tau_s * beta, need_source=False)
                return g_ld_i, g_pose_i, None, g_beta_i, g_tau_i, None
            g_Jw, g_Jt_i = photometric_vjp(Jw, Jt, alpha, g_pe)
            g_ld_i, g_pose_i, g_src = warp_vjp(cache, g_Jw, need_source=True)
            return g_ld_i, g_pose_i, g_Jt_i, None, None, g_src

        bw = list(pool.map(backward, range(n_src)) if pool else map(backward, range(n_src)))
    finally:
        if pool:
            pool.shutdown()

    g_poses = np.zeros((n_src, 6))
    g_src_clear = []
    for i, (g_ld_i, g_pose_i, g_Jt_i, g_beta_i, g_tau_i, g_src) in enumerate(bw):
        g_ld += g_ld_i
        g_poses[i] = g_pose_i
        if g_Jt_i is not None:
            g_Jt += g_Jt_i
        if g_beta_i is not None:
            g_beta += g_beta_i
            g_tau += g_tau_i
        g_src_clear.append(g_src)

    # edge-aware smoothness against the clear target
    if weights.xi > 0:
        l_s, g_ld_s, g_ref = smoothness_loss_and_grad(d[None], Jt)
        g_ld += weights.xi * g_ld_s
        g_Jt += weights.xi * g_ref
    else:
        l_s = 0.0
    terms["smooth"] = l_s

    if data.reference is not None and weights.gamma > 0:
        l_mr, g_mr = misaligned_reference_loss_and_grad(Jt, data.reference, feat)
        g_Jt += weights.gamma * g_mr
    else:
        l_mr = 0.0
    terms["mr"] = l_mr

    adv = 0.0
    scores = data.scores or {}
    if "mfir_real" in scores and "mfir_fake" in scores and weights.omega1 > 0:
        adv += weights.omega1 * (lsgan_d_loss(scores["mfir_real"], scores["mfir_fake"])
                                 + lsgan_g_loss(scores["mfir_fake"]))
    if "mdr_real" in scores and "mdr_fake" in scores and weights.omega2 > 0:
        adv += weights.omega2 * (lsgan_d_loss(scores["mdr_real"], scores["mdr_fake"])
                                 + lsgan_g_loss(scores["mdr_fake"]))
    terms["adv"] = adv

    total = weights.eta * l_rec + l_pe + weights.xi * l_s + weights.gamma * l_mr + adv
    for name, value in terms.items():
        if not np.isfinite(value):
            raise NumericalError(f"non-finite objective term {name!r}")

    if tied:
        g_tau += (g_Jt * dJt_dtau).sum(axis=0)
    g_ld += g_tau * tau
    g_beta += g_tau * d
    grads = {"log_depth": g_ld, "rotation": g_poses[:, :3], "translation": g_poses[:, 3:]}
    g_lb = _beta_grad(var, g_beta, beta)
    if g_lb is not None:
        grads["log_beta"] = g_lb
    if not tied:
        grads["clear"] = np.stack([g_Jt] + g_src_clear)
    return ObjectiveResult(float(total), terms, grads, mask, Jt,
                           {"beta": beta, "count": count, "t_ref": t_ref})
