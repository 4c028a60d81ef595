"""Coarse-to-fine joint estimation of depth, scattering and pose.

``solve`` minimises :func:`hazesfm.objective.objective` with a bias-corrected
adaptive-moment update per parameter block, on a ``downsample2`` pyramid.
"""

from __future__ import annotations

import contextlib
import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .asm import DarkChannelConfig, dehaze_closed_form, estimate_airlight, HazeParams
from .geometry import PoseSE3
from .imagecore import as_image, downsample2, resize_bilinear
from .losses import LossWeights
from .objective import BETA_MODES, MODES, LevelData, NumericalError, Variables, beta_map, objective

log = logging.getLogger(__name__)

BLOCKS = ("log_depth", "log_beta", "rotation", "translation", "clear")


@dataclass
class OptimConfig:
    mode: str = "tied-dehaze"
    beta_mode: str = "scalar"
    beta_init: float = 0.02
    # nodes per axis of the beta control grid in "field" mode
    beta_grid: int = 4
    learning_rates: dict = field(default_factory=lambda: {
        "log_depth": 1e-2, "log_beta": 2e-2, "rotation": 2e-4, "translation": 2e-3, "clear": 1e-2})
    # learning rates decay geometrically to this fraction by the end of a level
    lr_final_fraction: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    max_iterations: int = 500
    # iterations at the start of each level during which poses stay fixed
    pose_warmup: int = 0
    pyramid_levels: int = 3
    tolerance: float = 1e-6
    tolerance_window: int = 20
    divergence_patience: int = 50
    d_min: float = 0.1
    d_max: float = 100.0
    beta_min: float = 1e-4
    beta_max: float = 2.0
    # transmission floor for dehazed outputs
    t_min: float = 0.1
    # floor used inside the objective; kept small so that clamping does not
    # penalise correct optical depths in dense haze
    objective_t_min: float = 1e-3
    deterministic: bool = False
    threads: int = 1
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights.from_dict(self.weights)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.beta_mode not in BETA_MODES:
            raise ValueError(f"beta_mode must be one of {BETA_MODES}")
        if not 0 < self.d_min < self.d_max:
            raise ValueError("need 0 < d_min < d_max")
        if not 0 < self.beta_min < self.beta_max:
            raise ValueError("need 0 < beta_min < beta_max")
        lrs = dict(OptimConfig.__dataclass_fields__["learning_rates"].default_factory())
        lrs.update(self.learning_rates)
        self.learning_rates = lrs
        if any(v <= 0 for v in lrs.values()):
            raise ValueError("learning rates must be positive")
        if self.pyramid_levels < 1 or self.max_iterations < 1:
            raise ValueError("pyramid_levels and max_iterations must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimState:
    variables: Variables
    moments: dict = field(default_factory=dict)
    iteration: int = 0


def step(state, grads, config, lr_scale=1.0):
    """One adaptive-moment update with bias correction and box projection."""
    var = state.variables.copy()
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    moments = dict(state.moments)
    arrays = var.arrays()
    for name, g in grads.items():
        if name not in arrays:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != np.shape(arrays[name]):
            raise ValueError(f"gradient shape {g.shape} does not match {name} {np.shape(arrays[name])}")
        # per-block step count so blocks that join late get full bias correction
        m, v, k = state.moments.get(name, (np.zeros_like(g), np.zeros_like(g), 0))
        k += 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        moments[name] = (m, v, k)
        update = config.learning_rates[name] * lr_scale * (m / (1 - b1 ** k)) / (np.sqrt(v / (1 - b2 ** k)) + eps)
        _apply(var, name, update)
    var.log_depth = np.clip(var.log_depth, np.log(config.d_min), np.log(config.d_max))
    if var.beta_mode != "fixed":
        var.log_beta = np.clip(var.log_beta, np.log(config.beta_min), np.log(config.beta_max))
    if var.clear is not None:
        var.clear = [np.clip(c, 0.0, 1.0) for c in var.clear]
    return OptimState(var, moments, state.iteration + 1)


def _apply(var, name, update):
    if name == "log_depth":
        var.log_depth = var.log_depth - update
    elif name == "log_beta":
        var.log_beta = np.asarray(var.log_beta - update)
    elif name == "rotation":
        var.poses[:, :3] -= update
    elif name == "translation":
        var.poses[:, 3:] -= update
    elif name == "clear":
        var.clear = [c - u for c, u in zip(var.clear, update)]


# ---------------------------------------------------------------------------

@dataclass
class SolveResult:
    depth: np.ndarray          # (1, H, W)
    beta: np.ndarray           # (1, H, W)
    beta_scalar: float         # mean beta
    poses: list                # PoseSE3 target -> source, in source order
    dehazed: list              # one per input frame
    trace: list
    converged: bool
    variables: Variables
    airlight: np.ndarray
    mask: np.ndarray = None

    def write_trace(self, path):
        write_trace(self.trace, path)


TRACE_COLUMNS = ("iteration", "level", "total", "rec", "pe", "smooth", "mr", "adv")


def write_trace(trace, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow([row["iteration"], row["level"]] + [repr(float(row[c])) for c in TRACE_COLUMNS[2:]])


@dataclass
class Init:
    """Optional starting point; unset fields use the documented defaults."""

    depth: np.ndarray = None
    beta: object = None
    poses: list = None
    clear: list = None


def _pyramid(img, levels):
    out = [as_image(img)]
    for _ in range(levels - 1):
        out.append(downsample2(out[-1]))
    return out


def _initial_variables(init, config, shape, n_src):
    h, w = shape
    if init.depth is not None:
        depth = as_image(init.depth, 1)[0]
    else:
        depth = np.full((h, w), np.sqrt(config.d_min * config.d_max))
    log_depth = np.log(np.clip(depth, config.d_min, config.d_max))
    beta0 = config.beta_init if init.beta is None else init.beta
    if config.beta_mode == "fixed":
        log_beta = np.array(0.0)
        fixed = float(np.mean(beta0))
    elif config.beta_mode == "scalar":
        log_beta = np.array(np.log(float(np.mean(beta0))))
        fixed = 0.0
    else:
        b = np.asarray(beta0, dtype=np.float64)
        if b.size == 1:
            log_beta = np.full((config.beta_grid, config.beta_grid), np.log(float(b)))
        else:
            b = as_image(b, 1)[0]
            log_beta = np.log(resize_bilinear(b, config.beta_grid, config.beta_grid))
        fixed = 0.0
    if init.poses is not None:
        poses = np.stack([p.vector() if isinstance(p, PoseSE3) else np.asarray(p, dtype=np.float64)
                          for p in init.poses])
    else:
        poses = np.zeros((n_src, 6))
    return Variables(log_depth, log_beta, poses, None, config.beta_mode, fixed)


def _level_variables(full, level):
    """Restrict full-resolution variables to pyramid ``level``."""
    var = full.copy()
    d = np.exp(full.log_depth)[None]
    for _ in range(level):
        d = downsample2(d)
    var.log_depth = np.log(d[0])
    if var.clear is not None:
        var.clear = [_pyramid(c, level + 1)[-1] for c in var.clear]
    return var


def _thread_limit(config):
    if not config.deterministic:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(1)


def solve(frames, intrinsics, config=None, init=None, airlight=None, reference=None,
          target_index=None, callback=None):
    """Jointly estimate depth, beta and poses from a short hazy clip.

    ``frames`` is a list of ``(3, H, W)`` hazy images (or a
    :class:`~hazesfm.imagecore.FrameSequence`); the target defaults to the
    middle frame and every other frame is a source.
    """
    config = config or OptimConfig()
    init = init or Init()
    if hasattr(frames, "frames"):
        seq = frames
        intrinsics = intrinsics or seq.intrinsics
        order = sorted([seq.target_index] + list(seq.source_indices))
        frames = [seq.frames[i] for i in order]
        target_index = order.index(seq.target_index)
    frames = [as_image(f, 3) for f in frames]
    if len(frames) < 2:
        raise ValueError("solve needs at least two frames")
    ti = len(frames) // 2 if target_index is None else target_index
    src_idx = [i for i in range(len(frames)) if i != ti]
    h, w = frames[ti].shape[1:]
    intrinsics.validate(h, w)
    if airlight is None:
        airlight = estimate_airlight(frames[ti], DarkChannelConfig())
    airlight = np.broadcast_to(np.asarray(airlight, dtype=np.float64), 3).copy()

    levels = config.pyramid_levels
    while levels > 1 and min(h, w) // 2 ** (levels - 1) < 8:
        levels -= 1
    pyr = [_pyramid(f, levels) for f in frames]
    ref_pyr = _pyramid(reference, levels) if reference is not None else None
    Ks = [intrinsics]
    for _ in range(levels - 1):
        Ks.append(Ks[-1].half())

    full = _initial_variables(init, config, (h, w), len(src_idx))
    if config.mode == "free-dehaze":
        if init.clear is not None:
            full.clear = [as_image(c, 3) for c in init.clear]
        else:
            beta0 = beta_map(full, (h, w))[None]
            d0 = np.exp(full.log_depth)[None]
            full.clear = [dehaze_closed_form(frames[i], d0, HazeParams(beta0, airlight), config.t_min)
                          for i in [ti] + src_idx]

    trace = []
    converged = True
    var = _level_variables(full, levels - 1)
    result = None
    with _thread_limit(config):
        for level in range(levels - 1, -1, -1):
            data = LevelData(pyr[ti][level], [pyr[i][level] for i in src_idx], Ks[level], airlight,
                             None if ref_pyr is None else ref_pyr[level])
            var, level_converged, result = _run_level(var, data, config, level, trace, callback)
            converged = converged and level_converged
            if level > 0:
                hf, wf = pyr[ti][level - 1].shape[1:]
                var.log_depth = resize_bilinear(var.log_depth, hf, wf, scale=2.0)
                if var.clear is not None:
                    var.clear = [np.stack([resize_bilinear(c[ch], hf, wf, scale=2.0) for ch in range(3)])
                                 for c in var.clear]

    depth = np.exp(var.log_depth)[None]
    beta = beta_map(var, (h, w))[None]
    if var.clear is not None:
        dehazed = [None] * len(frames)
        for j, i in enumerate([ti] + src_idx):
            dehazed[i] = var.clear[j]
    else:
        params = HazeParams(beta, airlight)
        dehazed = [dehaze_closed_form(f, depth, params, config.t_min) for f in frames]
    poses = [var.pose(i) for i in range(len(src_idx))]
    return SolveResult(depth, beta, float(beta.mean()), poses, dehazed, trace, converged, var, airlight,
                       None if result is None else result.mask[None])


def _run_level(var, data, config, level, trace, callback):
    state = OptimState(var)
    n = config.max_iterations
    decay = config.lr_final_fraction ** (1.0 / max(n - 1, 1))
    history = []
    increases = 0
    result = None
    prev = None
    for it in range(n):
        try:
            result = objective(state.variables, data, config.weights, config.mode, config.objective_t_min,
                               threads=config.threads)
        except NumericalError as e:
            raise NumericalError(str(e), trace) from e
        total = result.total
        row = {"iteration": len(trace), "level": level, "total": total, **result.terms}
        trace.append(row)
        if callback is not None:
            callback(row, state)
        if prev is not None and total > prev:
            increases += 1
            if increases >= config.divergence_patience:
                raise NumericalError(
                    f"objective increased for {increases} consecutive iterations at level {level}", trace)
        else:
            increases = 0
        prev = total
        history.append(min(total, history[-1]) if history else total)
        k = config.tolerance_window
        if len(history) > k and it >= config.pose_warmup + k:
            # best value so far against the best value one window ago
            old = history[-k - 1]
            if (old - history[-1]) <= config.tolerance * abs(old):
                log.info("level %d converged after %d iterations", level, it + 1)
                return state.variables, True, result
        for name, g in result.grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for {name}", trace)
        grads = result.grads
        if it < config.pose_warmup:
            grads = {k: g for k, g in grads.items() if k not in ("rotation", "translation")}
        state = step(state, grads, config, lr_scale=decay ** it)
        if not np.all(np.isfinite(state.variables.log_depth)):
            raise NumericalError("non-finite state", trace)
    return state.variables, False, result


def perturbed_init(depth, beta, poses, seed, depth_noise=0.10, pose_noise_deg=0.5, beta_factor=2.0):
    """Ground truth corrupted the way the recovery benchmarks expect.

    Depth gets i.i.d. multiplicative noise of ``depth_noise`` relative std,
    each pose rotation is composed with a ``pose_noise_deg`` rotation about a
    random axis and its translation direction is tilted by the same angle,
    and beta is scaled by ``beta_factor``.
    """
    from .geometry import rotation_matrix, rotation_log

    rng = np.random.default_rng(seed)
    depth = as_image(depth, 1)
    noisy = depth * np.clip(1.0 + depth_noise * rng.standard_normal(depth.shape), 0.5, 1.5)
    ang = np.deg2rad(pose_noise_deg)
    out = []
    for p in poses:
        p = p if isinstance(p, PoseSE3) else PoseSE3.from_vector(p)
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        R = rotation_matrix(axis * ang) @ rotation_matrix(np.asarray(p.rotation))
        t = np.asarray(p.translation, dtype=np.float64)
        n = np.linalg.norm(t)
        if n > 0:
            perp = np.cross(t, rng.standard_normal(3))
            perp /= np.linalg.norm(perp)
            t = rotation_matrix(perp * ang) @ t
        out.append(PoseSE3(tuple(rotation_log(R)), tuple(t)))
    return Init(depth=noisy, beta=np.asarray(beta, dtype=np.float64) * beta_factor, poses=out)
