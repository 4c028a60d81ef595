"""End-to-end acceptance checks.

The recovery criteria drive the installed command line (synth, optimize) on
generated bundles and score the written artifacts.  Each optimisation is run
once per thread count and cached, so the determinism check reuses them.
Expect about 25 minutes on one core.
"""

import hashlib
import json
import os
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from hazesfm.asm import HazeParams, dark_channel, dehaze_closed_form, synthesize_haze, transmission
from hazesfm.cli import main
from hazesfm.geometry import bilinear_sample
from hazesfm.gradcheck import gradcheck
from hazesfm.imagecore import read_pfm, write_pfm
from hazesfm.losses import auto_mask
from hazesfm.metrics import DepthEvalConfig, depth_metrics
from hazesfm.optimizer import perturbed_init
from hazesfm.scenegen import load_bundle, load_poses
from hazesfm.wavelet import haar_pool, haar_unpool

pytestmark = pytest.mark.acceptance

T_MIN = 0.1
RECOVERY = {"weights": {"xi": 0.05, "alpha": 0.15}, "pyramid_levels": 1, "max_iterations": 1500}
RECOVERY_SEEDS = (0, 1, 2, 3, 4)
CLEAR_SEEDS = (0, 1, 2)
BETA_AMPLITUDE = 0.5


# ---------------------------------------------------------------------------
# criteria 1-4: cheap numerical properties

def _asm_round_trip():
    rng = np.random.default_rng(100)
    worst, out = 0.0, []
    for _ in range(100):
        clear = rng.random((3, 64, 64))
        depth = rng.uniform(0.5, 60.0, (1, 64, 64))
        beta = rng.uniform(0.01, 0.1) if rng.random() < 0.5 else rng.uniform(0.01, 0.1, (1, 64, 64))
        params = HazeParams(beta, rng.uniform(0.6, 1.0, 3))
        back = dehaze_closed_form(synthesize_haze(clear, depth, params), depth, params, T_MIN)
        live = np.broadcast_to(transmission(depth, params.beta) >= T_MIN, clear.shape)
        worst = max(worst, float(np.abs(back - clear)[live].max()))
        out.append(back)
    return worst, out


def _haar_round_trip():
    rng = np.random.default_rng(200)
    rec, energy, out = 0.0, 0.0, []
    for _ in range(100):
        img = rng.normal(size=(3, 64, 64))
        bands = haar_pool(img)
        back = haar_unpool(bands)
        e_in = np.sum(img ** 2)
        e_out = sum(np.sum(b ** 2) for b in (bands.ll, bands.lh, bands.hl, bands.hh))
        rec = max(rec, float(np.abs(back - img).max()))
        energy = max(energy, float(abs(e_out - e_in) / e_in))
        out += [bands.ll, bands.high(), back]
    return rec, energy, out


def _gradient_suite():
    return [gradcheck("all", seed) for seed in range(5)]


def _brute_ssim_map(a, b):
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    ch, h, w = a.shape
    out = np.zeros((ch, h, w))
    for k in range(ch):
        for y in range(h):
            for x in range(w):
                win = [(min(max(y + dy, 0), h - 1), min(max(x + dx, 0), w - 1))
                       for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
                pa = np.array([a[k, i, j] for i, j in win])
                pb = np.array([b[k, i, j] for i, j in win])
                mx, my = pa.mean(), pb.mean()
                cov = ((pa - mx) * (pb - my)).mean()
                out[k, y, x] = ((2 * mx * my + c1) * (2 * cov + c2)
                                / ((mx ** 2 + my ** 2 + c1) * (pa.var() + pb.var() + c2)))
    return out.mean(axis=0)


def _brute_pe(p, t, alpha):
    return alpha / 2 * (1 - _brute_ssim_map(p, t)) + (1 - alpha) * np.abs(p - t).mean(axis=0)


def _brute_auto_mask(target, warped, sources, alpha, valid):
    pw = [_brute_pe(x, target, alpha) for x in warped]
    pi = [_brute_pe(s, target, alpha) for s in sources]
    _, h, w = target.shape
    out = np.zeros((1, h, w))
    for y in range(h):
        for x in range(w):
            best_warp = min(e[y, x] if v[0, y, x] > 0 else np.inf for e, v in zip(pw, valid))
            best_id = min(e[y, x] for e in pi)
            out[0, y, x] = 1.0 if best_warp < best_id else 0.0
    return out


def _brute_dark_channel(img, window):
    _, h, w = img.shape
    r = window // 2
    out = np.empty((1, h, w))
    for y in range(h):
        for x in range(w):
            out[0, y, x] = min(img[c, min(max(i, 0), h - 1), min(max(j, 0), w - 1)]
                               for c in range(3) for i in range(y - r, y + r + 1) for j in range(x - r, x + r + 1))
    return out


def _brute_bilinear(src, x, y):
    _, h, w = src.shape
    xc, yc = min(max(x, 0.0), w - 1.0), min(max(y, 0.0), h - 1.0)
    x0, y0 = int(np.floor(xc)), int(np.floor(yc))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = xc - x0, yc - y0
    val = ((1 - fx) * (1 - fy) * src[:, y0, x0] + fx * (1 - fy) * src[:, y0, x1]
           + (1 - fx) * fy * src[:, y1, x0] + fx * fy * src[:, y1, x1])
    return val, (0 <= x <= w - 1) and (0 <= y <= h - 1)


def _brute_depth_metrics(pred, gt, scaling):
    g = [v for v in gt.ravel().tolist() if 1e-3 <= v <= 1e3]
    p = [pv for pv, gv in zip(pred.ravel().tolist(), gt.ravel().tolist()) if 1e-3 <= gv <= 1e3]
    if scaling:
        s = float(np.median(g)) / float(np.median(p))
        p = [v * s for v in p]
    p = [min(max(v, 1e-3), 1e3) for v in p]
    ratios = [max(a / b, b / a) for a, b in zip(g, p)]
    n = len(g)
    return {
        "abs_rel": sum(abs(a - b) / a for a, b in zip(g, p)) / n,
        "rmse_log": float(np.sqrt(sum((np.log(a) - np.log(b)) ** 2 for a, b in zip(g, p)) / n)),
        "delta1": sum(r < 1.25 for r in ratios) / n,
        "delta2": sum(r < 1.25 ** 2 for r in ratios) / n,
        "delta3": sum(r < 1.25 ** 3 for r in ratios) / n,
    }


def _oracles():
    rng = np.random.default_rng(400)
    mismatches = {"auto_mask": 0, "dark_channel": 0, "bilinear": 0, "depth_metrics": 0}
    bilinear_err = 0.0
    out = []
    for _ in range(50):
        h, w = int(rng.integers(3, 8)), int(rng.integers(3, 8))
        target = rng.random((3, h, w))
        sources = [rng.random((3, h, w)) for _ in range(2)]
        # a mix of good matches, exact ties with the unwarped source, and noise
        pick = rng.integers(0, 3, (1, h, w))
        warped = [np.where(pick == 0, target + 0.02 * rng.normal(size=(3, h, w)),
                           np.where(pick == 1, s, rng.random((3, h, w))))
                  for s in sources]
        valid = [(rng.random((1, h, w)) < 0.8).astype(np.float64) for _ in sources]
        alpha = float(rng.choice([0.15, 0.85]))
        got = auto_mask(target, warped, sources, alpha, valid)
        mismatches["auto_mask"] += int(not np.array_equal(got, _brute_auto_mask(target, warped, sources, alpha, valid)))
        out.append(got)

        window = int(rng.choice([1, 3, 5, 7]))
        dc = dark_channel(target, window)
        mismatches["dark_channel"] += int(not np.array_equal(dc, _brute_dark_channel(target, window)))
        out.append(dc)

        coords = np.stack([rng.uniform(-1.5, w + 0.5, (4, 5)), rng.uniform(-1.5, h + 0.5, (4, 5))])
        coords[:, 0, 0] = (w - 1, h - 1)
        res = bilinear_sample(target, coords)
        for i in range(4):
            for j in range(5):
                val, inside = _brute_bilinear(target, coords[0, i, j], coords[1, i, j])
                bilinear_err = max(bilinear_err, float(np.abs(res.warped[:, i, j] - val).max()))
                mismatches["bilinear"] += int(res.valid_mask[0, i, j] != float(inside))
        out.append(res.warped)

        gt = rng.uniform(0.5, 80.0, (h, w))
        gt[rng.random((h, w)) < 0.3] = 0.0
        gt[0, 0] = 10.0
        pred = gt * rng.uniform(0.6, 1.6, (h, w)) + 0.05
        scaling = bool(rng.integers(2))
        m = depth_metrics(pred, gt, DepthEvalConfig(median_scaling=scaling))
        ref = _brute_depth_metrics(pred, gt, scaling)
        same = all(m[k] == ref[k] for k in ("delta1", "delta2", "delta3"))
        same &= all(np.isclose(m[k], ref[k], rtol=1e-12, atol=0) for k in ("abs_rel", "rmse_log"))
        mismatches["depth_metrics"] += int(not same)
        out.append(np.array([m[k] for k in sorted(m)]))
    return mismatches, bilinear_err, out


def _digest(arrays):
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()


def test_criterion_1_asm_round_trip(criterion):
    with criterion(1, "ASM round trip") as d:
        t0 = time.perf_counter()
        worst, _ = _asm_round_trip()
        d["max_abs_err"], d["seconds"] = worst, time.perf_counter() - t0
        assert worst <= 1e-6
        assert d["seconds"] < 5.0


def test_criterion_2_haar_reconstruction_and_energy(criterion):
    with criterion(2, "Haar reconstruction and energy") as d:
        rec, energy, _ = _haar_round_trip()
        d["max_abs_err"], d["energy_rel_err"] = rec, energy
        assert rec <= 1e-6
        assert energy <= 1e-5


def test_criterion_3_gradient_suite(criterion):
    with criterion(3, "gradient suite, seeds 0-4") as d:
        t0 = time.perf_counter()
        reports = _gradient_suite()
        d["seconds"] = time.perf_counter() - t0
        d["worst"] = max((e.max_rel_error / e.tolerance, e.component, e.path)
                         for r in reports for e in r.entries)[1:]
        failures = [(r.seed, e.component, e.path, e.max_rel_error) for r in reports for e in r.failures()]
        d["failures"] = len(failures)
        assert not failures, failures
        assert {e.component for e in reports[0].entries} == {"asm", "warp", "ssim", "photometric",
                                                              "smoothness", "objective"}
        assert d["seconds"] < 60.0


def test_criterion_4_oracle_equivalence(criterion):
    with criterion(4, "oracle equivalence, 50 instances") as d:
        mismatches, bil, _ = _oracles()
        d.update(mismatches)
        d["bilinear_max_err"] = bil
        assert all(v == 0 for v in mismatches.values()), mismatches
        assert bil <= 1e-7


# ---------------------------------------------------------------------------
# criteria 5-7: recovery through the command line

class Runs:
    """Synthesises bundles and runs ``optimize`` on them, once per key."""

    def __init__(self, root):
        self.root = root
        self.bundles = {}
        self.results = {}

    def bundle(self, kind, seed):
        key = (kind, seed)
        if key not in self.bundles:
            path = os.path.join(self.root, "bundles", f"{kind}-{seed}")
            args = ["synth", "--seed", str(seed), "--out", path]
            if kind == "field":
                args += ["--beta-amplitude", str(BETA_AMPLITUDE)]
            elif kind == "clear":
                args += ["--beta", "0"]
            elif kind == "static":
                args += ["--static"]
            assert main(args) == 0
            self.bundles[key] = path
        return self.bundles[key]

    def _config(self, kind):
        cfg = dict(RECOVERY)
        if kind == "field":
            cfg["beta_mode"] = "field"
        elif kind == "clear":
            cfg["beta_mode"] = "fixed"
        elif kind == "static":
            cfg["max_iterations"] = 200
        return cfg

    def _write_init(self, path, seed, kind):
        b = load_bundle(path)
        ti = b.target_index
        gt_beta = float(b.beta.mean())
        init = perturbed_init(b.depth[ti], gt_beta, [b.poses[i] for i in b.source_indices], seed)
        init_dir = os.path.join(path, "init")
        os.makedirs(init_dir, exist_ok=True)
        write_pfm(init.depth, os.path.join(init_dir, "depth.pfm"))
        with open(os.path.join(init_dir, "poses.json"), "w") as f:
            json.dump({"poses": [p.to_dict() for p in init.poses]}, f)
        with open(os.path.join(init_dir, "config.json"), "w") as f:
            json.dump(self._config(kind), f)
        return init_dir, float(init.beta)

    def optimize(self, kind, seed, threads=1):
        key = (kind, seed, threads)
        if key not in self.results:
            path = self.bundle(kind, seed)
            init_dir, beta0 = self._write_init(path, seed, kind)
            out = os.path.join(self.root, "runs", f"{kind}-{seed}-t{threads}")
            t0 = time.perf_counter()
            code = main(["optimize", "--frames", path, "--out", out, "--deterministic",
                         "--threads", str(threads), "--config", os.path.join(init_dir, "config.json"),
                         "--airlight", os.path.join(path, "airlight.json"),
                         "--init-depth", os.path.join(init_dir, "depth.pfm"),
                         "--init-poses", os.path.join(init_dir, "poses.json"),
                         "--init-beta", repr(beta0)])
            assert code == 0
            self.results[key] = (out, time.perf_counter() - t0)
        return self.results[key]


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    return Runs(str(tmp_path_factory.mktemp("acceptance")))


def _angle_deg(a, b):
    a, b = np.asarray(a), np.asarray(b)
    c = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def _score(runs, kind, seed):
    out, seconds = runs.optimize(kind, seed)
    path = runs.bundle(kind, seed)
    b = load_bundle(path)
    ti = b.target_index
    gt_depth = b.depth[ti]
    depth = read_pfm(os.path.join(out, "depth.pfm"))
    beta = read_pfm(os.path.join(out, "beta.pfm"))
    poses, _ = load_poses(os.path.join(out, "poses.json"))
    m = depth_metrics(depth, gt_depth)
    # the solver only sees beta * depth, so beta is compared in the GT scale
    beta_aligned = float(beta.mean()) * np.median(depth) / np.median(gt_depth)
    gt_beta = float(b.beta.mean())
    return {
        "abs_rel": m["abs_rel"],
        "delta1": m["delta1"],
        "tdir": max((_angle_deg(poses[i].translation, b.poses[i].translation) for i in b.source_indices
                     if np.linalg.norm(b.poses[i].translation) > 0), default=np.nan),
        "beta_rel": abs(beta_aligned / gt_beta - 1.0) if gt_beta > 0 else 0.0,
        "beta_r": float(np.corrcoef(beta.ravel(), b.beta.ravel())[0, 1]) if np.ptp(b.beta) > 0 else np.nan,
        "seconds": seconds,
        "mask": read_pfm(os.path.join(out, "mask.pfm")),
    }


def test_criterion_5_synthetic_recovery(runs, criterion):
    with criterion(5, "synthetic recovery, scalar beta") as d:
        scores = [_score(runs, "const", s) for s in RECOVERY_SEEDS]
        d["max_abs_rel"] = max(s["abs_rel"] for s in scores)
        d["min_delta1"] = min(s["delta1"] for s in scores)
        d["max_tdir_deg"] = max(s["tdir"] for s in scores)
        d["max_beta_rel"] = max(s["beta_rel"] for s in scores)
        d["max_seconds"] = max(s["seconds"] for s in scores)
        assert d["max_abs_rel"] <= 0.05
        assert d["min_delta1"] >= 0.95
        assert d["max_tdir_deg"] <= 2.0
        assert d["max_beta_rel"] <= 0.10
        assert d["max_seconds"] <= 300.0


def test_criterion_6_non_uniform_beta(runs, criterion):
    with criterion(6, "recovery, smooth beta field") as d:
        scores = [_score(runs, "field", s) for s in RECOVERY_SEEDS]
        d["min_pearson_r"] = min(s["beta_r"] for s in scores)
        d["max_abs_rel"] = max(s["abs_rel"] for s in scores)
        assert d["min_pearson_r"] >= 0.8
        assert d["max_abs_rel"] <= 0.08


def test_criterion_7_degenerate_cases(runs, criterion):
    with criterion(7, "beta=0 depth and static auto-mask") as d:
        scores = [_score(runs, "clear", s) for s in CLEAR_SEEDS]
        d["max_abs_rel"] = max(s["abs_rel"] for s in scores)
        d["min_delta1"] = min(s["delta1"] for s in scores)
        static = _score(runs, "static", 0)
        d["static_mask_density"] = float(static["mask"].mean())
        assert d["max_abs_rel"] <= 0.05
        assert d["min_delta1"] >= 0.95
        assert d["static_mask_density"] <= 0.05


# ---------------------------------------------------------------------------
# criterion 8: reruns at a different thread count

def _tree_bytes(root):
    files = {}
    for dirpath, _, names in os.walk(root):
        for name in names:
            if name == "manifest.json":
                continue  # records wall-clock duration
            p = os.path.join(dirpath, name)
            with open(p, "rb") as f:
                files[os.path.relpath(p, root)] = f.read()
    return files


def test_criterion_8_determinism_across_threads(runs, criterion, tmp_path):
    with criterion(8, "byte-identical artifacts at 1 and 4 threads") as d:
        differing = []
        with threadpool_limits(1):
            cheap_1 = [_digest(_asm_round_trip()[1]), _digest(_haar_round_trip()[2]), _digest(_oracles()[2])]
        with threadpool_limits(4):
            cheap_4 = [_digest(_asm_round_trip()[1]), _digest(_haar_round_trip()[2]), _digest(_oracles()[2])]
        differing += [f"criterion {n}" for n, a, b in zip((1, 2, 4), cheap_1, cheap_4) if a != b]

        for threads in (1, 4):
            code = main(["gradcheck", "--seed", "0", "1", "2", "3", "4", "--deterministic",
                         "--threads", str(threads), "--json", str(tmp_path / f"g{threads}.json")])
            assert code == 0
        if (tmp_path / "g1.json").read_bytes() != (tmp_path / "g4.json").read_bytes():
            differing.append("gradcheck")

        keys = ([("const", s) for s in RECOVERY_SEEDS] + [("field", s) for s in RECOVERY_SEEDS]
                + [("clear", s) for s in CLEAR_SEEDS] + [("static", 0)])
        compared = 0
        for kind, seed in keys:
            a = _tree_bytes(runs.optimize(kind, seed, 1)[0])
            b = _tree_bytes(runs.optimize(kind, seed, 4)[0])
            compared += len(a)
            if a != b:
                differing.append(f"{kind}-{seed}")
        d["files_compared"] = compared
        d["differing"] = len(differing)
        assert not differing, differing
