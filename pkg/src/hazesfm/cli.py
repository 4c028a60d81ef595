"""Command-line entry point: ``hazesfm <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 invalid input, 3 numerical failure.
Every subcommand writes a JSON run manifest when it finishes.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .asm import HazeParams, dehaze_closed_form
from .geometry import CameraIntrinsics, PoseSE3
from .gradcheck import COMPONENTS, gradcheck
from .imagecore import ImageFormatError, read_pfm, read_ppm, write_pfm, write_ppm
from .metrics import DEPTH_METRICS, DepthEvalConfig, depth_metrics, psnr, ssim_mean, write_metrics_csv
from .objective import NumericalError
from .optimizer import Init, OptimConfig, solve, write_trace
from .scenegen import SceneRejected, SceneSpec, generate, random_scene_spec, write_bundle
from .wavelet import haar_pool, mfir_input

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3


class InputError(Exception):
    pass


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


@dataclass
class RunManifest:
    subcommand: str
    config: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    seed: int = None
    version: str = __version__
    duration_s: float = 0.0
    status: str = "ok"

    def write(self, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        tmp = f"{path}.tmp{os.getpid()}"
        with open(tmp, "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, path)


# ---------------------------------------------------------------------------
# file helpers

def _read_image(path):
    return read_pfm(path) if path.lower().endswith(".pfm") else read_ppm(path)


def _image_files(path):
    """Image files of a directory keyed by stem; PFM wins over PPM."""
    if os.path.isfile(path):
        return {os.path.splitext(os.path.basename(path))[0]: path}
    if not os.path.isdir(path):
        raise InputError(f"no such file or directory: {path}")
    files = {}
    for name in sorted(os.listdir(path)):
        stem, ext = os.path.splitext(name)
        if ext.lower() == ".pfm" or (ext.lower() == ".ppm" and stem not in files):
            files[stem] = os.path.join(path, name)
    if not files:
        raise InputError(f"no .pfm or .ppm images in {path}")
    return files


def _pairs(pred, gt):
    p, g = _image_files(pred), _image_files(gt)
    if len(p) == 1 and len(g) == 1:
        return [(next(iter(g)), next(iter(p.values())), next(iter(g.values())))]
    common = sorted(set(p) & set(g))
    if not common:
        raise InputError(f"no matching file names between {pred} and {gt}")
    return [(k, p[k], g[k]) for k in common]


def _load_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise InputError(f"no such file: {path}") from None
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: invalid JSON ({e})") from None


def _write_json(obj, path):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2)
        f.write("\n")


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args, man):
    if args.scene:
        spec = SceneSpec.from_dict(_load_json(args.scene))
    else:
        spec = random_scene_spec(args.seed, beta=args.beta, beta_amplitude=args.beta_amplitude,
                                 static=args.static)
    man.inputs = {"scene": args.scene}
    man.config = spec.to_dict()
    man.seed = spec.seed
    bundle = generate(spec)
    write_bundle(bundle, args.out)
    man.outputs = {"bundle": args.out}
    print(f"wrote {len(bundle.clear)} frames to {args.out}")


def _frames_dir(path):
    hazy = os.path.join(path, "hazy")
    return hazy if os.path.isdir(hazy) else path


def cmd_optimize(args, man):
    cfg = _load_json(args.config) if args.config else {}
    cfg["threads"] = args.threads
    cfg["deterministic"] = bool(args.deterministic or cfg.get("deterministic", False))
    if args.max_iterations is not None:
        cfg["max_iterations"] = args.max_iterations
    config = OptimConfig.from_dict(cfg)

    files = _image_files(_frames_dir(args.frames))
    names = sorted(files)
    if len(names) < 2:
        raise InputError("optimize needs at least two frames")
    intr_path = args.intrinsics or os.path.join(args.frames, "intrinsics.json")
    if not os.path.isfile(intr_path):
        raise _UsageError(f"missing intrinsics: expected {intr_path} or --intrinsics")
    intrinsics = CameraIntrinsics.from_dict(_load_json(intr_path))
    frames = [_read_image(files[n]) for n in names]
    ti = len(frames) // 2 if args.target is None else args.target
    airlight = np.asarray(_load_json(args.airlight), dtype=np.float64) if args.airlight else None
    reference = _read_image(args.ref) if args.ref else None

    init = Init()
    if args.init_depth:
        init.depth = read_pfm(args.init_depth, depth=True)
    if args.init_beta is not None:
        init.beta = args.init_beta
    if args.init_poses:
        data = _load_json(args.init_poses)
        poses = [PoseSE3.from_dict(p) for p in data["poses"]]
        if len(poses) == len(frames):
            poses = [p for k, p in enumerate(poses) if k != ti]
        init.poses = poses

    man.config = config.to_dict()
    man.seed = config.seed
    man.inputs = {"frames": [files[n] for n in names], "intrinsics": intr_path, "airlight": args.airlight,
                  "ref": args.ref, "init_depth": args.init_depth, "init_poses": args.init_poses}
    os.makedirs(args.out, exist_ok=True)
    trace_path = os.path.join(args.out, "trace.csv")
    try:
        res = solve(frames, intrinsics, config, init, airlight, reference, target_index=ti)
    except NumericalError as e:
        write_trace(e.trace or [], trace_path)
        man.outputs = {"trace": trace_path}
        raise

    write_pfm(res.depth, os.path.join(args.out, "depth.pfm"))
    write_pfm(res.beta, os.path.join(args.out, "beta.pfm"))
    if res.mask is not None:
        write_pfm(res.mask, os.path.join(args.out, "mask.pfm"))
    src = [k for k in range(len(frames)) if k != ti]
    poses = [PoseSE3()] * len(frames)
    for j, k in enumerate(src):
        poses[k] = res.poses[j]
    _write_json({"target_index": ti, "poses": [dict(frame=k, **p.to_dict()) for k, p in enumerate(poses)]},
                os.path.join(args.out, "poses.json"))
    _write_json([float(a) for a in res.airlight], os.path.join(args.out, "airlight.json"))
    ddir = os.path.join(args.out, "dehazed")
    os.makedirs(ddir, exist_ok=True)
    for k, img in enumerate(res.dehazed):
        write_ppm(img, os.path.join(ddir, f"{k:03d}.ppm"))
    write_trace(res.trace, trace_path)
    man.outputs = {"dir": args.out, "iterations": len(res.trace), "converged": res.converged,
                   "beta_mean": res.beta_scalar}
    print(f"{len(res.trace)} iterations, final objective {res.trace[-1]['total']:.6g}, "
          f"mean beta {res.beta_scalar:.5g}")


def cmd_dehaze(args, man):
    hazy = _image_files(args.hazy)
    depth = _image_files(args.depth)
    beta = read_pfm(args.beta)
    airlight = np.asarray(_load_json(args.airlight), dtype=np.float64)
    params = HazeParams(beta, airlight)
    os.makedirs(args.out, exist_ok=True)
    single_depth = len(depth) == 1
    written = []
    for name, path in sorted(hazy.items()):
        dpath = next(iter(depth.values())) if single_depth else depth.get(name)
        if dpath is None:
            raise InputError(f"no depth map for frame {name}")
        out = dehaze_closed_form(_read_image(path), read_pfm(dpath, depth=True), params, args.t_min)
        write_pfm(out, os.path.join(args.out, name + ".pfm"))
        write_ppm(out, os.path.join(args.out, name + ".ppm"))
        written.append(name)
    man.inputs = {"hazy": args.hazy, "depth": args.depth, "beta": args.beta, "airlight": args.airlight}
    man.config = {"t_min": args.t_min}
    man.outputs = {"dir": args.out, "frames": written}
    print(f"dehazed {len(written)} frames into {args.out}")


def cmd_eval_depth(args, man):
    cfg = DepthEvalConfig(args.min_eval, args.max_eval, not args.no_median_scaling)
    rows = [(name, depth_metrics(read_pfm(p, depth=True), read_pfm(g, depth=True), cfg))
            for name, p, g in _pairs(args.pred, args.gt)]
    write_metrics_csv(args.csv, rows, DEPTH_METRICS)
    man.inputs = {"pred": args.pred, "gt": args.gt}
    man.config = asdict(cfg)
    man.outputs = {"csv": args.csv}
    for name, vals in rows:
        print(name, " ".join(f"{c}={vals[c]:.4f}" for c in DEPTH_METRICS))


def cmd_eval_image(args, man):
    rows = []
    for name, p, g in _pairs(args.pred, args.gt):
        a, b = _read_image(p), _read_image(g)
        rows.append((name, {"psnr": psnr(a, b), "ssim": ssim_mean(a, b)}))
    write_metrics_csv(args.csv, rows, ("psnr", "ssim"))
    man.inputs = {"pred": args.pred, "gt": args.gt}
    man.outputs = {"csv": args.csv}
    for name, vals in rows:
        print(f"{name} psnr={vals['psnr']:.3f} ssim={vals['ssim']:.4f}")


def cmd_gradcheck(args, man):
    reports = [gradcheck(args.component, s, tuple(args.size)) for s in args.seed]
    for rep in reports:
        for e in rep.entries:
            flag = "ok  " if e.passed else "FAIL"
            print(f"{flag} seed={rep.seed} {e.component}:{e.path} rel_err={e.max_rel_error:.2e} "
                  f"tol={e.tolerance:.0e}")
    ok = all(r.passed for r in reports)
    man.config = {"component": args.component, "size": list(args.size)}
    man.seed = args.seed[0]
    man.outputs = {"passed": ok, "reports": [r.to_dict() for r in reports]}
    if args.json:
        _write_json(man.outputs, args.json)
    if not ok:
        raise NumericalError("gradient check failed")


def cmd_wavelet(args, man):
    img = _read_image(args.input)
    bands = haar_pool(img)
    os.makedirs(args.out, exist_ok=True)
    for name in ("ll", "lh", "hl", "hh"):
        write_pfm(getattr(bands, name), os.path.join(args.out, name + ".pfm"))
    np.save(os.path.join(args.out, "mfir.npy"), mfir_input(img))
    man.inputs = {"in": args.input}
    man.outputs = {"dir": args.out, "bands": ["ll", "lh", "hl", "hh"], "mfir": "mfir.npy"}
    print(f"wrote bands and a {mfir_input(img).shape[0]}-channel stack to {args.out}")


# ---------------------------------------------------------------------------

def _default_threads():
    env = os.environ.get("HAZESFM_THREADS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=_default_threads(),
                        help="worker threads (default: $HAZESFM_THREADS or 1)")
    common.add_argument("--deterministic", action="store_true",
                        help="fixed-order reductions and single-threaded BLAS")
    common.add_argument("--manifest", help="manifest path (default: inside the output location)")

    p = _Parser(prog="hazesfm", description="Joint depth, haze and pose estimation from hazy clips.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic hazy sequence")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--scene", help="scene spec JSON")
    g.add_argument("--seed", type=int, help="draw a random scene with this seed")
    s.add_argument("--beta", type=float, help="scattering coefficient for --seed scenes")
    s.add_argument("--beta-amplitude", type=float, default=0.0, help="non-uniform beta amplitude")
    s.add_argument("--static", action="store_true", help="identity trajectory")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("optimize", parents=[common], help="estimate depth, beta and poses")
    s.add_argument("--frames", required=True, help="frame directory or synth bundle")
    s.add_argument("--config", help="optimizer config JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--ref", help="clear reference image for the misaligned reference term")
    s.add_argument("--intrinsics", help="intrinsics JSON (default: FRAMES/intrinsics.json)")
    s.add_argument("--airlight", help="airlight JSON (default: dark channel estimate)")
    s.add_argument("--target", type=int, help="target frame index (default: middle)")
    s.add_argument("--init-depth", help="initial depth PFM")
    s.add_argument("--init-beta", type=float, help="initial beta")
    s.add_argument("--init-poses", help="initial poses JSON")
    s.add_argument("--max-iterations", type=int, help="overrides the config value")
    s.set_defaults(func=cmd_optimize)

    s = sub.add_parser("dehaze", parents=[common], help="closed-form dehazing with known depth and beta")
    s.add_argument("--hazy", required=True)
    s.add_argument("--depth", required=True)
    s.add_argument("--beta", required=True)
    s.add_argument("--airlight", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--t-min", type=float, default=0.1)
    s.set_defaults(func=cmd_dehaze)

    s = sub.add_parser("eval-depth", parents=[common], help="depth metrics against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--csv", required=True)
    s.add_argument("--no-median-scaling", action="store_true")
    s.add_argument("--min-eval", type=float, default=1e-3)
    s.add_argument("--max-eval", type=float, default=1e3)
    s.set_defaults(func=cmd_eval_depth)

    s = sub.add_parser("eval-image", parents=[common], help="PSNR and SSIM against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--csv", required=True)
    s.set_defaults(func=cmd_eval_image)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    s.add_argument("--component", default="all", choices=("all",) + COMPONENTS)
    s.add_argument("--seed", type=int, nargs="+", default=[0])
    s.add_argument("--size", type=int, nargs=2, default=[8, 8], metavar=("H", "W"))
    s.add_argument("--json", help="write the report here")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("wavelet", parents=[common], help="Haar bands and the 12-channel stack")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_wavelet)
    return p


def _manifest_path(args):
    if args.manifest:
        return args.manifest
    out = getattr(args, "out", None)
    if out:
        return os.path.join(out, "manifest.json")
    target = getattr(args, "csv", None) or getattr(args, "json", None)
    if target:
        return os.path.splitext(target)[0] + ".manifest.json"
    return None


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("hazesfm: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    man = RunManifest(args.command)
    t0 = time.perf_counter()
    code = EXIT_OK
    try:
        args.func(args, man)
    except _UsageError as e:
        print(f"hazesfm {args.command}: {e}", file=sys.stderr)
        man.status, code = "usage error", EXIT_USAGE
    except (InputError, SceneRejected, ImageFormatError, ValueError, KeyError) as e:
        print(f"hazesfm {args.command}: invalid input: {e}", file=sys.stderr)
        man.status, code = "invalid input", EXIT_INPUT
    except (NumericalError, FloatingPointError) as e:
        print(f"hazesfm {args.command}: numerical failure: {e}", file=sys.stderr)
        man.status, code = "numerical failure", EXIT_NUMERIC
    man.duration_s = time.perf_counter() - t0
    path = _manifest_path(args)
    if path is not None:
        man.write(path)
    return code


if __name__ == "__main__":
    sys.exit(main())
