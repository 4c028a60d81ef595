import csv

import numpy as np
import pytest

from hazesfm.geometry import PoseSE3, rotation_log, rotation_matrix
from hazesfm.objective import NumericalError, Variables
from hazesfm.optimizer import (TRACE_COLUMNS, OptimConfig, OptimState, perturbed_init, solve, step,
                               write_trace)
from hazesfm.scenegen import generate, random_scene_spec


def reference_adam(x, grads, lr, b1=0.9, b2=0.99, eps=1e-8):
    m = v = 0.0
    for k, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** k)) / (np.sqrt(v / (1 - b2 ** k)) + eps)
    return x


def _vars():
    return Variables(np.zeros((2, 2)), np.array(np.log(0.05)), np.zeros((1, 6)))


def test_step_matches_reference_adam():
    cfg = OptimConfig(learning_rates={"log_depth": 0.01}, d_min=1e-3, d_max=1e3)
    rng = np.random.default_rng(0)
    grads = [rng.normal(size=(2, 2)) for _ in range(5)]
    state = OptimState(_vars())
    for g in grads:
        state = step(state, {"log_depth": g}, cfg)
    assert np.allclose(state.variables.log_depth, reference_adam(np.zeros((2, 2)), grads, 0.01))


def test_late_block_gets_its_own_bias_correction():
    cfg = OptimConfig()
    state = OptimState(_vars())
    for _ in range(10):
        state = step(state, {"log_depth": np.ones((2, 2))}, cfg)
    before = state.variables.poses.copy()
    state = step(state, {"translation": np.ones((1, 3))}, cfg)
    # first step of a fresh block moves by the full learning rate
    assert np.allclose(before[:, 3:] - state.variables.poses[:, 3:], cfg.learning_rates["translation"])
    assert state.moments["translation"][2] == 1 and state.moments["log_depth"][2] == 10


def test_step_projects_onto_box():
    cfg = OptimConfig(learning_rates={"log_depth": 100.0, "log_beta": 100.0})
    state = step(OptimState(_vars()), {"log_depth": np.ones((2, 2)), "log_beta": np.array(-1.0)}, cfg)
    assert np.allclose(state.variables.log_depth, np.log(cfg.d_min))
    assert np.isclose(state.variables.log_beta, np.log(cfg.beta_max))
    with pytest.raises(ValueError):
        step(OptimState(_vars()), {"log_depth": np.ones(3)}, cfg)


def test_config_validation_and_round_trip():
    cfg = OptimConfig(learning_rates={"rotation": 1e-3}, weights={"xi": 0.05})
    assert cfg.learning_rates["translation"] == 2e-3 and cfg.weights.xi == 0.05
    assert OptimConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="unknown"):
        OptimConfig.from_dict({"bogus": 1})
    for bad in ({"mode": "x"}, {"beta_mode": "x"}, {"d_min": 0.0}, {"pyramid_levels": 0},
                {"learning_rates": {"log_depth": -1.0}}):
        with pytest.raises(ValueError):
            OptimConfig(**bad)


def test_perturbed_init_magnitudes():
    depth = np.full((1, 8, 8), 10.0)
    poses = [PoseSE3((0.01, 0.02, 0.0), (0.3, 0.0, -0.4))]
    init = perturbed_init(depth, 0.04, poses, seed=0)
    assert np.isclose(init.beta, 0.08)
    assert 0.05 < np.std(init.depth / depth) < 0.15
    R0, R1 = rotation_matrix(poses[0].rotation), rotation_matrix(init.poses[0].rotation)
    assert np.isclose(np.degrees(np.linalg.norm(rotation_log(R1 @ R0.T))), 0.5)
    t0, t1 = np.array(poses[0].translation), np.array(init.poses[0].translation)
    cos = t0 @ t1 / np.linalg.norm(t0) / np.linalg.norm(t1)
    assert np.isclose(np.degrees(np.arccos(cos)), 0.5)
    assert np.isclose(np.linalg.norm(t1), np.linalg.norm(t0))


@pytest.fixture(scope="module")
def small_bundle():
    return generate(random_scene_spec(1, width=32, height=32, target_disparity=3.0))


def _init(b):
    src = b.source_indices
    return perturbed_init(b.depth[b.target_index], float(b.beta.mean()), [b.poses[i] for i in src], 0)


def test_solve_reduces_objective_and_writes_trace(small_bundle, tmp_path):
    b = small_bundle
    cfg = OptimConfig(max_iterations=60, pyramid_levels=2, deterministic=True)
    res = solve(b.hazy, b.intrinsics, cfg, _init(b), airlight=b.airlight)
    first = [r["total"] for r in res.trace if r["level"] == 0]
    assert first[-1] < first[0]
    assert {r["level"] for r in res.trace} == {0, 1}
    assert res.depth.shape == (1, 32, 32) and len(res.poses) == 2 and len(res.dehazed) == 3
    write_trace(res.trace, tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert tuple(rows[0]) == TRACE_COLUMNS and len(rows) == len(res.trace) + 1


def test_solve_is_deterministic(small_bundle):
    b = small_bundle
    cfg = OptimConfig(max_iterations=20, pyramid_levels=1, deterministic=True)
    r1 = solve(b.hazy, b.intrinsics, cfg, _init(b), airlight=b.airlight)
    r2 = solve(b.hazy, b.intrinsics, OptimConfig(max_iterations=20, pyramid_levels=1, deterministic=True,
                                                 threads=4), _init(b), airlight=b.airlight)
    assert [r["total"] for r in r1.trace] == [r["total"] for r in r2.trace]
    assert np.array_equal(r1.depth, r2.depth)


def test_convergence_stops_early(small_bundle):
    b = small_bundle
    cfg = OptimConfig(max_iterations=400, pyramid_levels=1, tolerance=1e-2, tolerance_window=5)
    res = solve(b.hazy, b.intrinsics, cfg, _init(b), airlight=b.airlight)
    assert res.converged and len(res.trace) < 400


def test_pose_warmup_holds_poses(small_bundle):
    b = small_bundle
    init = _init(b)
    cfg = OptimConfig(max_iterations=10, pyramid_levels=1, pose_warmup=10)
    res = solve(b.hazy, b.intrinsics, cfg, init, airlight=b.airlight)
    assert all(np.allclose(p.vector(), q.vector()) for p, q in zip(res.poses, init.poses))


def test_divergence_raises_with_trace(small_bundle):
    b = small_bundle
    cfg = OptimConfig(max_iterations=50, pyramid_levels=1, divergence_patience=1,
                      learning_rates={"log_depth": 2.0, "translation": 1.0, "rotation": 0.1})
    with pytest.raises(NumericalError, match="increased") as err:
        solve(b.hazy, b.intrinsics, cfg, _init(b), airlight=b.airlight)
    assert err.value.trace


def test_non_finite_objective_keeps_trace(small_bundle):
    b = small_bundle
    ref = np.full_like(b.clear[1], np.nan)
    with pytest.raises(NumericalError) as err:
        solve(b.hazy, b.intrinsics, OptimConfig(max_iterations=5, pyramid_levels=1), _init(b),
              airlight=b.airlight, reference=ref)
    assert err.value.trace == []


def test_solve_input_checks(small_bundle):
    b = small_bundle
    with pytest.raises(ValueError):
        solve(b.hazy[:1], b.intrinsics)
