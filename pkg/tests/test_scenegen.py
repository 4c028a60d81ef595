import json
import os

import numpy as np
import pytest

from hazesfm.asm import HazeParams, synthesize_haze
from hazesfm.geometry import PoseSE3
from hazesfm.scenegen import (SceneRejected, SceneSpec, generate, load_bundle, max_disparity,
                              random_scene_spec, self_consistency_report, write_bundle)


@pytest.fixture(scope="module")
def bundle():
    return generate(random_scene_spec(0))


def test_layout_and_ranges(bundle):
    spec = bundle.spec
    assert len(bundle.clear) == 3 and bundle.target_index == 1
    assert bundle.depth[1].min() >= spec.d_min and bundle.depth[1].max() <= spec.d_max
    assert max_disparity(spec) <= spec.max_disparity
    assert 0.01 <= float(bundle.beta.mean()) <= 0.1
    assert bundle.poses[1] == PoseSE3()


def test_hazy_frames_follow_the_scattering_model_exactly(bundle):
    for k in range(3):
        want = synthesize_haze(bundle.clear[k], bundle.depth[k], HazeParams(bundle.beta_maps[k], bundle.airlight))
        assert np.array_equal(bundle.hazy[k], want)


def test_self_consistency(bundle):
    rep = self_consistency_report(bundle)
    assert rep["passed"], rep


def test_corrupted_pose_fails_self_consistency(bundle):
    bad = generate(random_scene_spec(0))
    v = bad.poses[0].vector()
    v[3] += 0.5
    bad.poses[0] = PoseSE3.from_vector(v)
    assert not self_consistency_report(bad)["passed"]


def test_static_scene_frames_are_identical():
    b = generate(random_scene_spec(1, static=True))
    assert np.array_equal(b.clear[0], b.clear[1]) and np.array_equal(b.clear[2], b.clear[1])
    assert self_consistency_report(b)["max_error"] < 1e-12


def test_disparity_bound_rejects_spec():
    spec = random_scene_spec(2)
    spec.poses = [PoseSE3.from_vector(p.vector() * np.r_[1, 1, 1, 5, 5, 5]) for p in spec.poses]
    with pytest.raises(SceneRejected, match="max_disparity"):
        generate(spec)


def test_depth_range_rejects_spec():
    spec = random_scene_spec(3)
    spec.d_max = 10.0
    with pytest.raises(SceneRejected, match="d_max"):
        generate(spec)


def test_non_uniform_beta_field():
    b = generate(random_scene_spec(4, beta_amplitude=0.5))
    assert b.beta.std() > 0.05 * b.beta.mean()
    assert np.ptp(generate(random_scene_spec(4)).beta) == 0


def test_spec_json_round_trip():
    spec = random_scene_spec(5)
    again = SceneSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert again.to_dict() == spec.to_dict()
    with pytest.raises(SceneRejected):
        SceneSpec(poses=[PoseSE3(), PoseSE3()])


def _tree_bytes(root):
    out = {}
    for d, _, files in os.walk(root):
        for f in files:
            p = os.path.join(d, f)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


def test_same_seed_gives_identical_bytes(tmp_path):
    write_bundle(generate(random_scene_spec(6)), tmp_path / "a")
    write_bundle(generate(random_scene_spec(6)), tmp_path / "b")
    a, b = _tree_bytes(tmp_path / "a"), _tree_bytes(tmp_path / "b")
    assert a == b
    assert {"beta.pfm", "airlight.json", "poses.json", os.path.join("valid", "000.pfm"),
            os.path.join("hazy", "002.ppm"), os.path.join("depth", "001.pfm")} <= set(a)


def test_bundle_reload(tmp_path, bundle):
    write_bundle(bundle, tmp_path / "b")
    back = load_bundle(tmp_path / "b")
    assert back.target_index == bundle.target_index
    assert np.allclose(back.depth[1], bundle.depth[1], rtol=1e-6)
    assert np.allclose(back.poses[0].vector(), bundle.poses[0].vector())
