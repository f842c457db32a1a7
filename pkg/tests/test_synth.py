import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import torch

from scenemocap.body import synthetic_body
from scenemocap.camera import back_project, project
from scenemocap.fileio import read_pfm
from scenemocap.observations import load_sequence
from scenemocap.scene import disparity_to_depth
from scenemocap.synth import (NoiseSpec, PersonSpec, ScenarioError, ScenarioSpec,
                              generate, preset, spec_from_dict, spec_to_dict)

from helpers import mini_scenario


@pytest.fixture(scope="module")
def tiny_body():
    return synthetic_body(segments=3, rings=2)


def dir_checksums(root):
    out = {}
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def test_spec_validation():
    with pytest.raises(ScenarioError):
        ScenarioSpec(persons=[]).validate()
    with pytest.raises(ScenarioError):
        ScenarioSpec(persons=[PersonSpec(scale=-1)]).validate()
    with pytest.raises(ScenarioError):
        ScenarioSpec(persons=[PersonSpec(motion="fly")]).validate()


def test_spec_dict_round_trip():
    spec = preset("multi-scale", seed=3)
    again = spec_from_dict(json.loads(json.dumps(spec_to_dict(spec))))
    assert again.seed == 3
    assert len(again.persons) == 3
    assert again.persons[2].scale == spec.persons[2].scale


def test_generate_deterministic(tmp_path, tiny_body):
    spec = mini_scenario(seed=4)
    generate(spec, tmp_path / "a", body=tiny_body)
    generate(mini_scenario(seed=4), tmp_path / "b", body=tiny_body)
    assert dir_checksums(tmp_path / "a") == dir_checksums(tmp_path / "b")


def test_generate_seed_changes_noise(tmp_path, tiny_body):
    generate(mini_scenario(seed=4), tmp_path / "a", body=tiny_body)
    generate(mini_scenario(seed=5), tmp_path / "b", body=tiny_body)
    assert dir_checksums(tmp_path / "a") != dir_checksums(tmp_path / "b")


def test_disparity_round_trips_to_true_depth(tmp_path, tiny_body):
    spec = mini_scenario(seed=6, noisy=False)
    truth = generate(spec, tmp_path, body=tiny_body)
    cam = spec.camera()
    disparity = read_pfm(tmp_path / "disparity" / "frame_0000.pfm").astype(np.float64)
    depth = disparity_to_depth(disparity, truth.z_near[0], truth.z_far[0])
    # scene surfaces: reconstruct the wall/plane analytically where background
    from scenemocap.synth import scene_depth_map
    scene = scene_depth_map(spec, cam)
    from scenemocap.fileio import read_label_png
    labels = read_label_png(tmp_path / "masks" / "frame_0000.png")
    bg = labels == 0
    # float32 disparity storage bounds the round-trip error
    assert np.abs(depth[bg] - scene[bg]).max() < 1e-4


def test_emitted_joints_match_projection_statistics(tmp_path, tiny_body):
    sigma = 2.0
    spec = mini_scenario(seed=7, frame_count=30)
    spec.noise = NoiseSpec(joint_px=sigma)
    truth = generate(spec, tmp_path, body=tiny_body)
    cam = spec.camera()
    errs = []
    for t in range(spec.frame_count):
        data = json.loads((tmp_path / "joints" / ("frame_%04d.json" % t)).read_text())
        emitted = {d["track_id"]: np.asarray(d["joints"]) for d in data["detections"]}
        for n in range(len(spec.persons)):
            proj, _ = project(cam, truth.joints3d[n, t])
            errs.append(np.linalg.norm(emitted[n] - np.asarray(proj), axis=1))
    errs = np.concatenate(errs)
    assert errs.size >= 1000
    expected_mean = sigma * np.sqrt(np.pi / 2)
    assert abs(errs.mean() - expected_mean) / expected_mean < 0.05


def test_masks_disjoint_and_on_surface(tmp_path, tiny_body):
    spec = mini_scenario(seed=8, noisy=False)
    truth = generate(spec, tmp_path, body=tiny_body)
    cam = spec.camera()
    seq = load_sequence(truth.manifest_path)
    frame = seq.frames[0]
    stack = np.stack([m.astype(int) for m in frame.person_masks])
    assert stack.sum(axis=0).max() <= 1
    for m in frame.person_masks:
        assert not (m & frame.background_mask).any()

    # person-mask pixels back-project (at true depth) onto the true mesh surface
    from scenemocap.body import skin
    from helpers import point_mesh_distance
    disparity = frame.disparity
    depth = disparity_to_depth(disparity, truth.z_near[0], truth.z_far[0])
    for n, mask in enumerate(frame.person_masks):
        mesh = skin(tiny_body, truth.theta[n, 0], truth.beta[n]).numpy() \
            * truth.scale[n] + truth.gamma[n, 0]
        ii, jj = np.nonzero(mask)
        sel = slice(0, len(ii), max(1, len(ii) // 40))
        pts = back_project(cam, np.stack([jj[sel], ii[sel]], axis=-1).astype(float),
                           depth[ii[sel], jj[sel]])
        for p in pts:
            assert point_mesh_distance(p, mesh, tiny_body.faces) < 0.02


def test_contact_flags_and_feet_on_surface(tmp_path, tiny_body):
    spec = mini_scenario(seed=9, noisy=False)
    truth = generate(spec, tmp_path, body=tiny_body)
    assert truth.contact.all()
    from scenemocap.body import skin
    for n in range(2):
        for t in range(spec.frame_count):
            mesh = skin(tiny_body, truth.theta[n, t], truth.beta[n]).numpy() \
                * truth.scale[n] + truth.gamma[n, t]
            assert abs(mesh[:, 1].max() - spec.ground_y) < 1e-9


def test_frustum_violation_raises(tmp_path, tiny_body):
    spec = mini_scenario(seed=10)
    spec.persons[0].start = (25.0, 2.0)  # far outside the view
    with pytest.raises(ScenarioError):
        generate(spec, tmp_path, body=tiny_body)


def test_ramp_scene_depth():
    spec = mini_scenario(seed=11)
    spec.ramp = (2.5, 0.15)
    cam = spec.camera()
    from scenemocap.synth import scene_depth_map, surface_height
    depth = scene_depth_map(spec, cam)
    assert np.isfinite(depth).all()
    assert surface_height(spec, 0.0, 2.0) == spec.ground_y
    assert surface_height(spec, 0.0, 4.0) < spec.ground_y


def test_presets_exist():
    for name in ("three-person-plane", "multi-scale", "children", "walking-noisy"):
        spec = preset(name)
        spec.validate()
    with pytest.raises(ScenarioError):
        preset("nope")


def test_three_person_plane_shape():
    spec = preset("three-person-plane")
    assert spec.frame_count == 100
    assert len(spec.persons) == 3


def test_children_preset_scales():
    spec = preset("children")
    assert sorted(p.scale for p in spec.persons) == [0.55, 1.0, 1.05]
