import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from dmsd import labelkit, synthgen
from dmsd.labelkit import LABELS
from dmsd.synthgen import AgentMotionModel, ScenarioSpec


def test_maze_has_eight_arms():
    spec = ScenarioSpec("maze8", size=96)
    _, mask = synthgen.scenario_layout(spec)
    c = (spec.size - 1) / 2
    yy, xx = np.mgrid[0 : spec.size, 0 : spec.size]
    hub = (xx - c) ** 2 + (yy - c) ** 2 <= (0.3 * spec.size) ** 2
    _, n_arms = ndimage.label(mask & ~hub)
    assert n_arms == 8
    _, n_all = ndimage.label(mask)
    assert n_all == 1


@pytest.mark.parametrize("kind", synthgen.SCENARIO_KINDS)
def test_layout_is_connected_and_walkable_inside_it(kind):
    spec = ScenarioSpec(kind, palette_seed=3, layout_seed=1)
    img, mask = synthgen.scenario_layout(spec)
    walk = synthgen.walkable_mask(spec)
    assert img.shape == (64, 64, 3) and 0 <= img.min() and img.max() <= 1
    assert walk.sum() > 0 and not (walk & ~mask).any()


def test_spec_validation():
    with pytest.raises(ValueError):
        ScenarioSpec("cave")
    with pytest.raises(ValueError):
        ScenarioSpec(size=32)
    with pytest.raises(ValueError):
        ScenarioSpec(fog_density=1.5)
    with pytest.raises(ValueError):
        AgentMotionModel(mode="teleport")


def test_fog_lowers_contrast_and_is_static():
    clear = synthgen.render_scenario_background(ScenarioSpec("labsim", 0.0, 5, layout_seed=2))
    light = synthgen.render_scenario_background(ScenarioSpec("labsim", synthgen.LIGHT_FOG, 5, layout_seed=2))
    dense = synthgen.render_scenario_background(ScenarioSpec("labsim", synthgen.DENSE_FOG, 5, layout_seed=2))
    assert clear.std() > light.std() > dense.std()
    again = synthgen.render_scenario_background(ScenarioSpec("labsim", synthgen.DENSE_FOG, 5, layout_seed=2))
    np.testing.assert_array_equal(dense, again)


@settings(max_examples=15, deadline=None)
@given(
    st.sampled_from(["waypoint", "random-walk", "dwell"]),
    st.sampled_from(synthgen.SCENARIO_KINDS),
    st.integers(0, 2**31 - 1),
)
def test_trajectory_steps_and_walkability(mode, kind, seed):
    spec = ScenarioSpec(kind, layout_seed=1)
    model = AgentMotionModel(mode, speed_px_per_s=6.0)
    traj = np.array(synthgen.simulate_trajectory(model, spec, 4.0, 10, seed))
    assert len(traj) == 41
    np.testing.assert_allclose(traj[:, 0], np.arange(41) / 10)
    steps = np.hypot(*np.diff(traj[:, 1:], axis=0).T)
    assert np.all((np.abs(steps) < 1e-9) | (np.abs(steps - 0.6) < 1e-9))
    walk = synthgen.walkable_mask(spec)
    rows, cols = np.rint(traj[:, 2]).astype(int), np.rint(traj[:, 1]).astype(int)
    assert walk[rows, cols].all()


def test_trajectory_is_seeded():
    spec = ScenarioSpec("openfield")
    m = synthgen.individual_model("B", 64, "waypoint")
    a = synthgen.simulate_trajectory(m, spec, 5.0, 30, 11)
    b = synthgen.simulate_trajectory(m, spec, 5.0, 30, 11)
    c = synthgen.simulate_trajectory(m, spec, 5.0, 30, 12)
    assert a == b and a != c


def test_simulation_preconditions():
    with pytest.raises(ValueError):
        synthgen.simulate_trajectory(AgentMotionModel(), ScenarioSpec(), 2.0, 30, 0)
    with pytest.raises(ValueError):
        synthgen.simulate_trajectory(AgentMotionModel(), ScenarioSpec(), 5.0, 4, 0)


def test_rendered_agent_centroid_tracks_trajectory():
    spec = ScenarioSpec("openfield", palette_seed=2)
    traj = np.array([[0.0, 20.0, 30.0], [1.0, 40.0, 25.0]])
    frames = synthgen.render_clip(spec, traj, fps=4)
    assert frames.shape == (4, 64, 64, 3) and frames.dtype == np.float32
    background = synthgen.render_scenario_background(spec)
    for k, frame in enumerate(frames):
        diff = np.abs(frame - background).sum(-1)
        yy, xx = np.nonzero(diff > 0.05)
        w = diff[yy, xx]
        t = k / 4
        assert abs((xx * w).sum() / w.sum() - (20 + 20 * t)) < 1.0
        assert abs((yy * w).sum() / w.sum() - (30 - 5 * t)) < 1.0


def test_render_rejects_out_of_bounds():
    with pytest.raises(synthgen.RenderBoundsError):
        synthgen.render_clip(ScenarioSpec(), np.array([[0, 10, 10], [1, 70, 10.0]]), 30)


def test_individuals_differ_but_are_stable():
    a1, a2, b = (synthgen.individual_model(i, 64, "waypoint") for i in ("A", "A", "B"))
    assert a1 == a2
    assert (a1.speed_px_per_s, a1.dwell_prob) != (b.speed_px_per_s, b.dwell_prob)


def test_dataset_is_balanced_and_labels_reproduce(micro_data):
    manifest = synthgen.DatasetManifest.load(micro_data)
    for split, per_class in (("train", 4), ("val", 1), ("test", 2)):
        counts = Counter(r.label for r in manifest.split(split))
        assert counts == {lab: per_class for lab in LABELS}
    cfg = labelkit.LabelRuleConfig()
    for rec in manifest.records:
        traj = labelkit.read_trajectory_csv(micro_data / "traj" / f"{rec.clip_id}.csv")
        vec = labelkit.displacement(traj, rec.label_t0, cfg.horizon_t)
        assert labelkit.assign_label(vec, labelkit.compute_r(64, cfg), cfg) is rec.label
        frames = sorted((micro_data / rec.frame_dir).glob("frame_*.png"))
        assert len(frames) == rec.n_frames == 90
        assert rec.label_t0 == pytest.approx(rec.n_frames / rec.fps)
    assert {r.scenario_id for r in manifest.records} == {"openfield", "maze8", "labsim"}


def test_dataset_exists_tracks_config_hash(micro_data):
    assert synthgen.dataset_exists(micro_data, "multiple", {"train": 4, "val": 1, "test": 2}, 3)
    assert not synthgen.dataset_exists(micro_data, "multiple", {"train": 4, "val": 1, "test": 2}, 4)
    assert not synthgen.dataset_exists(micro_data, "single", {"train": 4, "val": 1, "test": 2}, 3)


def test_challenging_train_split_has_one_clip_per_class(tmp_path):
    manifest = synthgen.build_dataset("challenging", {"train": 9, "val": 1, "test": 1}, 0, tmp_path)
    train = manifest.split("train")
    assert len(train) == 5 and {r.label for r in train} == set(LABELS)
    assert all(r.scenario["fog_density"] == synthgen.DENSE_FOG for r in manifest.records)


def test_generation_is_deterministic(tmp_path):
    a = synthgen.build_dataset("single", {"train": 1, "val": 1, "test": 1}, 5, tmp_path / "a")
    b = synthgen.build_dataset("single", {"train": 1, "val": 1, "test": 1}, 5, tmp_path / "b")
    assert [r.to_json() for r in a.records] == [r.to_json() for r in b.records]
    fa = (tmp_path / "a" / a.records[3].frame_dir / "frame_000050.png").read_bytes()
    fb = (tmp_path / "b" / b.records[3].frame_dir / "frame_000050.png").read_bytes()
    assert fa == fb


def test_long_videos(micro_data):
    videos = synthgen.load_videos(micro_data)
    (vid,) = videos.values()
    assert vid["n_frames"] == 450
    traj = labelkit.read_trajectory_csv(micro_data / "traj" / f"{vid['video_id']}.csv")
    assert traj[-1, 0] == pytest.approx(15.0)
    assert math.isclose(len(list((micro_data / vid["frame_dir"]).glob("*.png"))), 450)
