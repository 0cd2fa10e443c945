import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import micro_config
from dmsd import evalkit, labelkit, plotting, synthgen
from dmsd import trainloop as tl
from dmsd.labelkit import LABELS, LabelRuleConfig, MotionLabel


def test_hand_built_confusion():
    conf = [
        [8, 1, 0, 1, 0],
        [2, 6, 1, 0, 1],
        [0, 0, 5, 5, 0],
        [0, 0, 0, 10, 0],
        [3, 0, 0, 0, 7],
    ]
    rep = evalkit.metrics_from_confusion(conf)
    per = [0.8, 0.6, 0.5, 1.0, 0.7]
    assert rep.per_class_acc == pytest.approx(per, abs=1e-15)
    assert rep.mean_acc == pytest.approx(0.72, abs=1e-15)
    # population variance: (.0064 + .0144 + .0484 + .0784 + .0004) / 5 = .0296
    assert rep.std_acc == pytest.approx(math.sqrt(0.0296), abs=1e-15)
    assert rep.top1 == pytest.approx(36 / 50, abs=1e-15)
    assert rep.n_samples == 50


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(np.int64, (5, 5), elements=st.integers(0, 50)))
def test_metric_identities(conf):
    conf[np.arange(5), np.arange(5)] += 1
    rep = evalkit.metrics_from_confusion(conf)
    per = np.diag(conf) / conf.sum(1)
    assert abs(rep.mean_acc - per.mean()) <= 1e-12
    assert abs(rep.std_acc - math.sqrt(((per - per.mean()) ** 2).mean())) <= 1e-12
    assert abs(rep.top1 - np.trace(conf) / conf.sum()) <= 1e-12
    assert np.array_equal(np.asarray(rep.confusion), conf)


def test_perfect_and_constant_predictors():
    true = np.repeat(np.arange(5), 4)
    perfect = evalkit.metrics_from_confusion(evalkit.confusion_matrix(true, true))
    assert (perfect.mean_acc, perfect.std_acc, perfect.top1) == (1.0, 0.0, 1.0)
    const = evalkit.metrics_from_confusion(evalkit.confusion_matrix(true, np.full(20, 4)))
    assert const.per_class_acc == [0.0, 0.0, 0.0, 0.0, 1.0]
    assert const.mean_acc == pytest.approx(0.2) and const.top1 == pytest.approx(0.2)


def test_absent_class_is_null_and_excluded():
    conf = np.diag([3, 3, 3, 3, 0])
    conf[0, 1] = 3
    with pytest.warns(UserWarning, match="middle"):
        rep = evalkit.metrics_from_confusion(conf)
    assert rep.per_class_acc[4] is None
    assert rep.mean_acc == pytest.approx((0.5 + 1 + 1 + 1) / 4)
    assert '"per_class_acc"' in rep.to_json() and "null" in rep.to_json()


def test_report_files_are_canonical(tmp_path):
    rep = evalkit.metrics_from_confusion(np.diag([1, 2, 3, 4, 5]))
    js, txt = evalkit.write_report(rep, tmp_path, "r")
    first = js.read_bytes()
    evalkit.write_report(evalkit.read_report(js), tmp_path, "r")
    assert js.read_bytes() == first
    assert json.loads(first)["top1"] == 1.0
    assert "top-1" in txt.read_text()


def test_aggregate_keeps_per_run_values():
    a = evalkit.metrics_from_confusion(np.diag([1, 1, 1, 1, 1]))
    b = evalkit.metrics_from_confusion(np.full((5, 5), 1))
    agg = evalkit.aggregate_reports([a, b])
    assert agg.per_run_top1 == [1.0, 0.2]
    assert agg.n_samples == 30


@pytest.fixture(scope="module")
def micro_checkpoint(micro_data, tmp_path_factory):
    run = tmp_path_factory.mktemp("micro_run")
    tl.fit(micro_config(), micro_data, run)
    return run / "checkpoint.best"


def test_evaluate_is_order_invariant_and_deterministic(micro_data, micro_checkpoint):
    rep = evalkit.evaluate(micro_checkpoint, micro_data, "test")
    assert rep.n_samples == 10
    again = evalkit.evaluate(micro_checkpoint, micro_data, "test")
    assert rep.to_json() == again.to_json()
    model, _, cfg = tl.load_checkpoint(micro_checkpoint)
    recs = synthgen.DatasetManifest.load(micro_data).split("test")
    fwd = evalkit.evaluate_model(model, tl.load_clips(recs, micro_data, cfg))
    rev = evalkit.evaluate_model(model, tl.load_clips(recs[::-1], micro_data, cfg))
    assert fwd.confusion == rev.confusion == rep.confusion


def test_zero_tilt_is_plain_evaluation(micro_data, micro_checkpoint):
    plain = evalkit.evaluate(micro_checkpoint, micro_data, "test")
    stressed = evalkit.homography_stress(micro_checkpoint, micro_data, 0.0)
    assert stressed.to_json() == plain.to_json()
    tilted = evalkit.homography_stress(micro_checkpoint, micro_data, 15.0)
    assert tilted.extra["tilt_deg"] == 15.0 and tilted.n_samples == plain.n_samples
    with pytest.raises(ValueError):
        evalkit.tilt_homography(31, 32)


@pytest.mark.parametrize("tilt", [-25.0, -10.0, 12.0, 30.0])
def test_warp_moves_points_to_homography_image(tilt):
    size = 64
    h = evalkit.tilt_homography(tilt, size)
    checked = 0
    for p in [(10, 12), (50, 14), (20, 48), (32, 32), (54, 52), (8, 30), (56, 30)]:
        q = evalkit.apply_homography(h, np.array([p]))[0]
        if not (3 <= q[0] <= size - 4 and 3 <= q[1] <= size - 4):
            continue
        checked += 1
        img = torch.zeros(1, size, size)
        img[0, p[1], p[0]] = 1.0
        out = evalkit.warp_frames(img, h)[0].numpy()
        yy, xx = np.mgrid[0:size, 0:size]
        cx, cy = (xx * out).sum() / out.sum(), (yy * out).sum() / out.sum()
        assert math.hypot(cx - q[0], cy - q[1]) <= 0.5
    assert checked >= 3


def test_warp_is_deterministic_and_identity_at_zero():
    x = torch.rand(2, 8, 3, 32, 32)
    h = evalkit.tilt_homography(20, 32)
    assert torch.equal(evalkit.warp_frames(x, h), evalkit.warp_frames(x, h))
    np.testing.assert_allclose(evalkit.tilt_homography(0, 32), np.eye(3), atol=1e-12)
    assert torch.allclose(evalkit.warp_frames(x, np.eye(3)), x, atol=1e-5)


@pytest.mark.parametrize(
    "duration,fps,stride,expected",
    [(15.0, 30.0, 3.0, 4), (30.0, 30.0, 3.0, 9), (30.0, 30.0, 1.0, 25), (5.0, 30.0, 3.0, 0), (30.0, 10.0, 3.0, 7)],
)
def test_window_starts_closed_form(duration, fps, stride, expected):
    usable, skipped = evalkit.window_starts(duration, fps, stride)
    assert len(usable) == expected == evalkit.closed_form_window_count(duration, fps, stride)
    assert len(usable) + len(skipped) == labelkit.window_count(duration, 3.0, stride)
    assert all(evalkit.preceding_frames(t, fps) >= 64 for t in usable)


@settings(max_examples=100, deadline=None)
@given(st.floats(3.0, 120.0), st.sampled_from([10.0, 25.0, 30.0, 60.0]), st.sampled_from([0.5, 1.0, 2.0, 3.0]))
def test_window_count_property(duration, fps, stride):
    usable, _ = evalkit.window_starts(duration, fps, stride)
    assert len(usable) == evalkit.closed_form_window_count(duration, fps, stride)


class TruthStub:
    """Emits one-hot logits for a precomputed label sequence, one per call."""

    def __init__(self, labels):
        self.labels = list(labels)

    def __call__(self, raw):
        out = torch.full((raw.shape[0], 5), -30.0)
        out[:, self.labels.pop(0).index] = 30.0
        return out


def _video(root):
    (vid,) = synthgen.load_videos(root).values()
    traj = labelkit.read_trajectory_csv(root / "traj" / f"{vid['video_id']}.csv")
    return vid, traj


def test_long_term_with_perfect_stub(micro_data):
    vid, traj = _video(micro_data)
    cfg = LabelRuleConfig()
    usable, skipped = evalkit.window_starts(15.0, 30.0)
    truth = [labelkit.assign_label(labelkit.displacement(traj, t, 3.0), 6.4) for t in usable]
    pred = evalkit.predict_long_term(TruthStub(truth), micro_data, vid, traj, 16, 3.0, cfg)
    assert [w.t_start for w in pred.windows] == [3.0, 6.0, 9.0, 12.0]
    assert pred.skipped == [0.0]
    assert pred.top1 == 1.0
    for w in pred.windows:
        assert abs(sum(w.probs) - 1) <= 1e-6


def test_long_term_with_model(micro_data, micro_checkpoint):
    pred, traj, _ = evalkit.predict_video(micro_checkpoint, micro_data, "multiple_video_000")
    assert len(pred.windows) == evalkit.closed_form_window_count(15.0, 30.0)
    for w in pred.windows:
        assert abs(sum(w.probs) - 1) <= 1e-6
        assert w.true is labelkit.assign_label(labelkit.displacement(traj, w.t_start, 3.0), 6.4)
    with pytest.raises(tl.DataError):
        evalkit.predict_video(micro_checkpoint, micro_data, "nope")


def _window(t, pred, true, pos=(30.0, 30.0)):
    return evalkit.WindowPrediction(t, pred, true, [0.2] * 5, pos)


def _red(path):
    return plotting.count_color_pixels(path, (255, 0, 0), tol=40)


def test_plot_zero_windows(tmp_path):
    bg = synthgen.render_scenario_background(synthgen.ScenarioSpec())
    traj = np.array([[0, 20, 20], [1, 25, 22.0]])
    audit = evalkit.render_trajectory_plot(traj, evalkit.TrajectoryPrediction("v", []), bg, tmp_path / "p.png")
    assert audit["windows"] == 0 and audit["middle"] + audit["triangles"] == 0 and audit["start"] == 1
    assert _red(tmp_path / "p.png") == 0


def test_plot_marker_audit(tmp_path):
    bg = synthgen.render_scenario_background(synthgen.ScenarioSpec())
    traj = np.array([[0, 10, 10], [15, 50, 50.0]])
    labels = list(LABELS)
    right = [_window(3 * (i + 1), lab, lab, (10 + 8 * i, 10 + 8 * i)) for i, lab in enumerate(labels)]
    pred = evalkit.TrajectoryPrediction("v", right)
    audit = evalkit.render_trajectory_plot(traj, pred, bg, tmp_path / "ok.png")
    assert audit == plotting.read_audit(tmp_path / "ok.png")
    assert audit["middle"] + audit["triangles"] == audit["windows"] == 5
    assert audit["middle"] == 1 and audit["errors"] == 0 and audit["top1"] == 1.0
    assert _red(tmp_path / "ok.png") == 0

    wrong = right[:3] + [_window(12, MotionLabel.UP, MotionLabel.DOWN, (40, 40)), right[4]]
    audit = evalkit.render_trajectory_plot(traj, evalkit.TrajectoryPrediction("v", wrong), bg, tmp_path / "bad.png")
    assert audit["errors"] == 1 and audit["top1"] == pytest.approx(0.8)
    assert _red(tmp_path / "bad.png") > 0


@pytest.mark.parametrize(
    "label,verbatim,screen",
    [(MotionLabel.DOWN, ">", ">"), (MotionLabel.RIGHT, "v", "^"), (MotionLabel.UP, "<", "<"),
     (MotionLabel.LEFT, "^", "v"), (MotionLabel.MIDDLE, "o", "o")],
)
def test_marker_direction_follows_sector_centers(label, verbatim, screen):
    assert plotting.marker_for(label) == verbatim
    assert plotting.marker_for(label, LabelRuleConfig(axis_convention="screen-y-down")) == screen


@pytest.mark.filterwarnings("ignore:classes absent")
def test_cross_individual_matrix(micro_data, micro_checkpoint, tmp_path):
    ckpts = {"A": micro_checkpoint, "B": micro_checkpoint, "C": micro_checkpoint}
    mat, names = evalkit.cross_individual_matrix(ckpts, micro_data, "train")
    assert mat.shape == (3, 3) and names == ["A", "B", "C"]
    assert ((0 <= mat) & (mat <= 1)).all()
    csv_path, png = evalkit.write_matrix(mat, names, tmp_path)
    back, back_names = evalkit.read_matrix(csv_path)
    assert back_names == names and np.array_equal(back, mat)
    audit = plotting.read_audit(png)
    assert np.allclose(np.array(audit["annotations"], dtype=float), mat, atol=5e-4)
    with pytest.raises(ValueError):
        evalkit.cross_individual_matrix({"A": micro_checkpoint}, micro_data)
