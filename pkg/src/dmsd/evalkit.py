"""Metrics, cross-individual analysis, long-term prediction and the perspective stress test."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import labelkit, plotting
from .labelkit import LABELS, NUM_CLASSES, LabelRuleConfig, MotionLabel
from .synthgen import DatasetManifest, ScenarioSpec, render_scenario_background
from .trainloop import DataError, ClipSet, load_checkpoint, load_clips, sample_frames_u8

log = logging.getLogger(__name__)

REPORT_VERSION = 1


# --------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    """Classification metrics of one model on one split.

    ``std_acc`` is the population standard deviation across per-class
    accuracies. Classes absent from the split get ``None`` and are left out
    of ``mean_acc`` / ``std_acc``. ``per_run_top1`` is filled only when
    several seeded runs are aggregated.
    """

    per_class_acc: list
    mean_acc: float
    std_acc: float
    top1: float
    n_samples: int
    confusion: list
    per_run_top1: list | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "version": REPORT_VERSION,
            "labels": [lab.value for lab in LABELS],
            "per_class_acc": self.per_class_acc,
            "mean_acc": self.mean_acc,
            "std_acc": self.std_acc,
            "top1": self.top1,
            "n_samples": self.n_samples,
            "confusion": self.confusion,
        }
        if self.per_run_top1 is not None:
            d["per_run_top1"] = self.per_run_top1
        if self.extra:
            d["extra"] = self.extra
        return d

    def to_json(self) -> str:
        """Canonical form: sorted keys, fixed indentation, no timestamps."""
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            d["per_class_acc"], d["mean_acc"], d["std_acc"], d["top1"], d["n_samples"], d["confusion"],
            d.get("per_run_top1"), d.get("extra", {}),
        )

    def summary(self) -> str:
        lines = [f"samples   {self.n_samples}"]
        for lab, acc in zip(LABELS, self.per_class_acc):
            lines.append(f"{lab.value:<9} {'n/a' if acc is None else f'{100 * acc:6.2f}'}")
        lines.append(f"mean acc  {100 * self.mean_acc:6.2f}")
        lines.append(f"std acc   {100 * self.std_acc:6.2f}")
        lines.append(f"top-1     {100 * self.top1:6.2f}")
        if self.per_run_top1 is not None:
            lines.append("per-run top-1  " + " ".join(f"{100 * v:.2f}" for v in self.per_run_top1))
        lines.append("confusion (rows true, cols predicted)")
        lines.append("          " + " ".join(f"{lab.value[:6]:>6}" for lab in LABELS))
        for lab, row in zip(LABELS, self.confusion):
            lines.append(f"{lab.value:<9} " + " ".join(f"{c:>6d}" for c in row))
        return "\n".join(lines) + "\n"


def confusion_matrix(true: Sequence[int], pred: Sequence[int], k: int = NUM_CLASSES) -> np.ndarray:
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (np.asarray(true, dtype=int), np.asarray(pred, dtype=int)), 1)
    return conf


def metrics_from_confusion(confusion) -> MetricsReport:
    conf = np.asarray(confusion, dtype=np.int64)
    support = conf.sum(axis=1)
    per_class: list = []
    for c in range(conf.shape[0]):
        per_class.append(None if support[c] == 0 else float(conf[c, c] / support[c]))
    present = [a for a in per_class if a is not None]
    absent = [LABELS[c].value for c, a in enumerate(per_class) if a is None]
    if absent:
        warnings.warn(f"classes absent from the split: {absent}; left out of mean/std", stacklevel=2)
    n = int(conf.sum())
    return MetricsReport(
        per_class_acc=per_class,
        mean_acc=float(np.mean(present)) if present else float("nan"),
        std_acc=float(np.std(present)) if present else float("nan"),
        top1=float(np.trace(conf) / n) if n else float("nan"),
        n_samples=n,
        confusion=conf.tolist(),
    )


def aggregate_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Pool the confusion matrices of several seeded runs and keep their top-1 values."""
    total = sum(np.asarray(r.confusion, dtype=np.int64) for r in reports)
    out = metrics_from_confusion(total)
    out.per_run_top1 = [r.top1 for r in reports]
    return out


def write_report(report: MetricsReport, out_dir: str | Path, name: str = "metrics") -> tuple[Path, Path]:
    """Write ``<name>.json`` (canonical) and ``<name>.txt`` (summary)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    js, txt = out_dir / f"{name}.json", out_dir / f"{name}.txt"
    js.write_text(report.to_json())
    txt.write_text(report.summary())
    return js, txt


def read_report(path: str | Path) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# evaluation


def _logits_of(model: Callable, raw: torch.Tensor) -> torch.Tensor:
    out = model(raw)
    return out[0] if isinstance(out, (tuple, list)) else out


@torch.no_grad()
def predict_clips(model: Callable, clips: ClipSet, batch_size: int = 32, warp: Callable | None = None) -> torch.Tensor:
    if isinstance(model, torch.nn.Module):
        model.eval()
    out = []
    for k in range(0, len(clips), batch_size):
        raw = clips.frames[k : k + batch_size].float() / 255.0
        if warp is not None:
            raw = warp(raw)
        out.append(_logits_of(model, raw))
    return torch.cat(out) if out else torch.zeros(0, NUM_CLASSES)


def _split_records(root: str | Path, split: str, individuals: Sequence[str] | None = None):
    manifest = DatasetManifest.load(root)
    records = manifest.split(split)
    if individuals is not None:
        records = [r for r in records if r.individual_id in set(individuals)]
    if not records:
        raise DataError(f"split {split!r} under {root} has no clips" + (f" for {list(individuals)}" if individuals else ""))
    return records


def evaluate_model(model: Callable, clips: ClipSet, warp: Callable | None = None) -> MetricsReport:
    pred = predict_clips(model, clips, warp=warp).argmax(1).numpy()
    return metrics_from_confusion(confusion_matrix(clips.labels.numpy(), pred))


def evaluate(
    checkpoint: str | Path,
    root: str | Path,
    split: str = "test",
    tilt_deg: float = 0.0,
    individuals: Sequence[str] | None = None,
) -> MetricsReport:
    """Load a checkpoint and score it on one split of a generated dataset."""
    model, _, cfg = load_checkpoint(checkpoint)
    clips = load_clips(_split_records(root, split, individuals), root, cfg)
    warp = None if tilt_deg == 0 else (lambda raw: warp_frames(raw, tilt_homography(tilt_deg, raw.shape[-1])))
    report = evaluate_model(model, clips, warp)
    if tilt_deg != 0:
        report.extra["tilt_deg"] = float(tilt_deg)
    return report


# --------------------------------------------------------------------------
# perspective stress


def tilt_homography(tilt_deg: float, size: int, focal: float | None = None) -> np.ndarray:
    """Pixel homography of the floor plane seen after tilting it by ``tilt_deg``.

    The plane sits at depth ``focal`` (default: the image size) in front of a
    pinhole camera centered on the frame and turns about its horizontal line
    through the image center, so the center pixel stays put and rows away
    from it are foreshortened: ``H = K (R K^-1 + (I - R) e3 e3^T)``.
    """
    if abs(tilt_deg) > 30:
        raise ValueError("tilt must lie within +-30 degrees")
    f = float(focal or size)
    c = (size - 1) / 2.0
    k = np.array([[f, 0.0, c], [0.0, f, c], [0.0, 0.0, 1.0]])
    a = math.radians(tilt_deg)
    rot = np.array([[1.0, 0.0, 0.0], [0.0, math.cos(a), -math.sin(a)], [0.0, math.sin(a), math.cos(a)]])
    e3 = np.array([[0.0], [0.0], [1.0]])
    h = k @ (rot @ np.linalg.inv(k) + (np.eye(3) - rot) @ e3 @ e3.T)
    return h / h[2, 2]


def apply_homography(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    hom = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ h.T
    return hom[:, :2] / hom[:, 2:3]


def warp_frames(frames: torch.Tensor, h: np.ndarray) -> torch.Tensor:
    """Warp ``(..., C, H, W)`` frames so that input pixel ``p`` lands at ``h @ p``.

    Bilinear sampling; pixels whose source falls outside the frame are zero.
    """
    *lead, c, hh, ww = frames.shape
    ys, xs = np.meshgrid(np.arange(hh, dtype=np.float64), np.arange(ww, dtype=np.float64), indexing="ij")
    out_pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
    src = apply_homography(np.linalg.inv(h), out_pts)
    gx = 2.0 * src[:, 0] / (ww - 1) - 1.0
    gy = 2.0 * src[:, 1] / (hh - 1) - 1.0
    grid = torch.from_numpy(np.stack([gx, gy], axis=1).reshape(1, hh, ww, 2)).to(frames.dtype)
    flat = frames.reshape(-1, c, hh, ww)
    warped = F.grid_sample(flat, grid.expand(flat.shape[0], -1, -1, -1), mode="bilinear",
                           padding_mode="zeros", align_corners=True)
    return warped.reshape(*lead, c, hh, ww)


def homography_stress(checkpoint: str | Path, root: str | Path, tilt_deg: float, split: str = "test") -> MetricsReport:
    """``evaluate`` with every frame warped by a fixed camera tilt; tilt 0 is the plain evaluation."""
    return evaluate(checkpoint, root, split, tilt_deg=tilt_deg)


# --------------------------------------------------------------------------
# cross-individual analysis


def cross_individual_matrix(
    checkpoints: dict[str, str | Path], root: str | Path, split: str = "test"
) -> tuple[np.ndarray, list[str]]:
    """Entry ``(i, j)``: top-1 of the model trained on individual ``i`` tested on individual ``j``."""
    names = list(checkpoints)
    if len(names) < 2:
        raise ValueError("need at least two individuals")
    records = DatasetManifest.load(root).split(split)
    mat = np.zeros((len(names), len(names)))
    for i, a in enumerate(names):
        model, _, cfg = load_checkpoint(checkpoints[a])
        for j, b in enumerate(names):
            recs = [r for r in records if r.individual_id == b]
            if not recs:
                raise DataError(f"no {split} clips for individual {b}")
            clips = load_clips(recs, root, cfg)
            mat[i, j] = evaluate_model(model, clips).top1
    return mat, names


def write_matrix(mat: np.ndarray, names: Sequence[str], out_dir: str | Path, name: str = "xmatrix") -> tuple[Path, Path]:
    """CSV with a header row and one row per training individual, plus the annotated heatmap."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, png_path = out_dir / f"{name}.csv", out_dir / f"{name}.png"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["train\\test", *names])
        for a, row in zip(names, mat):
            w.writerow([a, *(repr(float(v)) for v in row)])
    plotting.heatmap_figure(mat, names, png_path, "top-1 by train / test individual")
    return csv_path, png_path


def read_matrix(path: str | Path) -> tuple[np.ndarray, list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]]), names


# --------------------------------------------------------------------------
# long-term prediction


@dataclass
class WindowPrediction:
    t_start: float
    predicted: MotionLabel
    true: MotionLabel
    probs: list
    position: tuple = (0.0, 0.0)

    def to_dict(self) -> dict:
        return {
            "t_start": self.t_start,
            "predicted": self.predicted.value,
            "true": self.true.value,
            "probs": self.probs,
            "position": list(self.position),
        }


@dataclass
class TrajectoryPrediction:
    video_id: str
    windows: list[WindowPrediction]
    skipped: list[float] = field(default_factory=list)

    @property
    def top1(self) -> float:
        if not self.windows:
            return float("nan")
        return sum(w.predicted is w.true for w in self.windows) / len(self.windows)

    def to_json(self) -> str:
        d = {
            "video_id": self.video_id,
            "top1": self.top1,
            "skipped": self.skipped,
            "windows": [w.to_dict() for w in self.windows],
        }
        return json.dumps(d, sort_keys=True, indent=2) + "\n"


def preceding_frames(t_start: float, fps: float) -> int:
    """Number of frames with timestamp strictly before ``t_start`` (frame ``i`` sits at ``i / fps``)."""
    return int(math.ceil(t_start * fps - 1e-9))


def window_starts(
    duration: float, fps: float, stride: float = 3.0, horizon: float = 3.0, segments: int = 8, frame_stride: int = 8
) -> tuple[list[float], list[float]]:
    """``(usable, skipped)`` window starts ``k * stride`` with ``t + horizon <= duration``.

    A start is usable once ``segments * frame_stride`` frames precede it.
    """
    need = segments * frame_stride
    usable, skipped = [], []
    for k in range(labelkit.window_count(duration, horizon, stride)):
        t = k * stride
        (usable if preceding_frames(t, fps) >= need else skipped).append(t)
    return usable, skipped


def closed_form_window_count(
    duration: float, fps: float, stride: float = 3.0, horizon: float = 3.0, segments: int = 8, frame_stride: int = 8
) -> int:
    """``floor((D - h) / s) - ceil(t_min / s) + 1`` with ``t_min`` the earliest start preceded by enough frames."""
    t_min = segments * frame_stride / fps
    k_lo = math.ceil(t_min / stride - 1e-9)
    k_hi = math.floor((duration - horizon) / stride + 1e-9)
    return max(0, k_hi - k_lo + 1)


@torch.no_grad()
def predict_long_term(
    model: Callable,
    root: str | Path,
    video: dict,
    traj: np.ndarray,
    frame_size: int,
    stride: float = 3.0,
    cfg: LabelRuleConfig = LabelRuleConfig(),
    segments: int = 8,
    frame_stride: int = 8,
) -> TrajectoryPrediction:
    """Slide a prediction window over a stored video.

    For every start ``t`` the clip is built from the frames preceding ``t``
    and the ground truth is the labelled displacement over ``[t, t + horizon]``.
    ``model`` maps raw ``(B, T, 3, S, S)`` clips in [0, 1] to logits (or a
    tuple whose first entry is the logits).
    """
    if isinstance(model, torch.nn.Module):
        model.eval()
    fps = float(video["fps"])
    duration = float(traj[-1, 0] - traj[0, 0])
    width = video.get("scenario", {}).get("size", traj[:, 1].max())
    r = labelkit.compute_r(width, cfg)
    usable, skipped = window_starts(duration, fps, stride, cfg.horizon_t, segments, frame_stride)
    for t in skipped:
        log.info("%s: window at t=%.2fs skipped, fewer than %d frames precede it", video["video_id"], t, segments * frame_stride)
    windows = []
    for t in usable:
        n = preceding_frames(t, fps)
        if n > video["n_frames"]:
            raise DataError(f"{video['video_id']}: window at t={t} needs {n} frames, video has {video['n_frames']}")
        frames = sample_frames_u8(root, video["frame_dir"], n, frame_size, segments, frame_stride)
        raw = torch.from_numpy(frames).float()[None] / 255.0
        probs = torch.softmax(_logits_of(model, raw).double(), dim=-1)[0]
        vec = labelkit.displacement(traj, t, cfg.horizon_t)
        windows.append(
            WindowPrediction(
                t_start=float(t),
                predicted=MotionLabel.from_index(int(probs.argmax())),
                true=labelkit.assign_label(vec, r, cfg),
                probs=[float(p) for p in probs],
                position=labelkit.position_at(traj, t),
            )
        )
    return TrajectoryPrediction(video["video_id"], windows, skipped)


def predict_video(checkpoint: str | Path, root: str | Path, video_id: str, stride: float = 3.0):
    """Load a checkpoint and a generated long video; returns ``(prediction, traj, cfg)``."""
    from .synthgen import load_videos

    videos = load_videos(root)
    if video_id not in videos:
        raise DataError(f"unknown video {video_id!r} under {root}")
    model, _, mcfg = load_checkpoint(checkpoint)
    traj = labelkit.read_trajectory_csv(Path(root) / "traj" / f"{video_id}.csv")
    pred = predict_long_term(
        model, root, videos[video_id], traj, mcfg.data.frame_size, stride, mcfg.data.label_rule,
        mcfg.data.segments, mcfg.data.frame_stride,
    )
    return pred, traj, mcfg


def render_trajectory_plot(
    traj: np.ndarray,
    prediction: TrajectoryPrediction,
    background: np.ndarray,
    out_path: str | Path,
    cfg: LabelRuleConfig = LabelRuleConfig(),
) -> dict:
    """Trajectory figure for one video; returns the marker audit stored in the PNG."""
    top1 = None if not prediction.windows else prediction.top1
    return plotting.trajectory_figure(traj, prediction.windows, background, out_path, top1, cfg, prediction.video_id)


def video_background(video: dict) -> np.ndarray:
    return render_scenario_background(ScenarioSpec(**video["scenario"]))
