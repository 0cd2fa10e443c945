"""Matplotlib figures written next to the machine-readable reports.

Each figure stores the numbers it draws as JSON in a PNG text chunk under
the key ``dmsd`` so a saved image can be audited without OCR.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .labelkit import LABELS, TWO_PI, LabelRuleConfig, MotionLabel  # noqa: E402

ERROR_COLOR = "#ff0000"
START_COLOR = "#ffd200"
PATH_COLOR = "#9a9a9a"
MARKER_COLOR = "#1f6fd1"

# center angle of each directional sector, counterclockwise from the width axis
_SECTOR_CENTER = {
    MotionLabel.DOWN: 0.0,
    MotionLabel.RIGHT: math.pi / 2,
    MotionLabel.UP: math.pi,
    MotionLabel.LEFT: 3 * math.pi / 2,
}


def get_plot(width: float = 6.0, height: float | None = None):
    golden_ratio = (math.sqrt(5) - 1.0) / 2.0
    height = height or width * golden_ratio
    fig, ax = plt.subplots(figsize=(width, height), facecolor="w")
    return fig, ax


def save(fig, path: str | Path, audit: dict, dpi: int = 150) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=dpi, metadata={"dmsd": json.dumps(audit, sort_keys=True)})
    plt.close(fig)
    return path


def read_audit(path: str | Path) -> dict:
    with Image.open(path) as im:
        return json.loads(im.text["dmsd"])


def marker_for(label: MotionLabel, cfg: LabelRuleConfig = LabelRuleConfig()) -> str:
    """Matplotlib marker pointing along the on-screen movement a label stands for.

    Pixel y grows downward on screen.
    """
    if label is MotionLabel.MIDDLE:
        return "o"
    theta = _SECTOR_CENTER[label]
    if cfg.axis_convention == "screen-y-down":
        theta = (TWO_PI - theta) % TWO_PI
    dx, dy = round(math.cos(theta)), round(math.sin(theta))
    return {(1, 0): ">", (-1, 0): "<", (0, 1): "v", (0, -1): "^"}[(dx, dy)]


def trajectory_figure(
    traj: np.ndarray,
    windows: Sequence,
    background: np.ndarray,
    out_path: str | Path,
    top1: float | None = None,
    cfg: LabelRuleConfig = LabelRuleConfig(),
    title: str | None = None,
) -> dict:
    """Draw a trajectory with one marker per prediction window.

    ``windows`` items need ``t_start``, ``position``, ``predicted`` and
    ``true`` attributes. Gray path, circles for ``middle``, triangles for the
    four directions, a red cross on every wrong window and a yellow star at
    the start. Returns the marker audit stored in the PNG.
    """
    h, w = background.shape[:2]
    fig, ax = get_plot(5.0, 5.0)
    ax.imshow(np.clip(background, 0, 1), extent=(-0.5, w - 0.5, h - 0.5, -0.5), interpolation="nearest")
    ax.plot(traj[:, 1], traj[:, 2], color=PATH_COLOR, lw=1.2, zorder=2)
    audit = {"windows": len(windows), "middle": 0, "triangles": 0, "errors": 0, "start": 1, "top1": top1}
    for win in windows:
        x, y = win.position
        marker = marker_for(win.predicted, cfg)
        audit["middle" if marker == "o" else "triangles"] += 1
        ax.plot([x], [y], marker=marker, ms=7, mfc=MARKER_COLOR, mec="white", mew=0.6, ls="none", zorder=3)
        if win.predicted is not win.true:
            audit["errors"] += 1
            ax.plot([x], [y], marker="x", ms=8, mew=2.0, color=ERROR_COLOR, ls="none", zorder=4)
    ax.plot([traj[0, 1]], [traj[0, 2]], marker="*", ms=14, mfc=START_COLOR, mec="black", mew=0.5, ls="none", zorder=5)
    if top1 is not None:
        ax.text(0.03, 0.97, f"{100 * top1:.1f}", transform=ax.transAxes, va="top", ha="left",
                fontsize=13, color="white", bbox={"facecolor": "black", "alpha": 0.6, "lw": 0})
    ax.set_xlim(-0.5, w - 0.5)
    ax.set_ylim(h - 0.5, -0.5)
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    save(fig, out_path, audit)
    return audit


def heatmap_figure(matrix: np.ndarray, names: Sequence[str], out_path: str | Path, title: str = "") -> dict:
    """Annotated train-individual x test-individual top-1 matrix."""
    k = len(names)
    fig, ax = get_plot(1.2 * k + 2.0, 1.1 * k + 1.5)
    im = ax.imshow(matrix, vmin=0.0, vmax=1.0, cmap="viridis")
    annotations = []
    for i in range(k):
        row = []
        for j in range(k):
            text = f"{matrix[i, j]:.3f}"
            row.append(text)
            ax.text(j, i, text, ha="center", va="center", fontsize=9,
                    color="black" if matrix[i, j] > 0.6 else "white")
        annotations.append(row)
    ax.set_xticks(range(k), names)
    ax.set_yticks(range(k), names)
    ax.set_xlabel("test individual")
    ax.set_ylabel("train individual")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    audit = {"names": list(names), "annotations": annotations}
    save(fig, out_path, audit)
    return audit


def confusion_figure(confusion: np.ndarray, out_path: str | Path, title: str = "") -> dict:
    confusion = np.asarray(confusion)
    fig, ax = get_plot(4.8, 4.2)
    ax.imshow(confusion, cmap="Blues")
    for i in range(confusion.shape[0]):
        for j in range(confusion.shape[1]):
            ax.text(j, i, str(int(confusion[i, j])), ha="center", va="center", fontsize=9)
    names = [lab.value for lab in LABELS]
    ax.set_xticks(range(len(names)), names, rotation=30)
    ax.set_yticks(range(len(names)), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    audit = {"confusion": confusion.astype(int).tolist()}
    save(fig, out_path, audit)
    return audit


def decoupled_grid(raw: np.ndarray, u: np.ndarray, v: np.ndarray, out_path: str | Path) -> dict:
    """Rows: input frames, scenario-relative term, motion-relative term; one column per segment."""
    t = raw.shape[0]
    fig, axes = plt.subplots(3, t, figsize=(1.3 * t, 4.2), squeeze=False)

    def show(ax, arr):
        img = np.transpose(arr, (1, 2, 0))
        lo, hi = img.min(), img.max()
        ax.imshow((img - lo) / (hi - lo + 1e-12), interpolation="nearest")
        ax.set_xticks([])
        ax.set_yticks([])

    for k in range(t):
        show(axes[0, k], raw[k])
        show(axes[1, k], u[k])
        show(axes[2, k], v[k])
    for row, name in enumerate(("x", "u", "v")):
        axes[row, 0].set_ylabel(name)
    fig.tight_layout()
    audit = {"segments": t}
    save(fig, out_path, audit)
    return audit


def count_color_pixels(path: str | Path, rgb: tuple[int, int, int], tol: int = 12) -> int:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB")).astype(int)
    return int(np.all(np.abs(arr - np.array(rgb)) <= tol, axis=-1).sum())
