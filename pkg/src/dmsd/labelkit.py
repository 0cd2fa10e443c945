"""Trajectory to motion-label conversion.

A tracked body-center trajectory is turned into a displacement vector
``(theta, rho)`` over a fixed horizon, and the vector is mapped onto one of
five outcome classes. ``theta`` is the counterclockwise angle from the image
width axis, ``rho`` the pixel length of the displacement.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi
_EDGE_TOL = 1e-12


class MotionLabel(str, enum.Enum):
    UP = "up"
    DOWN = "down"
    LEFT = "left"
    RIGHT = "right"
    MIDDLE = "middle"

    @property
    def index(self) -> int:
        return LABELS.index(self)

    @classmethod
    def from_index(cls, i: int) -> "MotionLabel":
        return LABELS[int(i)]

    def __str__(self) -> str:
        return self.value


# Class order used for logits, confusion matrices and cluster banks.
LABELS: tuple[MotionLabel, ...] = (
    MotionLabel.UP,
    MotionLabel.DOWN,
    MotionLabel.LEFT,
    MotionLabel.RIGHT,
    MotionLabel.MIDDLE,
)
NUM_CLASSES = len(LABELS)

# Directional sectors in counterclockwise order starting at pi/4. Each sector
# is half-open [lo, lo + pi/2) so an edge angle belongs to the sector that
# follows it counterclockwise.
_SECTORS = (MotionLabel.RIGHT, MotionLabel.UP, MotionLabel.LEFT, MotionLabel.DOWN)


class BoundaryAmbiguityError(ValueError):
    """Angle falls exactly on a sector edge and the policy forbids resolving it."""


class TrajectoryPoint(NamedTuple):
    t: float
    x: float
    y: float


class MotionVector(NamedTuple):
    theta: float
    rho: float


@dataclass(frozen=True)
class LabelRuleConfig:
    horizon_t: float = 3.0
    r_fraction: float = 0.1
    boundary_policy: str = "ccw-next"
    axis_convention: str = "paper-verbatim"

    def __post_init__(self):
        if not self.horizon_t > 0:
            raise ValueError(f"horizon_t must be positive, got {self.horizon_t}")
        if not 0 < self.r_fraction < 1:
            raise ValueError(f"r_fraction must lie in (0, 1), got {self.r_fraction}")
        if self.boundary_policy not in ("ccw-next", "error"):
            raise ValueError(f"unknown boundary_policy {self.boundary_policy!r}")
        if self.axis_convention not in ("paper-verbatim", "screen-y-down"):
            raise ValueError(f"unknown axis_convention {self.axis_convention!r}")


def canonical_angle(theta: float) -> float:
    out = math.fmod(theta, TWO_PI)
    if out < 0:
        out += TWO_PI
    # fmod of values just below a multiple of 2*pi can round up to 2*pi
    return 0.0 if out >= TWO_PI else out


def compute_r(image_width_px: float, cfg: LabelRuleConfig = LabelRuleConfig()) -> float:
    """Threshold length below which a displacement counts as ``middle``."""
    if not image_width_px > 0:
        raise ValueError(f"image width must be positive, got {image_width_px}")
    return cfg.r_fraction * image_width_px


def as_array(traj: Sequence[TrajectoryPoint] | np.ndarray) -> np.ndarray:
    """Return an (N, 3) float array with columns t, x, y."""
    arr = np.asarray(traj, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"trajectory must have shape (N, 3), got {arr.shape}")
    return arr


def position_at(traj: Sequence[TrajectoryPoint] | np.ndarray, t: float) -> tuple[float, float]:
    """Linearly interpolated position at time ``t`` (must lie within the trajectory)."""
    arr = as_array(traj)
    if t < arr[0, 0] - 1e-9 or t > arr[-1, 0] + 1e-9:
        raise IndexError(f"time {t} outside trajectory span [{arr[0, 0]}, {arr[-1, 0]}]")
    return float(np.interp(t, arr[:, 0], arr[:, 1])), float(np.interp(t, arr[:, 0], arr[:, 2]))


def displacement(
    traj: Sequence[TrajectoryPoint] | np.ndarray, t0: float, horizon: float
) -> MotionVector:
    """Displacement between the interpolated positions at ``t0`` and ``t0 + horizon``.

    ``theta`` is 0 for a zero displacement so the vector is always defined.
    """
    arr = as_array(traj)
    if len(arr) < 2:
        raise ValueError("displacement needs at least two trajectory points")
    if t0 < arr[0, 0] - 1e-9 or t0 + horizon > arr[-1, 0] + 1e-9:
        raise IndexError(
            f"window [{t0}, {t0 + horizon}] exceeds trajectory span [{arr[0, 0]}, {arr[-1, 0]}]"
        )
    x0, y0 = position_at(arr, t0)
    x1, y1 = position_at(arr, min(t0 + horizon, arr[-1, 0]))
    dx, dy = x1 - x0, y1 - y0
    rho = math.hypot(dx, dy)
    theta = canonical_angle(math.atan2(dy, dx)) if rho > 0 else 0.0
    return MotionVector(theta, rho)


def sector_label(theta: float, policy: str = "ccw-next") -> MotionLabel:
    theta = canonical_angle(theta)
    offset = canonical_angle(theta - math.pi / 4)
    k = round(offset / (math.pi / 2))
    if abs(offset - k * math.pi / 2) <= _EDGE_TOL or abs(offset - TWO_PI) <= _EDGE_TOL:
        if policy == "error":
            raise BoundaryAmbiguityError(f"theta={theta!r} lies on a sector edge")
        return _SECTORS[k % 4]
    return _SECTORS[int(offset // (math.pi / 2)) % 4]


def assign_label(
    v: MotionVector, r: float, cfg: LabelRuleConfig = LabelRuleConfig()
) -> MotionLabel:
    if not r > 0:
        raise ValueError(f"threshold r must be positive, got {r}")
    if v.rho <= r:
        return MotionLabel.MIDDLE
    theta = v.theta
    if cfg.axis_convention == "screen-y-down":
        theta = TWO_PI - canonical_angle(theta)
    return sector_label(theta, cfg.boundary_policy)


def window_count(duration: float, horizon: float, stride: float) -> int:
    if duration < horizon - 1e-9:
        return 0
    return int(math.floor((duration - horizon) / stride + 1e-9)) + 1


def window_trajectory(
    traj: Sequence[TrajectoryPoint] | np.ndarray,
    cfg: LabelRuleConfig,
    stride: float,
    *,
    r: float,
) -> list[tuple[float, MotionVector, MotionLabel]]:
    """Label consecutive windows of length ``cfg.horizon_t`` starting every ``stride`` seconds."""
    if not stride > 0:
        raise ValueError(f"stride must be positive, got {stride}")
    arr = as_array(traj)
    if len(arr) < 2:
        return []
    start = float(arr[0, 0])
    n = window_count(float(arr[-1, 0]) - start, cfg.horizon_t, stride)
    out = []
    for k in range(n):
        t0 = start + k * stride
        vec = displacement(arr, t0, cfg.horizon_t)
        out.append((t0, vec, assign_label(vec, r, cfg)))
    return out


def write_label_records(path: str | Path, records: Iterable[tuple[float, MotionVector, MotionLabel]]) -> None:
    with open(path, "w") as fh:
        for t0, vec, label in records:
            fh.write(
                json.dumps({"t_start": t0, "theta": vec.theta, "rho": vec.rho, "label": label.value})
                + "\n"
            )


def read_label_records(path: str | Path) -> list[tuple[float, MotionVector, MotionLabel]]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.append(
                    (rec["t_start"], MotionVector(rec["theta"], rec["rho"]), MotionLabel(rec["label"]))
                )
    return out


def read_trajectory_csv(path: str | Path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def write_trajectory_csv(path: str | Path, traj: Sequence[TrajectoryPoint] | np.ndarray) -> None:
    arr = as_array(traj)
    with open(path, "w") as fh:
        fh.write("t,x,y\n")
        for t, x, y in arr:
            fh.write(f"{t:.17g},{x:.17g},{y:.17g}\n")
