"""Deterministic synthetic arena videos with ground-truth trajectories.

Three task settings are generated: ``single`` (one open-field arena),
``multiple`` (several arena kinds, several recording sessions each) and
``challenging`` (a fogged open field with one training clip per class).
Frames are small RGB images of an elliptical agent seen from overhead.

On-disk layout under a dataset root::

    dataset.json                    generation config, seed and config hash
    manifest.jsonl                  one ClipRecord per line
    frames/<clip_id>/frame_%06d.png 8-bit RGB
    traj/<clip_id>.csv              header ``t,x,y``
    videos.jsonl                    long videos for sliding-window prediction
"""

from __future__ import annotations

import functools
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from . import labelkit
from .labelkit import LABELS, LabelRuleConfig, MotionLabel, TrajectoryPoint

log = logging.getLogger(__name__)

GENERATOR_VERSION = 1
SCENARIO_KINDS = ("openfield", "maze8", "labsim", "grass", "barriers")
SPLITS = ("train", "val", "test")
LIGHT_FOG = 0.3
DENSE_FOG = 0.7


class GenerationFailure(RuntimeError):
    pass


class RenderBoundsError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str = "openfield"
    fog_density: float = 0.0
    palette_seed: int = 0
    size: int = 64
    # obstacle placement; sessions of one arena share it and differ in palette_seed
    layout_seed: int = 0

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"unsupported scenario kind {self.kind!r}")
        if not 0.0 <= self.fog_density <= 1.0:
            raise ValueError(f"fog_density must lie in [0, 1], got {self.fog_density}")
        if self.size < 64:
            raise ValueError(f"scenario size must be at least 64 px, got {self.size}")


@dataclass(frozen=True)
class AgentMotionModel:
    mode: str = "waypoint"
    speed_px_per_s: float = 10.0
    turn_rate: float = 2.0
    dwell_prob: float = 0.3
    individual_id: str = "A"

    def __post_init__(self):
        if self.mode not in ("waypoint", "random-walk", "dwell"):
            raise ValueError(f"unknown motion mode {self.mode!r}")
        if not self.speed_px_per_s > 0:
            raise ValueError("speed must be positive")
        if not 0.0 <= self.dwell_prob <= 1.0:
            raise ValueError("dwell_prob must lie in [0, 1]")


@dataclass
class ClipRecord:
    clip_id: str
    frame_dir: str
    n_frames: int
    fps: float
    scenario_id: str
    session_id: str
    individual_id: str
    label: MotionLabel
    split: str
    label_t0: float = 0.0
    scenario: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["label"] = self.label.value
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ClipRecord":
        d = dict(d)
        d["label"] = MotionLabel(d["label"])
        return cls(**d)

    @property
    def scenario_spec(self) -> ScenarioSpec:
        return ScenarioSpec(**self.scenario)


@dataclass
class DatasetManifest:
    records: list[ClipRecord]
    generator_seed: int
    config_hash: str
    config: dict = field(default_factory=dict)

    def split(self, name: str) -> list[ClipRecord]:
        return [r for r in self.records if r.split == name]

    def save(self, root: str | Path) -> None:
        root = Path(root)
        with open(root / "manifest.jsonl", "w") as fh:
            for rec in self.records:
                fh.write(rec.to_json() + "\n")
        meta = {"generator_seed": self.generator_seed, "config_hash": self.config_hash, "config": self.config}
        (root / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, root: str | Path) -> "DatasetManifest":
        root = Path(root)
        meta = json.loads((root / "dataset.json").read_text())
        with open(root / "manifest.jsonl") as fh:
            records = [ClipRecord.from_dict(json.loads(line)) for line in fh if line.strip()]
        return cls(records, meta["generator_seed"], meta["config_hash"], meta.get("config", {}))


# --------------------------------------------------------------------------
# scenario rendering


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    lo, hi = noise.min(), noise.max()
    return (noise - lo) / (hi - lo + 1e-12)


def _disk(radius: float) -> np.ndarray:
    r = int(math.ceil(radius))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return xx**2 + yy**2 <= radius**2


def _maze8_mask(size: int) -> np.ndarray:
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - c, yy - c
    mask = dx**2 + dy**2 <= (0.16 * size) ** 2
    half_width = 0.09 * size
    length = 0.46 * size
    for k in range(8):
        a = k * math.pi / 4
        along = dx * math.cos(a) + dy * math.sin(a)
        across = -dx * math.sin(a) + dy * math.cos(a)
        mask |= (along >= 0) & (along <= length) & (np.abs(across) <= half_width)
    return mask


def _walled_mask(size: int) -> np.ndarray:
    wall = max(2, size // 16)
    mask = np.zeros((size, size), dtype=bool)
    mask[wall:-wall, wall:-wall] = True
    return mask


def _obstacles(mask: np.ndarray, rng: np.random.Generator, n: int, rmin: float, rmax: float, square: bool):
    size = mask.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    shapes = []
    for _ in range(n):
        r = rng.uniform(rmin, rmax) * size
        cx, cy = rng.uniform(0.25, 0.75, size=2) * size
        if square:
            blob = (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r * rng.uniform(0.5, 1.0))
        else:
            blob = (xx - cx) ** 2 + (yy - cy) ** 2 <= r**2
        shapes.append(blob)
        mask &= ~blob
    return shapes


@functools.lru_cache(maxsize=64)
def scenario_layout(spec: ScenarioSpec) -> tuple[np.ndarray, np.ndarray]:
    """Fog-free background image (H, W, 3) and the boolean traversable mask."""
    size = spec.size
    pal = np.random.default_rng([spec.palette_seed, 17])
    lay = np.random.default_rng([spec.layout_seed, SCENARIO_KINDS.index(spec.kind)])
    # per-session lighting jitter
    light = pal.uniform(0.92, 1.08, size=3)
    texture = _smooth_noise(pal, size, sigma=size / 24)

    img = np.empty((size, size, 3), dtype=np.float64)
    if spec.kind == "maze8":
        mask = _maze8_mask(size)
        img[:] = (0.07, 0.07, 0.09)
        floor = np.array([0.36, 0.39, 0.47]) + 0.06 * (texture[..., None] - 0.5)
        img[mask] = floor[mask]
    else:
        mask = _walled_mask(size)
        if spec.kind == "grass":
            fine = _smooth_noise(pal, size, sigma=0.8)
            floor = np.array([0.22, 0.42, 0.18]) + 0.12 * (fine[..., None] - 0.5) + 0.05 * texture[..., None]
            wall = (0.30, 0.22, 0.14)
        elif spec.kind == "labsim":
            yy, xx = np.mgrid[0:size, 0:size]
            tile = ((xx // (size // 8) + yy // (size // 8)) % 2).astype(np.float64)
            floor = np.array([0.46, 0.42, 0.36]) + 0.05 * tile[..., None] + 0.04 * texture[..., None]
            wall = (0.62, 0.62, 0.66)
        else:
            floor = np.array([0.40, 0.37, 0.33]) + 0.08 * (texture[..., None] - 0.5)
            wall = (0.16, 0.16, 0.18)
        img[:] = wall
        img[mask] = floor[mask]
        if spec.kind == "labsim":
            for blob in _obstacles(mask, lay, 2, 0.06, 0.10, square=True):
                img[blob] = (0.55, 0.35, 0.20)
        elif spec.kind == "barriers":
            colors = [(0.15, 0.35, 0.75), (0.85, 0.75, 0.10), (0.20, 0.65, 0.65), (0.60, 0.25, 0.65)]
            for i, blob in enumerate(_obstacles(mask, lay, 4, 0.04, 0.07, square=False)):
                img[blob] = colors[i % len(colors)]
    img = np.clip(img * light, 0.0, 1.0)
    img.setflags(write=False)
    mask.setflags(write=False)
    return img, mask


@functools.lru_cache(maxsize=64)
def fog_alpha(spec: ScenarioSpec) -> np.ndarray | None:
    if spec.fog_density <= 0:
        return None
    rng = np.random.default_rng([spec.palette_seed, 99])
    pattern = _smooth_noise(rng, spec.size, sigma=spec.size / 10)
    alpha = spec.fog_density * (0.6 + 0.4 * pattern)
    alpha.setflags(write=False)
    return alpha


_FOG_COLOR = np.array([0.86, 0.86, 0.88])


def apply_fog(img: np.ndarray, spec: ScenarioSpec) -> np.ndarray:
    """Blend a static per-session haze over ``img`` (last axis RGB)."""
    alpha = fog_alpha(spec)
    if alpha is None:
        return img
    a = alpha[..., None]
    return img * (1.0 - a) + a * _FOG_COLOR


def render_scenario_background(spec: ScenarioSpec) -> np.ndarray:
    img, _ = scenario_layout(spec)
    return apply_fog(np.array(img), spec)


def agent_radii(size: int) -> tuple[float, float]:
    """Semi-major and semi-minor axes of the agent ellipse in pixels."""
    return 0.07 * size, 0.035 * size


@functools.lru_cache(maxsize=64)
def walkable_mask(spec: ScenarioSpec) -> np.ndarray:
    """Traversable mask shrunk so the agent body stays off walls."""
    _, mask = scenario_layout(spec)
    _, minor = agent_radii(spec.size)
    out = ndimage.binary_erosion(mask, structure=_disk(math.ceil(minor) + 1))
    out.setflags(write=False)
    return out


# --------------------------------------------------------------------------
# motion simulation


def _inside(mask: np.ndarray, x: float, y: float) -> bool:
    i, j = int(round(y)), int(round(x))
    return 0 <= i < mask.shape[0] and 0 <= j < mask.shape[1] and bool(mask[i, j])


def _visible(mask: np.ndarray, p: np.ndarray, q: np.ndarray) -> bool:
    n = int(np.ceil(np.hypot(*(q - p)))) + 1
    for s in np.linspace(0.0, 1.0, n + 1):
        x, y = p + s * (q - p)
        if not _inside(mask, x, y):
            return False
    return True


def simulate_trajectory(
    model: AgentMotionModel,
    spec: ScenarioSpec,
    duration: float,
    fps: float,
    seed: int,
) -> list[TrajectoryPoint]:
    """Sample ``round(duration * fps) + 1`` positions at times ``k / fps``.

    Each step moves exactly ``speed / fps`` pixels or not at all, and every
    position lies inside the walkable region of ``spec``.
    """
    if duration < 3.0:
        raise ValueError("duration must be at least 3 s")
    if fps < 8:
        raise ValueError("fps must be at least 8")
    mask = walkable_mask(spec)
    cells = np.argwhere(mask)
    if len(cells) == 0:
        raise GenerationFailure(f"no traversable region in {spec}")
    rng = np.random.default_rng(seed)
    dt = 1.0 / fps
    step = model.speed_px_per_s * dt
    n_steps = int(round(duration * fps))

    pos = cells[rng.integers(len(cells))][::-1].astype(np.float64)
    heading = rng.uniform(0.0, 2 * math.pi)
    target: np.ndarray | None = None
    dwell_left = 0.0
    next_decision = 0.0
    points = [TrajectoryPoint(0.0, float(pos[0]), float(pos[1]))]

    # long legs keep the heading stable across an observation plus horizon span
    min_leg = 0.4 * spec.size

    def pick_target() -> np.ndarray | None:
        for _ in range(40):
            cand = cells[rng.integers(len(cells))][::-1].astype(np.float64)
            if np.hypot(*(cand - pos)) > max(4 * step, min_leg) and _visible(mask, pos, cand):
                return cand
        return None

    for k in range(1, n_steps + 1):
        t = (k - 1) * dt
        if model.mode != "waypoint" and t >= next_decision - 1e-9:
            next_decision += 1.0
            if dwell_left <= 0 and rng.random() < model.dwell_prob:
                dwell_left = 1.0 if model.mode == "dwell" else rng.uniform(1.5, 4.0)
        if dwell_left > 0:
            dwell_left -= dt
            points.append(TrajectoryPoint(k * dt, float(pos[0]), float(pos[1])))
            continue

        if model.mode == "waypoint":
            if target is None:
                target = pick_target()
            if target is not None:
                want = math.atan2(target[1] - pos[1], target[0] - pos[0])
                turn = (want - heading + math.pi) % (2 * math.pi) - math.pi
                max_turn = model.turn_rate * dt
                heading += max(-max_turn, min(max_turn, turn))
        else:
            heading += 0.3 * model.turn_rate * math.sqrt(dt) * rng.standard_normal()

        nxt = pos + step * np.array([math.cos(heading), math.sin(heading)])
        if _inside(mask, *nxt):
            pos = nxt
        else:
            target = None
            heading = rng.uniform(0.0, 2 * math.pi)
        if model.mode == "waypoint" and target is not None and np.hypot(*(target - pos)) < 1.5 * step:
            target = None
            if rng.random() < model.dwell_prob:
                dwell_left = rng.uniform(1.5, 4.0)
        points.append(TrajectoryPoint(k * dt, float(pos[0]), float(pos[1])))
    return points


# --------------------------------------------------------------------------
# clip rendering

_BODY = np.array([0.93, 0.91, 0.86])
_HEAD = np.array([0.22, 0.18, 0.18])
_SUB = 3


def _headings(arr: np.ndarray) -> np.ndarray:
    d = np.diff(arr[:, 1:], axis=0)
    out = np.zeros(len(arr))
    last = 0.0
    for i in range(len(arr)):
        j = min(i, len(d) - 1)
        if len(d) and np.hypot(*d[j]) > 1e-9:
            last = math.atan2(d[j, 1], d[j, 0])
        out[i] = last
    return out


def draw_agent(img: np.ndarray, x: float, y: float, heading: float) -> None:
    """Composite the agent ellipse onto ``img`` in place with sub-pixel coverage."""
    size = img.shape[0]
    a, b = agent_radii(size)
    r = int(math.ceil(a)) + 1
    i0, i1 = max(0, int(y) - r), min(img.shape[0], int(y) + r + 2)
    j0, j1 = max(0, int(x) - r), min(img.shape[1], int(x) + r + 2)
    offs = (np.arange(_SUB) + 0.5) / _SUB - 0.5
    rows = (np.arange(i0, i1)[:, None] + offs[None, :]).reshape(-1)
    cols = (np.arange(j0, j1)[:, None] + offs[None, :]).reshape(-1)
    yy, xx = np.meshgrid(rows, cols, indexing="ij")
    dx, dy = xx - x, yy - y
    c, s = math.cos(heading), math.sin(heading)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    head = inside & (u > 0.45 * a)
    h, w = i1 - i0, j1 - j0
    cov = inside.reshape(h, _SUB, w, _SUB).mean(axis=(1, 3))
    head_cov = head.reshape(h, _SUB, w, _SUB).mean(axis=(1, 3))
    color = (cov - head_cov)[..., None] * _BODY + head_cov[..., None] * _HEAD
    patch = img[i0:i1, j0:j1]
    img[i0:i1, j0:j1] = patch * (1.0 - cov[..., None]) + color


def render_clip(
    spec: ScenarioSpec, traj: Sequence[TrajectoryPoint] | np.ndarray, fps: float
) -> np.ndarray:
    """Frames (N, H, W, 3) in [0, 1], one per ``1 / fps`` over the trajectory span.

    ``N = round(span * fps)``; frame ``k`` shows the agent at ``t0 + k / fps``.
    """
    arr = labelkit.as_array(traj)
    base, _ = scenario_layout(spec)
    size = spec.size
    if np.any(arr[:, 1:] < 0) or np.any(arr[:, 1:] > size - 1):
        raise RenderBoundsError("trajectory leaves the image")
    span = arr[-1, 0] - arr[0, 0]
    n = int(round(span * fps))
    headings = _headings(arr)
    frames = np.empty((n, size, size, 3), dtype=np.float32)
    for k in range(n):
        t = arr[0, 0] + k / fps
        x = float(np.interp(t, arr[:, 0], arr[:, 1]))
        y = float(np.interp(t, arr[:, 0], arr[:, 2]))
        idx = min(int(np.searchsorted(arr[:, 0], t + 1e-9)) - 1, len(arr) - 1)
        frame = np.array(base)
        draw_agent(frame, x, y, headings[max(idx, 0)])
        frames[k] = apply_fog(frame, spec)
    return frames


def save_frames(frames: np.ndarray, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    q = np.clip(np.rint(frames * 255.0), 0, 255).astype(np.uint8)
    for k, frame in enumerate(q):
        Image.fromarray(frame).save(out_dir / f"frame_{k:06d}.png", compress_level=1)


def frame_path(root: str | Path, frame_dir: str, index: int) -> Path:
    return Path(root) / frame_dir / f"frame_{index:06d}.png"


# --------------------------------------------------------------------------
# dataset assembly


@dataclass(frozen=True)
class TaskLayout:
    scenarios: tuple[str, ...]
    sessions: int
    individuals: tuple[str, ...]
    fog_density: float = 0.0


TASKS = {
    "single": TaskLayout(("openfield",), 4, ("A", "B", "C")),
    "multiple": TaskLayout(("openfield", "maze8", "labsim"), 3, ("A", "B", "C")),
    "challenging": TaskLayout(("openfield",), 2, ("A", "B"), fog_density=DENSE_FOG),
}


def individual_model(individual_id: str, size: int, mode: str) -> AgentMotionModel:
    """Per-individual motion parameters, fixed for a given id."""
    seed = int(hashlib.sha256(individual_id.encode()).hexdigest()[:8], 16)
    rng = np.random.default_rng(seed)
    return AgentMotionModel(
        mode=mode,
        speed_px_per_s=0.075 * size * rng.uniform(0.8, 1.25),
        turn_rate=rng.uniform(1.5, 3.0),
        dwell_prob=rng.uniform(0.15, 0.45),
        individual_id=individual_id,
    )


def session_spec(task: str, scenario_idx: int, session_idx: int, size: int) -> ScenarioSpec:
    layout = TASKS[task]
    kind = layout.scenarios[scenario_idx]
    # single and challenging share arena and lighting so fog is the only shift between them
    return ScenarioSpec(
        kind=kind,
        fog_density=layout.fog_density,
        palette_seed=1000 * (SCENARIO_KINDS.index(kind) + 1) + session_idx,
        size=size,
        layout_seed=SCENARIO_KINDS.index(kind),
    )


@dataclass(frozen=True)
class GenParams:
    size: int = 64
    fps: float = 30.0
    observe_seconds: float = 3.0
    label: LabelRuleConfig = LabelRuleConfig()


def _candidate(task: str, params: GenParams, seed_parts: tuple, want: MotionLabel | None):
    rng = np.random.default_rng(list(seed_parts))
    layout = TASKS[task]
    sc = int(rng.integers(len(layout.scenarios)))
    se = int(rng.integers(layout.sessions))
    ind = layout.individuals[int(rng.integers(len(layout.individuals)))]
    if want is MotionLabel.MIDDLE:
        mode = "dwell"
    else:
        mode = ("waypoint", "waypoint", "random-walk")[int(rng.integers(3))]
    model = individual_model(ind, params.size, mode)
    if want is MotionLabel.MIDDLE:
        model = AgentMotionModel("dwell", model.speed_px_per_s, model.turn_rate, 0.8 + 0.2 * model.dwell_prob, ind)
    spec = session_spec(task, sc, se, params.size)
    duration = params.observe_seconds + params.label.horizon_t
    traj = simulate_trajectory(model, spec, duration, params.fps, int(rng.integers(2**31)))
    # labels come from the csv round trip so the stored file reproduces them
    arr = np.array([[float(f"{v:.17g}") for v in p] for p in traj])
    n_frames = int(round(params.observe_seconds * params.fps))
    t0 = n_frames / params.fps
    vec = labelkit.displacement(arr, t0, params.label.horizon_t)
    label = labelkit.assign_label(vec, labelkit.compute_r(params.size, params.label), params.label)
    return label, dict(spec=spec, traj=traj, n_frames=n_frames, t0=t0, scenario_idx=sc, session_idx=se, individual=ind)


def _scenario_id(task: str, idx: int) -> str:
    return TASKS[task].scenarios[idx]


def _render_one(args) -> None:
    root, clip_id, spec, traj, n_frames, fps = args
    frames = render_clip(spec, traj[: n_frames + 1], fps)
    save_frames(frames[:n_frames], Path(root) / "frames" / clip_id)
    labelkit.write_trajectory_csv(Path(root) / "traj" / f"{clip_id}.csv", traj)


def _gen_config(task: str, counts: dict[str, int], seed: int, params: GenParams) -> dict:
    counts = {s: int(counts.get(s, 0)) for s in SPLITS}
    if task == "challenging":
        counts["train"] = 1
    return {
        "task": task,
        "counts_per_class": counts,
        "seed": seed,
        "size": params.size,
        "fps": params.fps,
        "observe_seconds": params.observe_seconds,
        "label": asdict(params.label),
        "version": GENERATOR_VERSION,
    }


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def build_dataset(
    task: str,
    counts: dict[str, int],
    seed: int,
    root: str | Path,
    params: GenParams = GenParams(),
    workers: int = 1,
    max_attempts_per_clip: int = 400,
) -> DatasetManifest:
    """Generate a balanced dataset with ``counts[split]`` clips per class and write it under ``root``.

    In the challenging task the training split always holds exactly one clip per class.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    config = _gen_config(task, counts, seed, params)
    counts = config["counts_per_class"]
    if any(c < 1 for c in counts.values()):
        raise GenerationFailure(f"every split needs at least one clip per class, got {counts}")
    chash = config_hash(config)
    root = Path(root)
    records: list[ClipRecord] = []
    jobs = []
    for split_idx, split in enumerate(SPLITS):
        quota = {lab: counts[split] for lab in LABELS}
        attempt = 0
        limit = max_attempts_per_clip * counts[split] * len(LABELS)
        while any(quota.values()):
            if attempt >= limit:
                raise GenerationFailure(f"could not balance classes for split {split!r}: missing {quota}")
            # alternate between asking for a still-missing class and free sampling
            missing = [lab for lab in LABELS if quota[lab] > 0]
            want = missing[attempt % len(missing)]
            label, cand = _candidate(task, params, (seed, split_idx, attempt), want)
            attempt += 1
            if quota[label] == 0:
                continue
            quota[label] -= 1
            clip_id = f"{task}_{split}_{len([r for r in records if r.split == split]):05d}"
            spec = cand["spec"]
            records.append(
                ClipRecord(
                    clip_id=clip_id,
                    frame_dir=f"frames/{clip_id}",
                    n_frames=cand["n_frames"],
                    fps=params.fps,
                    scenario_id=_scenario_id(task, cand["scenario_idx"]),
                    session_id=f"s{cand['session_idx']}",
                    individual_id=cand["individual"],
                    label=label,
                    split=split,
                    label_t0=cand["t0"],
                    scenario=asdict(spec),
                )
            )
            jobs.append((str(root), clip_id, spec, cand["traj"], cand["n_frames"], params.fps))

    (root / "traj").mkdir(parents=True, exist_ok=True)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            list(pool.map(_render_one, jobs, chunksize=8))
    else:
        for job in jobs:
            _render_one(job)
    manifest = DatasetManifest(records, seed, chash, config)
    manifest.save(root)
    log.info("generated %d clips for task %s under %s", len(records), task, root)
    return manifest


def dataset_exists(root: str | Path, task: str, counts: dict[str, int], seed: int, params: GenParams = GenParams()) -> bool:
    meta_path = Path(root) / "dataset.json"
    if not meta_path.exists():
        return False
    config = _gen_config(task, counts, seed, params)
    return json.loads(meta_path.read_text()).get("config_hash") == config_hash(config)


# --------------------------------------------------------------------------
# long videos for sliding-window prediction


def build_long_videos(
    task: str,
    n_videos: int,
    duration: float,
    seed: int,
    root: str | Path,
    params: GenParams = GenParams(),
    individuals: Iterable[str] | None = None,
) -> list[dict]:
    root = Path(root)
    layout = TASKS[task]
    inds = list(individuals or layout.individuals)
    out = []
    for i in range(n_videos):
        rng = np.random.default_rng([seed, 7777, i])
        sc = int(rng.integers(len(layout.scenarios)))
        se = int(rng.integers(layout.sessions))
        ind = inds[i % len(inds)]
        spec = session_spec(task, sc, se, params.size)
        model = individual_model(ind, params.size, "waypoint")
        traj = simulate_trajectory(model, spec, duration, params.fps, int(rng.integers(2**31)))
        video_id = f"{task}_video_{i:03d}"
        frames = render_clip(spec, traj, params.fps)
        save_frames(frames, root / "frames" / video_id)
        (root / "traj").mkdir(parents=True, exist_ok=True)
        labelkit.write_trajectory_csv(root / "traj" / f"{video_id}.csv", traj)
        out.append(
            {
                "video_id": video_id,
                "frame_dir": f"frames/{video_id}",
                "n_frames": len(frames),
                "fps": params.fps,
                "scenario_id": _scenario_id(task, sc),
                "session_id": f"s{se}",
                "individual_id": ind,
                "scenario": asdict(spec),
            }
        )
    with open(root / "videos.jsonl", "w") as fh:
        for rec in out:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return out


def load_videos(root: str | Path) -> dict[str, dict]:
    path = Path(root) / "videos.jsonl"
    if not path.exists():
        return {}
    with open(path) as fh:
        recs = [json.loads(line) for line in fh if line.strip()]
    return {r["video_id"]: r for r in recs}


def default_workers() -> int:
    return max(1, min(4, (os.cpu_count() or 1)))
