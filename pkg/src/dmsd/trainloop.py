"""Alternating optimization of the decoupling and classification objectives.

Every iteration runs two sub-steps on the same batch:

A. ``L_f = lambda_s * L_sc + lambda_m * L_mc`` updates the backbone (theta)
   and the cluster centers (r); the predictor head (omega) is untouched.
B. ``L_cls`` updates theta and omega; the centers are untouched.

Sub-step A is skipped when both decoupling losses are switched off.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from . import config as config_mod
from .backbone import DMSDNet
from .config import Config
from . import labelkit
from .labelkit import LABELS, NUM_CLASSES, LabelRuleConfig
from .losses import ClusterBank, classification_loss, motion_clustering_loss, scenario_contrast_loss
from .synthgen import ClipRecord, DatasetManifest, frame_path

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class DataError(RuntimeError):
    pass


class NonFiniteLossError(RuntimeError):
    def __init__(self, batch_id: str, values: dict):
        super().__init__(f"non-finite loss on batch {batch_id}: {values}")
        self.batch_id = batch_id
        self.values = values


class IncompatibleCheckpointError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# frame sampling


def sample_indices(n_frames: int, segments: int = 8, stride: int = 8) -> list[int]:
    """Every ``stride``-th frame, the last ``segments`` of them, anchored at the final frame."""
    if n_frames < segments * stride:
        raise DataError(f"need at least {segments * stride} frames, got {n_frames}")
    return [n_frames - 1 - stride * (segments - 1 - i) for i in range(segments)]


def _load_frame(path: Path, size: int) -> np.ndarray:
    if not path.exists():
        raise DataError(f"missing frame file {path}")
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size, size):
            im = im.resize((size, size), Image.Resampling.BILINEAR)
        return np.asarray(im, dtype=np.uint8)


def sample_frames_u8(
    root: str | Path, frame_dir: str, n_frames: int, frame_size: int, segments: int = 8, stride: int = 8
) -> np.ndarray:
    """Sampled frames as uint8 ``(T, 3, S, S)``."""
    idx = sample_indices(n_frames, segments, stride)
    frames = [_load_frame(frame_path(root, frame_dir, i), frame_size) for i in idx]
    return np.stack(frames).transpose(0, 3, 1, 2).copy()


def sample_clip_frames(
    clip: ClipRecord, root: str | Path, frame_size: int = 224, segments: int = 8, stride: int = 8, norm: dict | None = None
) -> np.ndarray:
    """Float ``(T, 3, S, S)`` clip tensor; values in [0, 1] unless ``norm`` is given."""
    if clip.n_frames < segments * stride:
        raise DataError(f"clip {clip.clip_id} has {clip.n_frames} frames, needs {segments * stride}")
    raw = sample_frames_u8(root, clip.frame_dir, clip.n_frames, frame_size, segments, stride).astype(np.float32) / 255.0
    if norm is None:
        return raw
    mean = np.asarray(norm["x_mean"], dtype=np.float32)[:, None, None]
    std = np.asarray(norm["x_std"], dtype=np.float32)[:, None, None]
    return (raw - mean) / std


@dataclass
class ClipSet:
    """Sampled frames and metadata for a list of clips, kept in memory as uint8."""

    records: list[ClipRecord]
    frames: torch.Tensor  # N, T, 3, S, S uint8
    labels: torch.Tensor
    index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.index = {r.clip_id: i for i, r in enumerate(self.records)}

    def __len__(self):
        return len(self.records)

    def batch(self, clip_ids: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor, dict]:
        idx = [self.index[c] for c in clip_ids]
        raw = self.frames[idx].float() / 255.0
        recs = [self.records[i] for i in idx]
        meta = {
            "scenario_id": [r.scenario_id for r in recs],
            "session_id": [r.session_id for r in recs],
            "label": self.labels[idx],
        }
        return raw, self.labels[idx], meta


def load_clips(records: Sequence[ClipRecord], root: str | Path, cfg: Config) -> ClipSet:
    d = cfg.data
    missing = [r.clip_id for r in records if not (Path(root) / r.frame_dir).is_dir()]
    if missing:
        raise DataError(f"missing clip directories: {missing[:10]}{' ...' if len(missing) > 10 else ''}")
    if records:
        frames = np.stack(
            [sample_frames_u8(root, r.frame_dir, r.n_frames, d.frame_size, d.segments, d.frame_stride) for r in records]
        )
    else:
        frames = np.zeros((0, d.segments, 3, d.frame_size, d.frame_size), dtype=np.uint8)
    labels = torch.tensor([r.label.index for r in records], dtype=torch.long)
    return ClipSet(list(records), torch.from_numpy(frames), labels)


def compute_norm(clips: ClipSet, min_std: float = 1e-3) -> dict:
    """Per-channel mean/std of raw frames and of frame differences ``I_t - I_0``."""
    raw = clips.frames.double() / 255.0
    diff = raw - raw[:, :1]
    dims = (0, 1, 3, 4)
    return {
        "x_mean": [float(v) for v in raw.mean(dims)],
        "x_std": [float(max(v, min_std)) for v in raw.std(dims)],
        "dx_mean": [float(v) for v in diff.mean(dims)],
        "dx_std": [float(max(v, min_std)) for v in diff.std(dims)],
    }


# --------------------------------------------------------------------------
# augmentation

# pixel-space maps of a displacement (dx, dy): (transpose, flip x, flip y)
DIHEDRAL = [(t, fx, fy) for t in (False, True) for fx in (False, True) for fy in (False, True)]


def _map_vector(dx: float, dy: float, op) -> tuple[float, float]:
    t, fx, fy = op
    if t:
        dx, dy = dy, dx
    return (-dx if fx else dx), (-dy if fy else dy)


def label_permutation(op, cfg: LabelRuleConfig = LabelRuleConfig()) -> list[int]:
    """Where each class index goes when a clip is transformed by ``op``.

    Derived by mapping every sector's center direction through the pixel
    transform and labelling the result, so it holds for either axis convention.
    """
    out = []
    for lab in LABELS:
        if lab is labelkit.MotionLabel.MIDDLE:
            out.append(lab.index)
            continue
        # pick the pixel direction whose label is ``lab``
        theta = next(
            a for a in np.linspace(0, 2 * math.pi, 8, endpoint=False) + math.pi / 8
            if labelkit.assign_label(labelkit.MotionVector(a, 2.0), 1.0, cfg) is lab
        )
        dx, dy = _map_vector(math.cos(theta), math.sin(theta), op)
        vec = labelkit.MotionVector(labelkit.canonical_angle(math.atan2(dy, dx)), 2.0)
        out.append(labelkit.assign_label(vec, 1.0, cfg).index)
    return out


def apply_dihedral(raw: torch.Tensor, op) -> torch.Tensor:
    """Transform ``(..., H, W)`` frames; x runs along W and y along H."""
    t, fx, fy = op
    if t:
        raw = raw.transpose(-1, -2)
    if fx:
        raw = raw.flip(-1)
    if fy:
        raw = raw.flip(-2)
    return raw


def augment_batch(raw: torch.Tensor, labels: torch.Tensor, rng: np.random.Generator, cfg: LabelRuleConfig):
    """Random flip/transpose per clip with the label moved accordingly."""
    raw, labels = raw.clone(), labels.clone()
    for i, k in enumerate(rng.integers(len(DIHEDRAL), size=len(labels))):
        op = DIHEDRAL[int(k)]
        raw[i] = apply_dihedral(raw[i], op).clone()
        labels[i] = label_permutation(op, cfg)[int(labels[i])]
    return raw, labels


# --------------------------------------------------------------------------
# batch planning


def make_batch_plan(records: Sequence[ClipRecord], cfg: Config, epoch_seed) -> list[list[str]]:
    """Ordered clip-id batches for one epoch.

    With the scenario contrast loss on, clips are paired within their
    ``(scenario_id, session_id)`` group and pairs are never split across
    batches; an odd group contributes one triple. Every clip appears once.
    """
    rng = np.random.default_rng(epoch_seed)
    bs = cfg.optim.batch_size
    ids = [r.clip_id for r in records]
    if not cfg.losses.use_sc:
        order = rng.permutation(len(ids))
        return [[ids[i] for i in order[k : k + bs]] for k in range(0, len(ids), bs)]

    groups: dict[tuple, list[str]] = {}
    for r in records:
        groups.setdefault((r.scenario_id, r.session_id), []).append(r.clip_id)
    if any(len(g) < 2 for g in groups.values()):
        lonely = sorted(k for k, g in groups.items() if len(g) < 2)
        raise ValueError(
            f"groups {lonely} have a single clip and cannot form positive pairs; "
            "regenerate the data with more clips per session or disable use_sc"
        )
    if len(groups) < 2:
        raise ValueError("the scenario contrast loss needs at least two (scenario, session) groups")
    units: list[tuple[tuple, list[str]]] = []
    for key in sorted(groups):
        members = [groups[key][i] for i in rng.permutation(len(groups[key]))]
        pairs = [members[i : i + 2] for i in range(0, len(members) - 1, 2)]
        if len(members) % 2:
            pairs[-1].append(members[-1])
        units.extend((key, p) for p in pairs)
    units = [units[i] for i in rng.permutation(len(units))]

    batches: list[list[tuple[tuple, list[str]]]] = [[]]
    for unit in units:
        size = sum(len(u[1]) for u in batches[-1])
        if batches[-1] and size + len(unit[1]) > bs:
            batches.append([])
        batches[-1].append(unit)
    # a batch drawn from a single group has no negatives; fold it into a neighbour
    while len(batches) > 1:
        lonely = [i for i, b in enumerate(batches) if len({u[0] for u in b}) < 2]
        if not lonely:
            break
        i = lonely[0]
        j = i - 1 if i > 0 else 1
        batches[j].extend(batches.pop(i))
    return [[cid for _, pair in batch for cid in pair] for batch in batches if batch]


def contrast_feasible(records: Sequence[ClipRecord]) -> bool:
    """Every clip has a same-group companion and at least two groups exist."""
    groups: dict[tuple, int] = {}
    for r in records:
        key = (r.scenario_id, r.session_id)
        groups[key] = groups.get(key, 0) + 1
    return len(groups) >= 2 and all(n >= 2 for n in groups.values())


# --------------------------------------------------------------------------
# training


def param_hash(params: Sequence[torch.Tensor]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class Trainer:
    """Owns the model, the cluster bank and the two optimizers."""

    def __init__(self, cfg: Config, norm: dict | None = None):
        self.cfg = cfg
        torch.manual_seed(cfg.run.seed)
        self.model = DMSDNet(cfg.model, norm)
        self.bank = ClusterBank(cfg.model.feature_dim, cfg.model.num_centers, cfg.model.center_init_scale)
        o = cfg.optim
        lr_f = o.lr_backbone if o.lr_backbone_f is None else o.lr_backbone_f
        self.opt_f = torch.optim.SGD(
            [
                {"params": self.model.backbone_parameters(), "lr": lr_f},
                {"params": list(self.bank.parameters()), "lr": o.lr_centers},
            ],
            lr=lr_f,
            momentum=o.momentum,
            weight_decay=o.weight_decay,
        )
        self.opt_cls = torch.optim.SGD(
            [
                {"params": self.model.backbone_parameters(), "lr": o.lr_backbone},
                {"params": self.model.head_parameters(), "lr": o.lr_head},
            ],
            lr=o.lr_backbone,
            momentum=o.momentum,
            weight_decay=o.weight_decay,
        )
        self.step = 0
        self.epoch = 0
        self.freeze_bn = False

    def scale_lr(self, factor: float) -> None:
        for opt in (self.opt_f, self.opt_cls):
            for group in opt.param_groups:
                group["lr"] *= factor

    def theta(self) -> list[torch.Tensor]:
        return self.model.backbone_parameters()

    def omega(self) -> list[torch.Tensor]:
        return self.model.head_parameters()

    def r(self) -> list[torch.Tensor]:
        return list(self.bank.parameters())

    def _train_mode(self):
        self.model.train()
        if self.freeze_bn:
            for mod in self.model.modules():
                if isinstance(mod, torch.nn.modules.batchnorm._BatchNorm):
                    mod.eval()

    def _check(self, batch_id: str, values: dict) -> None:
        if not all(math.isfinite(v) for v in values.values()):
            raise NonFiniteLossError(batch_id, values)

    def substep_f(self, raw, labels, meta, batch_id="?") -> dict:
        lc = self.cfg.losses
        self._train_mode()
        self.opt_f.zero_grad(set_to_none=True)
        feats = self.model.features(raw)
        l_sc = scenario_contrast_loss(
            feats["s"], meta["scenario_id"], meta["session_id"], lc.temperature, lc.include_positive
        ) if lc.use_sc else feats["s"].new_zeros(())
        l_mc = motion_clustering_loss(feats["m"], labels, self.bank) if lc.use_mc else feats["m"].new_zeros(())
        l_f = lc.lambda_s * l_sc + lc.lambda_m * l_mc
        values = {"L_sc": l_sc.item(), "L_mc": l_mc.item(), "L_f": l_f.item()}
        self._check(batch_id, values)
        l_f.backward()
        if self.cfg.optim.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.theta() + self.r(), self.cfg.optim.grad_clip)
        self.opt_f.step()
        return values

    def substep_cls(self, raw, labels, batch_id="?") -> dict:
        self._train_mode()
        self.opt_cls.zero_grad(set_to_none=True)
        logits, _, _ = self.model(raw)
        l_cls = classification_loss(logits, labels)
        values = {"L_cls": l_cls.item()}
        self._check(batch_id, values)
        l_cls.backward()
        if self.cfg.optim.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.theta() + self.omega(), self.cfg.optim.grad_clip)
        self.opt_cls.step()
        values["correct"] = int((logits.detach().argmax(1) == labels).sum())
        return values

    def train_step(self, raw: torch.Tensor, labels: torch.Tensor, meta: dict, batch_id: str = "?") -> dict:
        """One alternating iteration; returns the loss record for the metrics log."""
        lc = self.cfg.losses
        record = {"step": self.step, "L_cls": 0.0, "L_sc": 0.0, "L_mc": 0.0, "L_f": 0.0}
        if lc.use_sc or lc.use_mc:
            record.update(self.substep_f(raw, labels, meta, batch_id))
        record.update(self.substep_cls(raw, labels, batch_id))
        self.step += 1
        return record

    # checkpoints -----------------------------------------------------------

    def state(self, extra: dict | None = None) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "norm": self.cfg.data.norm,
            "model": self.model.state_dict(),
            "bank": self.bank.state_dict(),
            "opt_f": self.opt_f.state_dict(),
            "opt_cls": self.opt_cls.state_dict(),
            "step": self.step,
            "epoch": self.epoch,
            **(extra or {}),
        }

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        torch.save(self.state(extra), tmp)
        tmp.replace(path)

    def load_state(self, state: dict, optimizers: bool = True) -> None:
        self.model.load_state_dict(state["model"])
        self.bank.load_state_dict(state["bank"])
        if optimizers:
            self.opt_f.load_state_dict(state["opt_f"])
            self.opt_cls.load_state_dict(state["opt_cls"])
            self.step = state["step"]
            self.epoch = state["epoch"]


def read_checkpoint(path: str | Path) -> dict:
    state = torch.load(path, map_location="cpu", weights_only=False)
    if "version" not in state:
        raise IncompatibleCheckpointError(f"{path} has no version field")
    if state["version"] != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(f"{path} has version {state['version']}, expected {CHECKPOINT_VERSION}")
    return state


def load_checkpoint(path: str | Path) -> tuple[DMSDNet, ClusterBank, Config]:
    state = read_checkpoint(path)
    cfg = config_mod.from_dict(state["config"])
    trainer = Trainer(cfg, state["norm"])
    trainer.load_state(state, optimizers=False)
    trainer.model.eval()
    return trainer.model, trainer.bank, cfg


@torch.no_grad()
def predict_logits(model: DMSDNet, clips: ClipSet, batch_size: int = 32) -> torch.Tensor:
    model.eval()
    out = []
    for k in range(0, len(clips), batch_size):
        raw = clips.frames[k : k + batch_size].float() / 255.0
        out.append(model(raw)[0])
    return torch.cat(out) if out else torch.zeros(0, NUM_CLASSES)


def top1(model: DMSDNet, clips: ClipSet) -> float:
    if len(clips) == 0:
        return float("nan")
    pred = predict_logits(model, clips).argmax(1)
    return float((pred == clips.labels).float().mean())


class MetricsLog:
    def __init__(self, path: str | Path, append: bool = False):
        self.path = Path(path)
        if not append:
            self.path.write_text("")

    def write(self, record: dict) -> None:
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_metrics_log(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def resolve_norm(cfg: Config, train: ClipSet) -> Config:
    if cfg.data.norm is None:
        cfg = cfg.copy()
        cfg.data.norm = compute_norm(train)
    return cfg


def fit(cfg: Config, data_root: str | Path | None = None, run_dir: str | Path | None = None, resume: bool = False) -> dict:
    """Train for ``cfg.optim.epochs`` epochs and write the run directory.

    Writes ``config.resolved``, ``metrics.log``, ``checkpoint.best`` and
    ``checkpoint.last``. Returns a summary with the final and best
    validation top-1.
    """
    cfg = cfg.copy()
    root = Path(data_root or cfg.data.root)
    run_dir = Path(run_dir or cfg.run.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest.load(root)
    keep = None if cfg.data.individuals is None else set(cfg.data.individuals)
    train_recs, val_recs = (
        [r for r in manifest.split(s) if keep is None or r.individual_id in keep] for s in ("train", "val")
    )
    if not train_recs:
        raise DataError(f"no training clips under {root}")
    train = load_clips(train_recs, root, cfg)
    val = load_clips(val_recs, root, cfg)
    cfg = resolve_norm(cfg, train)
    if cfg.losses.use_sc and not contrast_feasible(train_recs):
        log.warning("training split cannot form contrast pairs; scenario contrast loss disabled")
        cfg.losses.use_sc = False
    cfg.data.root = str(root)
    cfg.run.run_dir = str(run_dir)
    config_mod.dump(cfg, run_dir / "config.resolved")

    trainer = Trainer(cfg, cfg.data.norm)
    best = {"val_top1": -1.0, "epoch": -1}
    last_ckpt = run_dir / "checkpoint.last"
    if resume and last_ckpt.exists():
        state = read_checkpoint(last_ckpt)
        trainer.load_state(state)
        best = state.get("best", best)
        mlog = MetricsLog(run_dir / "metrics.log", append=True)
    else:
        mlog = MetricsLog(run_dir / "metrics.log")
        trainer.save(run_dir / "checkpoint.best", {"best": best})
        trainer.save(last_ckpt, {"best": best})

    while trainer.epoch < cfg.optim.epochs:
        epoch = trainer.epoch
        plan = make_batch_plan(train.records, cfg, [cfg.run.seed, epoch])
        totals = {"L_cls": 0.0, "L_sc": 0.0, "L_mc": 0.0, "L_f": 0.0}
        correct = 0
        for b, clip_ids in enumerate(plan):
            raw, labels, meta = train.batch(clip_ids)
            if cfg.data.augment:
                raw, labels = augment_batch(raw, labels, np.random.default_rng([cfg.run.seed, epoch, b]), cfg.data.label_rule)
                meta["label"] = labels
            rec = trainer.train_step(raw, labels, meta, batch_id=f"epoch{epoch}/batch{b}")
            correct += rec.pop("correct")
            for k in totals:
                totals[k] += rec[k] * len(clip_ids)
            mlog.write({"kind": "step", "epoch": epoch, **rec})
        trainer.epoch += 1
        val_top1 = top1(trainer.model, val) if len(val) else float("nan")
        epoch_rec = {
            "kind": "epoch",
            "epoch": epoch,
            "train_top1_running": correct / max(1, len(train)),
            "val_top1": val_top1,
            **{k: v / max(1, len(train)) for k, v in totals.items()},
        }
        mlog.write(epoch_rec)
        log.info("epoch %d %s", epoch, epoch_rec)
        if len(val) and val_top1 > best["val_top1"]:
            best = {"val_top1": val_top1, "epoch": epoch}
            trainer.save(run_dir / "checkpoint.best", {"best": best})
        trainer.save(last_ckpt, {"best": best})
    if not len(val):
        trainer.save(run_dir / "checkpoint.best", {"best": best})
    return {"run_dir": str(run_dir), "best": best, "epochs": trainer.epoch, "steps": trainer.step}


def finetune(
    cfg: Config,
    base_checkpoint: str | Path,
    data_root: str | Path,
    run_dir: str | Path,
    steps: int | None = None,
) -> dict:
    """Adapt a trained model to the few-shot challenging split.

    Learning rates are scaled by ``cfg.optim.finetune_lr_scale`` and batch
    norm statistics stay frozen, so a zero learning rate leaves the model
    exactly as loaded.
    """
    state = read_checkpoint(base_checkpoint)
    base_cfg = config_mod.from_dict(state["config"])
    if base_cfg.model != cfg.model:
        raise IncompatibleCheckpointError("checkpoint architecture differs from the requested model config")
    root = Path(data_root)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest.load(root)
    records = manifest.split("train")
    if len(records) != NUM_CLASSES:
        warnings.warn(
            f"finetune split has {len(records)} clips; the few-shot protocol uses exactly one per class",
            stacklevel=2,
        )
    cfg = cfg.copy()
    cfg.data.norm = state["norm"]
    cfg.run.finetune_from = str(base_checkpoint)
    train = load_clips(records, root, cfg)
    if cfg.losses.use_sc and not contrast_feasible(records):
        log.warning("finetune split cannot form contrast pairs; scenario contrast loss disabled")
        cfg.losses.use_sc = False
    config_mod.dump(cfg, run_dir / "config.resolved")

    trainer = Trainer(cfg, cfg.data.norm)
    trainer.load_state(state, optimizers=False)
    trainer.scale_lr(cfg.optim.finetune_lr_scale)
    trainer.freeze_bn = True
    mlog = MetricsLog(run_dir / "metrics.log")
    raw, labels, meta = train.batch([r.clip_id for r in records])
    n_steps = cfg.optim.finetune_steps if steps is None else steps
    for i in range(n_steps):
        if cfg.data.augment:
            raw_i, labels_i = augment_batch(raw, labels, np.random.default_rng([cfg.run.seed, i]), cfg.data.label_rule)
            rec = trainer.train_step(raw_i, labels_i, dict(meta, label=labels_i), batch_id=f"finetune/{i}")
        else:
            rec = trainer.train_step(raw, labels, meta, batch_id=f"finetune/{i}")
        rec.pop("correct")
        mlog.write({"kind": "step", **rec})
    trainer.epoch = 1
    train_top1 = top1(trainer.model, train)
    mlog.write({"kind": "epoch", "epoch": 0, "train_top1": train_top1})
    trainer.save(run_dir / "checkpoint.last", {"best": {"train_top1": train_top1}})
    trainer.save(run_dir / "checkpoint.best", {"best": {"train_top1": train_top1}})
    return {"run_dir": str(run_dir), "train_top1": train_top1, "steps": n_steps}
