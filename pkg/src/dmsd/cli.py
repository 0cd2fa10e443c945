"""``dmsd`` command line: gen, train, eval, xmatrix, predict, plot.

Every command resolves its configuration first and writes outputs under the
run directory with fixed file names. Exit codes: 0 success, 1 usage or
missing config, 2 data or artifact error, 3 non-finite loss.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from . import evalkit, labelkit, plotting, synthgen, trainloop

log = logging.getLogger("dmsd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

LOCK_NAME = ".lock"


class UsageError(Exception):
    pass


class ArtifactError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@contextlib.contextmanager
def run_lock(run_dir: Path):
    """Exclusive lock file in ``run_dir``; a lock left by a dead process is taken over."""
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / LOCK_NAME
    for _ in range(2):
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            try:
                pid = int(path.read_text().strip() or 0)
            except (OSError, ValueError):
                pid = 0
            if pid and _alive(pid):
                raise ArtifactError(f"{run_dir} is locked by process {pid}")
            path.unlink(missing_ok=True)
            continue
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        break
    else:
        raise ArtifactError(f"could not lock {run_dir}")
    try:
        yield
    finally:
        path.unlink(missing_ok=True)


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


# --------------------------------------------------------------------------
# config plumbing


def resolve_config(args) -> config_mod.Config:
    src = args.config
    if src not in ("default", "tiny") and not Path(src).exists():
        raise UsageError(f"config file {src} not found")
    cfg = config_mod.load(src, args.set)
    if getattr(args, "ablation", None):
        config_mod.apply_ablation(cfg, args.ablation)
    if args.seed is not None:
        cfg.run.seed = args.seed
        cfg.data.gen_seed = args.seed
    if args.run_dir:
        cfg.run.run_dir = args.run_dir
    if args.data_root:
        cfg.data.root = args.data_root
    return cfg.validate()


def gen_params(cfg: config_mod.Config) -> synthgen.GenParams:
    d = cfg.data
    return synthgen.GenParams(d.image_size, d.native_fps, d.observe_seconds, d.label_rule)


def _checkpoint(args, cfg) -> Path:
    path = Path(args.checkpoint) if args.checkpoint else Path(cfg.run.run_dir) / "checkpoint.best"
    if not path.exists():
        raise ArtifactError(f"checkpoint {path} not found")
    return path


def _data_root(args, ckpt_cfg: config_mod.Config) -> Path:
    return Path(args.data_root or ckpt_cfg.data.root)


# --------------------------------------------------------------------------
# commands


def cmd_gen(args, cfg) -> int:
    root = Path(cfg.data.root)
    task = args.task or cfg.data.task
    counts = dict(cfg.data.counts)
    if args.per_class is not None:
        counts["train"] = args.per_class
    for item in args.counts or []:
        split, _, n = item.partition("=")
        if split not in synthgen.SPLITS or not n.isdigit():
            raise UsageError(f"--counts expects split=N with split in {synthgen.SPLITS}, got {item!r}")
        counts[split] = int(n)
    params = gen_params(cfg)
    seed = cfg.data.gen_seed
    if synthgen.dataset_exists(root, task, counts, seed, params):
        print(f"dataset exists at {root}, config_hash matches; nothing to do")
        manifest = synthgen.DatasetManifest.load(root)
    else:
        manifest = synthgen.build_dataset(task, counts, seed, root, params, workers=args.workers)
    if args.videos:
        synthgen.build_long_videos(task, args.videos, args.duration, seed, root, params)
        print(f"{args.videos} long videos of {args.duration:g} s written to {root / 'videos.jsonl'}")
    print(manifest_summary(manifest))
    return EXIT_OK


def manifest_summary(manifest: synthgen.DatasetManifest) -> str:
    lines = [f"config_hash {manifest.config_hash}  clips {len(manifest.records)}"]
    for split in synthgen.SPLITS:
        recs = manifest.split(split)
        by_label = Counter(r.label.value for r in recs)
        by_scenario = Counter(r.scenario_id for r in recs)
        lines.append(
            f"{split:<5} {len(recs):>4}  "
            + " ".join(f"{lab.value}={by_label.get(lab.value, 0)}" for lab in labelkit.LABELS)
            + "  | "
            + " ".join(f"{k}={v}" for k, v in sorted(by_scenario.items()))
        )
    return "\n".join(lines)


def cmd_train(args, cfg) -> int:
    run_dir = Path(cfg.run.run_dir)
    if args.epochs is not None:
        cfg.optim.epochs = args.epochs
    with run_lock(run_dir):
        if args.finetune_from:
            base = Path(args.finetune_from)
            if not base.exists():
                raise ArtifactError(f"checkpoint {base} not found")
            # the architecture always follows the base checkpoint
            cfg.model = config_mod.from_dict(trainloop.read_checkpoint(base)["config"]).model
            out = trainloop.finetune(cfg, base, cfg.data.root, run_dir, steps=args.steps)
        else:
            out = trainloop.fit(cfg, cfg.data.root, run_dir, resume=args.resume)
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    run_dir = Path(cfg.run.run_dir)
    ckpt = _checkpoint(args, cfg)
    model, _, mcfg = trainloop.load_checkpoint(ckpt)
    root = _data_root(args, mcfg)
    with run_lock(run_dir):
        report = evalkit.evaluate(ckpt, root, args.split, tilt_deg=args.tilt)
        name = f"report_{args.split}" if args.tilt == 0 else f"report_{args.split}_tilt{args.tilt:g}"
        js, _ = evalkit.write_report(report, run_dir, name)
        plotting.confusion_figure(np.asarray(report.confusion), run_dir / f"{name}_confusion.png", name)
        if args.dump_uv:
            dump_uv(model, mcfg, root, args.split, run_dir / f"uv_{args.split}.png")
    print(report.summary(), end="")
    print(f"report written to {js}")
    return EXIT_OK


@torch.no_grad()
def dump_uv(model, cfg, root, split, out_path) -> None:
    """Save the first clip of a split next to its pre-decoupled inputs."""
    rec = synthgen.DatasetManifest.load(root).split(split)[0]
    clips = trainloop.load_clips([rec], root, cfg)
    raw = clips.frames[:1].float() / 255.0
    u, v = model.decoupled(raw)
    plotting.decoupled_grid(raw[0].numpy(), u[0].numpy(), v[0].numpy(), out_path)


def cmd_xmatrix(args, cfg) -> int:
    run_dir = Path(cfg.run.run_dir)
    names = [s for s in args.individuals.split(",") if s]
    if len(names) < 2:
        raise UsageError("--individuals needs at least two ids")
    if args.epochs is not None:
        cfg.optim.epochs = args.epochs
    root = Path(cfg.data.root)
    with run_lock(run_dir):
        checkpoints = {}
        for name in names:
            sub = run_dir / "xmatrix" / f"train_{name}"
            ckpt = sub / "checkpoint.best"
            if not ckpt.exists():
                sub_cfg = cfg.copy()
                sub_cfg.data.individuals = [name]
                trainloop.fit(sub_cfg, root, sub)
            checkpoints[name] = ckpt
        mat, names = evalkit.cross_individual_matrix(checkpoints, root, args.split)
        csv_path, png_path = evalkit.write_matrix(mat, names, run_dir)
    print(f"matrix written to {csv_path} and {png_path}")
    return EXIT_OK


def _predict_clip_dir(model, mcfg, clip_dir: Path) -> dict:
    frames = sorted(clip_dir.glob("frame_*.png"))
    if not frames:
        raise ArtifactError(f"no frame_*.png files in {clip_dir}")
    d = mcfg.data
    u8 = trainloop.sample_frames_u8(clip_dir.parent, clip_dir.name, len(frames), d.frame_size, d.segments, d.frame_stride)
    raw = torch.from_numpy(u8).float()[None] / 255.0
    with torch.no_grad():
        probs = torch.softmax(model(raw)[0].double(), -1)[0]
    return {
        "clip_dir": str(clip_dir),
        "predicted": labelkit.MotionLabel.from_index(int(probs.argmax())).value,
        "probs": [float(p) for p in probs],
    }


def cmd_predict(args, cfg) -> int:
    run_dir = Path(cfg.run.run_dir)
    ckpt = _checkpoint(args, cfg)
    with run_lock(run_dir):
        if args.clip_dir:
            model, _, mcfg = trainloop.load_checkpoint(ckpt)
            clip_dir = Path(args.clip_dir)
            out = run_dir / f"predict_{clip_dir.name}.json"
            out.write_text(json.dumps(_predict_clip_dir(model, mcfg, clip_dir), sort_keys=True, indent=2) + "\n")
        else:
            _, _, mcfg = trainloop.load_checkpoint(ckpt)
            pred, _, _ = evalkit.predict_video(ckpt, _data_root(args, mcfg), args.video, args.stride)
            out = run_dir / f"predict_{args.video}.json"
            out.write_text(pred.to_json())
            print(f"{len(pred.windows)} windows, top-1 {pred.top1:.4f}")
    print(f"prediction written to {out}")
    return EXIT_OK


def cmd_plot(args, cfg) -> int:
    run_dir = Path(cfg.run.run_dir)
    ckpt = _checkpoint(args, cfg)
    _, _, mcfg = trainloop.load_checkpoint(ckpt)
    root = _data_root(args, mcfg)
    with run_lock(run_dir):
        pred, traj, mcfg = evalkit.predict_video(ckpt, root, args.video, args.stride)
        video = synthgen.load_videos(root)[args.video]
        png = run_dir / f"trajectory_{args.video}.png"
        audit = evalkit.render_trajectory_plot(traj, pred, evalkit.video_background(video), png, mcfg.data.label_rule)
        sidecar = json.loads(pred.to_json())
        sidecar["markers"] = audit
        (run_dir / f"trajectory_{args.video}.json").write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    print(f"{audit['windows']} windows, {audit['middle'] + audit['triangles']} markers, {audit['errors']} errors -> {png}")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "xmatrix": cmd_xmatrix,
    "predict": cmd_predict,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="YAML config file or preset name (default, tiny)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--run-dir", default=argparse.SUPPRESS)
    common.add_argument("--data-root", default=argparse.SUPPRESS)
    common.add_argument("--set", action="append", default=argparse.SUPPRESS, metavar="SECTION.KEY=VALUE")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = _Parser(prog="dmsd", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--task", choices=sorted(synthgen.TASKS))
    g.add_argument("--per-class", type=int, help="training clips per class")
    g.add_argument("--counts", nargs="*", metavar="SPLIT=N", help="clips per class for any split")
    g.add_argument("--videos", type=int, default=0, help="also write this many long videos")
    g.add_argument("--duration", type=float, default=30.0, help="long video duration in seconds")
    g.add_argument("--workers", type=int, default=1)

    t = sub.add_parser("train", parents=[common], help="train or finetune a model")
    t.add_argument("--ablation", choices=sorted(config_mod.ABLATIONS))
    t.add_argument("--finetune-from", metavar="CHECKPOINT")
    t.add_argument("--epochs", type=int)
    t.add_argument("--steps", type=int, help="finetune steps")
    t.add_argument("--resume", action="store_true")

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint on a split")
    e.add_argument("--split", default="test", choices=synthgen.SPLITS)
    e.add_argument("--checkpoint")
    e.add_argument("--tilt", type=float, default=0.0, help="camera tilt in degrees for the perspective stress test")
    e.add_argument("--dump-uv", action="store_true", help="save the pre-decoupled inputs of one clip")

    x = sub.add_parser("xmatrix", parents=[common], help="cross-individual train/test matrix")
    x.add_argument("--individuals", required=True, help="comma separated ids, e.g. A,B,C")
    x.add_argument("--split", default="test", choices=synthgen.SPLITS)
    x.add_argument("--epochs", type=int)

    for name, helptext in (("predict", "sliding-window prediction"), ("plot", "trajectory figure")):
        q = sub.add_parser(name, parents=[common], help=helptext)
        src = q.add_mutually_exclusive_group(required=True)
        src.add_argument("--video", help="generated long video id")
        if name == "predict":
            src.add_argument("--clip-dir", help="directory of frame_*.png files")
        q.add_argument("--checkpoint")
        q.add_argument("--stride", type=float, default=3.0)
    return p


_DEFAULTS = {"config": "default", "seed": None, "run_dir": None, "data_root": None, "set": [], "verbose": False}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for key, value in _DEFAULTS.items():
        if not hasattr(args, key):
            setattr(args, key, value)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except (UsageError, FileNotFoundError, ValueError) as exc:
        parser.print_usage(sys.stderr)
        print(f"dmsd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"dmsd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except trainloop.NonFiniteLossError as exc:
        print(f"dmsd: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (
        trainloop.DataError,
        trainloop.IncompatibleCheckpointError,
        synthgen.GenerationFailure,
        ArtifactError,
        OSError,
        ValueError,
    ) as exc:
        print(f"dmsd: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
