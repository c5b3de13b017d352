"""Command line: ``sarinterp {data,graph,train,infer,eval} ...``.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import dataio
from .depgraph import build_graph, export_dot, load_schedule, save_schedule, topological_schedule
from .errors import InvalidInputError, SarError
from .metrics import REPORT_COLUMNS, evaluate, mean_report
from .model import ModelConfig, load_model
from .motion import Motion, Skeleton, default_skeleton, load_skeleton, save_skeleton
from .training import TrainConfig, train

log = logging.getLogger("sarinterp")


class DataError(SarError):
    pass


def _keyframes(text: str) -> list[int]:
    try:
        return [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"keyframes must be comma-separated integers: {text!r}") from None


def _graph_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--schedule", choices=["ar", "binary", "three-stage"], default="three-stage",
                   help="dependency graph family (default: three-stage)")
    p.add_argument("--frames", type=int, help="number of interior frames T to generate (required)")
    p.add_argument("--keyframes", type=_keyframes, default=None,
                   help="three-stage only: comma-separated keyframe positions, e.g. 1,9,19,29")
    p.add_argument("--no-smoothing", action="store_true",
                   help="drop the smoothing stage from the three-stage graph")
    p.add_argument("--smoothing", action="store_true",
                   help="add a smoothing stage to the ar/binary graphs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sarinterp", description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path,
                        help="JSON file of flag defaults (keys are flag names with '_'); flags win")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    data = sub.add_parser("data", help="prepare datasets").add_subparsers(dest="action", required=True)
    p = data.add_parser("synth", help="generate synthetic motions with a 70/10/20 manifest")
    p.add_argument("--n", type=int, default=240, help="number of sequences (default 240)")
    p.add_argument("--joints", type=int, default=4, help="joints per pose (default 4)")
    p.add_argument("--length", type=int, default=31, help="frames per sequence (default 31)")
    p.add_argument("--fps", type=float, default=30.0, help="framerate (default 30)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p = data.add_parser("slice", help="cut motion files into windows with a 70/10/20 manifest")
    p.add_argument("inputs", nargs="+", type=Path, help="motion JSON files")
    p.add_argument("--window", type=int, default=dataio.DEFAULT_WINDOW, help="window length (default 31)")
    p.add_argument("--stride", type=int, default=dataio.DEFAULT_STRIDE, help="window stride (default 15)")
    p.add_argument("--fps-threshold", type=float, default=dataio.FPS_THRESHOLD,
                   help="framerate at which downsampled 2x windows are added (default 60)")
    p.add_argument("--seed", type=int, default=0, help="split seed (default 0)")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    graph = sub.add_parser("graph", help="dependency graphs and schedules").add_subparsers(
        dest="action", required=True)
    p = graph.add_parser("build", help="write schedule.json and graph.dot")
    _graph_flags(p)
    p.add_argument("--out", type=Path, default=Path("."), help="output directory (default .)")
    p = graph.add_parser("export", help="write the graph as Graphviz DOT")
    _graph_flags(p)
    p.add_argument("--out", default="-", help="DOT file path, '-' for stdout (default)")

    p = sub.add_parser("train", help="two-step training")
    p.add_argument("--data", type=Path, help="dataset manifest JSON (required)")
    p.add_argument("--schedule", type=Path, help="schedule JSON from 'graph build' (required)")
    p.add_argument("--model-config", type=Path,
                   help="model config JSON; J and N default to the data and schedule")
    p.add_argument("--steps1", type=int, default=20000, help="teacher-forcing steps (default 20000)")
    p.add_argument("--steps2", type=int, default=5000,
                   help="smoothing fine-tuning steps (default 5000; 0 = no-smoothing ablation)")
    p.add_argument("--lr", type=float, default=1e-4, help="Adam learning rate (default 1e-4)")
    p.add_argument("--batch-size", type=int, default=16, help="batch size (default 16)")
    p.add_argument("--log-every", type=int, default=100, help="loss report cadence (default 100)")
    p.add_argument("--seed", type=int, default=0, help="seed for init and batching (default 0)")
    p.add_argument("--resume", type=Path, help="checkpoint to resume from")
    p.add_argument("--out", type=Path, help="output directory (required)")

    p = sub.add_parser("infer", help="generate in-between frames")
    p.add_argument("--method", choices=["sar", "sar-nosmooth", "slerp"], default="sar",
                   help="generator (default sar)")
    p.add_argument("--checkpoint", type=Path, help="model checkpoint (not needed for slerp)")
    p.add_argument("--schedule", type=Path,
                   help="schedule JSON (default: schedule.json next to the checkpoint)")
    p.add_argument("--input", type=Path, nargs="+",
                   help="ground-truth motions; their first and last frames are the given poses")
    p.add_argument("--start", type=Path, help="single-frame motion JSON holding the start pose")
    p.add_argument("--end", type=Path, help="single-frame motion JSON holding the end pose")
    p.add_argument("--frames", type=int, help="T, with --start/--end")
    p.add_argument("--out", type=Path, required=True,
                   help="output directory for --input, output file for --start/--end")

    p = sub.add_parser("eval", help="metrics report CSV")
    p.add_argument("--gt", type=Path, required=True, help="directory of ground-truth motions")
    p.add_argument("--pred", action="append", required=True, metavar="NAME=DIR",
                   help="named directory of generated motions; repeatable")
    p.add_argument("--skeleton", type=Path, help="skeleton JSON (default: built-in 22-joint body)")
    p.add_argument("--out", default="-", help="report CSV path, '-' for stdout (default)")
    return parser


def _parse(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        try:
            defaults = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as e:
            parser.error(f"cannot read --config {args.config}: {e}")
        # re-parse with the file's values as defaults so explicit flags win
        for action in parser._subparsers._group_actions:
            sub = action.choices[args.command]
            target = sub
            if getattr(args, "action", None) and sub._subparsers is not None:
                target = sub._subparsers._group_actions[0].choices[args.action]
            target.set_defaults(**{k.replace("-", "_"): v for k, v in defaults.items()})
        args = parser.parse_args(argv)
    return parser, args


def _graph_from_args(parser, args):
    if args.frames is None:
        parser.error("--frames is required")
    if args.keyframes and args.schedule != "three-stage":
        parser.error("--keyframes only applies to --schedule three-stage")
    if args.no_smoothing and args.smoothing:
        parser.error("--smoothing and --no-smoothing are exclusive")
    smoothing = False if args.no_smoothing else (True if args.smoothing else None)
    try:
        return build_graph(args.schedule, args.frames, args.keyframes or (), smoothing)
    except InvalidInputError as e:
        parser.error(str(e))


def cmd_graph(parser, args) -> int:
    g = _graph_from_args(parser, args)
    if args.action == "export":
        text = export_dot(g)
        if args.out == "-":
            sys.stdout.write(text)
        else:
            Path(args.out).write_text(text)
        return 0
    s = topological_schedule(g)
    args.out.mkdir(parents=True, exist_ok=True)
    save_schedule(s, args.out / "schedule.json")
    (args.out / "graph.dot").write_text(export_dot(g))
    print(f"levels: {len(s.levels)}")
    print("order: " + " ".join(map(str, s.order)))
    return 0


def cmd_data(parser, args) -> int:
    out = args.out
    (out / "motions").mkdir(parents=True, exist_ok=True)
    if args.action == "synth":
        motions = dataio.synth_generate(args.n, args.joints, args.length, args.fps, args.seed)
        items = [(f"motions/{i:05d}.json", m) for i, m in enumerate(motions)]
        save_skeleton(Skeleton.chain(args.joints), out / "skeleton.json")
        splits = dataio.split_dataset(items, seed=args.seed, group=lambda x: x[0])
    else:
        items = []
        for path in args.inputs:
            motion = dataio.load_motion(path)
            for k, w in enumerate(dataio.slice_windows(motion, args.window, args.stride, args.fps_threshold)):
                items.append((f"motions/{path.stem}_{k:04d}.json", w, path))
        splits = dataio.split_dataset(items, seed=args.seed, group=lambda x: x[2])
    entries = []
    for name, split in zip(("train", "val", "test"), splits):
        for item in split:
            dataio.save_motion(item[1], out / item[0])
            entries.append((item[0], name))
    entries.sort()
    dataio.write_manifest(entries, out / "manifest.json")
    print(f"wrote {len(entries)} motions to {out}")
    return 0


def _load_split(manifest: Path, split: str) -> list[Motion]:
    return [dataio.load_motion(p) for p, s in dataio.read_manifest(manifest) if s == split]


def cmd_train(parser, args) -> int:
    for flag in ("data", "schedule", "out"):
        if getattr(args, flag) is None:
            parser.error(f"--{flag} is required")
    for path in (args.data, args.schedule, args.model_config):
        if path is not None and not path.exists():
            raise DataError(f"file not found: {path}")
    schedule = load_schedule(args.schedule)
    train_m = _load_split(args.data, "train")
    if not train_m:
        raise DataError(f"{args.data}: no 'train' entries")
    val_m = _load_split(args.data, "val")
    cfg = json.loads(args.model_config.read_text()) if args.model_config else {}
    cfg.setdefault("J", train_m[0].n_joints)
    cfg.setdefault("N", schedule.n_positions)
    model_config = ModelConfig.from_json(cfg)
    try:
        data = dataio.stack(train_m)
        val = dataio.stack(val_m) if val_m else None
    except SarError as e:
        raise DataError(f"{args.data}: {e}") from None
    if data.shape[1] != schedule.n_positions:
        raise DataError(f"motions have {data.shape[1]} frames, schedule needs {schedule.n_positions}")
    config = TrainConfig(batch_size=args.batch_size, steps1=args.steps1, steps2=args.steps2,
                         lr=args.lr, seed=args.seed, log_every=args.log_every,
                         checkpoint_dir=str(args.out))
    _, result = train(data, schedule, model_config, config, val_data=val,
                      resume=args.resume, log_path=args.out / "loss_log.csv")
    finals = {split: loss for _, split, loss, _ in result.log}
    for split in sorted(finals):
        print(f"final {split} loss: {finals[split]:.6g}")
    print(f"checkpoint: {result.checkpoint}")
    return 0


def _motion_pose(path: Path):
    m = dataio.load_motion(path)
    if m.n_frames < 1:
        raise DataError(f"{path}: no frames")
    return m


def cmd_infer(parser, args) -> int:
    from .inference import generate_motion

    if bool(args.input) == bool(args.start or args.end):
        parser.error("give either --input or both --start and --end")
    if args.input is None and (args.start is None or args.end is None or args.frames is None):
        parser.error("--start, --end and --frames go together")
    model = schedule = None
    if args.method != "slerp":
        if args.checkpoint is None:
            parser.error(f"--method {args.method} needs --checkpoint")
        sched_path = args.schedule or args.checkpoint.parent / "schedule.json"
        if not args.checkpoint.exists() or not sched_path.exists():
            raise DataError(f"checkpoint or schedule missing: {args.checkpoint}, {sched_path}")
        model = load_model(args.checkpoint)
        schedule = load_schedule(sched_path)
        if model.config.N != schedule.n_positions:
            raise DataError(f"checkpoint expects N={model.config.N}, schedule has {schedule.n_positions}")

    if args.input is None:
        start, end = _motion_pose(args.start), _motion_pose(args.end)
        out = generate_motion(args.method, start.frames[0], end.frames[-1], args.frames,
                              start.fps, model, schedule)
        args.out.parent.mkdir(parents=True, exist_ok=True)
        dataio.save_motion(out, args.out)
        return 0
    args.out.mkdir(parents=True, exist_ok=True)
    for path in args.input:
        gt = _motion_pose(path)
        if gt.n_frames < 2:
            raise DataError(f"{path}: need at least the two given frames")
        out = generate_motion(args.method, gt.frames[0], gt.frames[-1], gt.n_frames - 2,
                              gt.fps, model, schedule)
        dataio.save_motion(out, args.out / path.name)
    print(f"wrote {len(args.input)} motions to {args.out}")
    return 0


def cmd_eval(parser, args) -> int:
    skeleton = load_skeleton(args.skeleton) if args.skeleton else default_skeleton()
    gt_files = {p.name: p for p in sorted(args.gt.glob("*.json"))}
    if not gt_files:
        raise DataError(f"no motions in {args.gt}")
    rows = []
    for spec in args.pred:
        name, sep, directory = spec.partition("=")
        if not sep or not name:
            parser.error(f"--pred expects NAME=DIR, got {spec!r}")
        pred_files = {p.name: p for p in sorted(Path(directory).glob("*.json"))}
        offenders = sorted(set(gt_files) ^ set(pred_files))
        if offenders:
            raise DataError(f"{name}: sequence sets differ: {', '.join(offenders)}")
        per_seq = []
        for key, gt_path in gt_files.items():
            gen, gt = dataio.load_motion(pred_files[key]), dataio.load_motion(gt_path)
            per_seq.append(evaluate(gen.frames, gt.frames, skeleton))
        rows.append({"model": name, **mean_report(per_seq)})
    fh = sys.stdout if args.out == "-" else open(args.out, "w", newline="")
    try:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (row[k] if k == "model" else f"{row[k]:.6g}") for k in REPORT_COLUMNS})
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


COMMANDS = {"data": cmd_data, "graph": cmd_graph, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval}


def main(argv=None) -> int:
    parser, args = _parse(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](parser, args)
    except (SarError, OSError) as e:
        print(f"sarinterp: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
