"""Command-line pipeline: generate, label, train, infer, eval, ablate.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable or
inconsistent inputs, bad config values, diverged training).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import (
    FlowField,
    FramePair,
    FrameFormatError,
    IoFailure,
    PointCloud,
    read_frame,
    write_frame,
)
from .metrics import epe_3way, seg_metrics
from .model import ModelParams
from .rigid import RigidTransform
from .synth import SceneSpec, generate_pair
from .train import (
    DivergenceDetected,
    TrainConfig,
    ablate,
    infer,
    label_pair,
    train,
    write_loss_curve,
)

USAGE_EXIT = 1
DATA_EXIT = 2

ABLATION_CSV_HEADER = ("row,lambda_cd,lambda_bf,lambda_rigid,lambda_smc,"
                       "lambda_dom,bs,fs,fd,three_way")

_DATA_ERRORS = (
    FrameFormatError,
    IoFailure,
    DivergenceDetected,
    OSError,
    ValueError,
    KeyError,
    json.JSONDecodeError,
)


class UsageError(Exception):
    """Command invoked with a missing or contradictory argument set."""


def _tf_to_json(tf: RigidTransform) -> dict:
    return {
        "rotation": [[float(v) for v in row] for row in tf.rotation],
        "translation": [float(v) for v in tf.translation],
    }


def _tf_from_json(blob: dict) -> RigidTransform:
    return RigidTransform(np.asarray(blob["rotation"], dtype=float),
                          np.asarray(blob["translation"], dtype=float))


def _read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _write_json(blob: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(blob, fh, indent=2)
        fh.write("\n")


def _load_pairs(dir_path):
    """Frame pairs of a generated directory, via its pairs.json manifest."""
    root = Path(dir_path)
    manifest_path = root / "pairs.json"
    if not manifest_path.exists():
        raise IoFailure(f"{manifest_path} not found; expected a directory "
                        "produced by `gen`")
    manifest = _read_json(manifest_path)
    pairs = []
    for entry in manifest["pairs"]:
        source = read_frame(root / entry["source"], frame_index=0)
        target = read_frame(root / entry["target"], frame_index=1)
        hint = entry.get("ego_hint")
        pairs.append(FramePair(source, target,
                               ego_pose_hint=_tf_from_json(hint) if hint else None))
    if not pairs:
        raise IoFailure(f"{manifest_path} lists no pairs")
    return pairs


def _frame_sequence_pairs(dir_path):
    """Sliding pairs over the sorted frame files of a bare directory."""
    root = Path(dir_path)
    frames = sorted(p for p in root.iterdir() if p.suffix in (".sfpc", ".csv"))
    if len(frames) < 2:
        raise IoFailure(f"{root} holds {len(frames)} frame files; need >= 2")
    pairs = []
    for left, right in zip(frames, frames[1:]):
        pairs.append(FramePair(read_frame(left, frame_index=0),
                               read_frame(right, frame_index=1)))
    return pairs


def _config_from_args(args) -> TrainConfig:
    cfg = (TrainConfig.from_dict(_read_json(args.config))
           if args.config else TrainConfig())
    overrides = {}
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    if getattr(args, "lr", None) is not None:
        overrides["learning_rate"] = args.lr
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return replace(cfg, **overrides) if overrides else cfg


def cmd_gen(args) -> int:
    spec = (SceneSpec.from_dict(_read_json(args.spec))
            if args.spec else SceneSpec())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for index in range(args.count):
        seeded = replace(spec, seed=spec.seed + index)
        pair = generate_pair(seeded)
        source_name = f"pair_{index:04d}_src.sfpc"
        target_name = f"pair_{index:04d}_tgt.sfpc"
        write_frame(pair.source, out / source_name)
        write_frame(pair.target, out / target_name)
        entries.append({
            "source": source_name,
            "target": target_name,
            "ego_hint": _tf_to_json(pair.ego_pose_hint),
            "seed": seeded.seed,
        })
    _write_json({"spec": spec.to_dict(), "pairs": entries}, out / "pairs.json")
    print(f"wrote {args.count} pair(s) to {out}")
    return 0


def cmd_label(args) -> int:
    root = Path(args.pairs)
    if (root / "pairs.json").exists():
        pairs = _load_pairs(root)
    else:
        pairs = _frame_sequence_pairs(root)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for index, pair in enumerate(pairs):
        pseudo, _, _ = label_pair(pair)
        labeled = PointCloud(pair.source.points, frame_index=0,
                             gt_labels=pseudo.labels)
        write_frame(labeled, out / f"labels_{index:04d}.sfpc")
    print(f"labeled {len(pairs)} pair(s) into {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    if args.dump_config:
        print(json.dumps(cfg.to_dict(), indent=2))
        return 0
    if not args.pairs or not args.out:
        raise UsageError("train needs --pairs and --out (or --dump-config)")
    pairs = _load_pairs(args.pairs)
    params, curve = train(pairs, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params.save(out / "model.sfck")
    write_loss_curve(curve, out / "loss_curve.csv")
    _write_json(cfg.to_dict(), out / "config.json")
    print(f"trained on {len(pairs)} pair(s) for {cfg.epochs} epoch(s); "
          f"final loss {curve[-1].total:.6f}")
    return 0


def cmd_infer(args) -> int:
    params = ModelParams.load(args.model)
    source = read_frame(args.source, frame_index=0)
    target = read_frame(args.target, frame_index=1)
    hint = _tf_from_json(_read_json(args.ego_hint)) if args.ego_hint else None
    pair = FramePair(source, target, ego_pose_hint=hint)
    result = infer(params, pair)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    predicted = PointCloud(source.points, frame_index=0,
                           gt_labels=result.labels.labels,
                           gt_flow=result.total.vectors)
    write_frame(predicted, out / "pred.sfpc")
    _write_json(_tf_to_json(result.ego), out / "ego.json")
    print(f"wrote predictions for {source.n} points to {out}")
    return 0


def cmd_eval(args) -> int:
    pred = read_frame(args.pred)
    gt = read_frame(args.gt)
    if pred.n != gt.n:
        raise ValueError(f"prediction has {pred.n} points, truth has {gt.n}")
    if not np.array_equal(pred.points, gt.points):
        raise ValueError("prediction and truth point sets differ")
    if pred.gt_flow is None or pred.gt_labels is None:
        raise ValueError("prediction file must carry flow and labels")
    if gt.gt_flow is None or gt.gt_labels is None:
        raise ValueError("truth file must carry flow and labels")
    epe = epe_3way(gt.points, FlowField(pred.gt_flow, "total"),
                   gt.gt_flow, gt.gt_labels)
    seg = seg_metrics(pred.gt_labels, gt.gt_labels)
    blob = {"epe": epe.to_dict(), "seg": seg.to_dict()}
    text = json.dumps(blob, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    rows = ablate(_load_pairs(args.pairs), _load_pairs(args.held), cfg)
    lines = [ABLATION_CSV_HEADER]
    for row in rows:
        lines.append(",".join(str(row[key])
                              for key in ABLATION_CSV_HEADER.split(",")))
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    width = max(len(row["row"]) for row in rows)
    print(f"{'row':<{width}}  {'bs':>8}  {'fs':>8}  {'fd':>8}  {'3-way':>8}")
    for row in rows:
        print(f"{row['row']:<{width}}  {row['bs']:8.4f}  {row['fs']:8.4f}  "
              f"{row['fd']:8.4f}  {row['three_way']:8.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowseg",
        description="Self-supervised scene flow and motion segmentation "
                    "for point-cloud pairs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="synthesize scene pairs from a spec")
    gen.add_argument("--spec", help="SceneSpec JSON file (defaults used if omitted)")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--count", type=int, default=1,
                     help="number of pairs; seeds increment from the spec seed")
    gen.set_defaults(func=cmd_gen)

    label = sub.add_parser("label", help="emit pseudo-labels for frame pairs")
    label.add_argument("--pairs", required=True,
                       help="directory from `gen`, or a bare frame directory")
    label.add_argument("--out", required=True, help="output directory")
    label.set_defaults(func=cmd_label)

    tr = sub.add_parser("train", help="train a model on generated pairs")
    tr.add_argument("--pairs", help="directory from `gen`")
    tr.add_argument("--out", help="output directory for checkpoint and curve")
    tr.add_argument("--config", help="TrainConfig JSON file")
    tr.add_argument("--epochs", type=int, help="override config epochs")
    tr.add_argument("--lr", type=float, help="override config learning rate")
    tr.add_argument("--seed", type=int, help="override config seed")
    tr.add_argument("--dump-config", action="store_true",
                    help="print the effective config JSON and exit")
    tr.set_defaults(func=cmd_train)

    inf = sub.add_parser("infer", help="run a checkpoint on one frame pair")
    inf.add_argument("--model", required=True, help="checkpoint file")
    inf.add_argument("--source", required=True, help="source frame file")
    inf.add_argument("--target", required=True, help="target frame file")
    inf.add_argument("--ego-hint", dest="ego_hint",
                     help="optional JSON file with a rotation/translation hint")
    inf.add_argument("--out", required=True, help="output directory")
    inf.set_defaults(func=cmd_infer)

    ev = sub.add_parser("eval", help="score predictions against ground truth")
    ev.add_argument("--pred", required=True, help="prediction frame file")
    ev.add_argument("--gt", required=True, help="ground-truth frame file")
    ev.add_argument("--out", help="also write the metrics JSON here")
    ev.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", help="cumulative loss-term grid")
    ab.add_argument("--pairs", required=True, help="training pair directory")
    ab.add_argument("--held", required=True, help="held-out pair directory")
    ab.add_argument("--config", help="TrainConfig JSON file")
    ab.add_argument("--out", help="also write the grid as CSV here")
    ab.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help and 2 for usage problems.
        return 0 if exc.code == 0 else USAGE_EXIT
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT


if __name__ == "__main__":
    sys.exit(main())
