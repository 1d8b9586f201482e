"""Command-line interface.

Subcommands:

    fsnet train      --config FILE [--out DIR]
    fsnet predict    --ckpt FILE --image FILE --out FILE
    fsnet threshold  --probs FILE [--optimum R | --from-masks DIR] [--out FILE]
    fsnet eval       --ckpt FILE --dataset TAG --split NAME [--adaptive] ...
    fsnet ablate     --config FILE [--out DIR]
    fsnet cross      --train-tag A --test-tag B --config FILE [--out DIR]
    fsnet stats      --config FILE [--input-shape HxW]

Config files are plain-text "key = value" lines whose keys mirror the
TrainConfig/ModelConfig field names.  Tabular output is CSV; probability
maps are written both as 16-bit grayscale images and tensor containers.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import data as data_mod
from . import postprocess as post
from . import report, serialize
from .model import checkpoint_load, count_flops
from .training import (
    TrainConfig,
    _load_split_samples,
    ablate,
    cross_train,
    evaluate_checkpoint,
    predict_probability,
    train,
)


def load_train_config(path) -> TrainConfig:
    with open(path) as f:
        fields = serialize.parse_manifest(f.read())
    return TrainConfig.from_fields(fields)


def _cmd_train(args):
    cfg = load_train_config(args.config)
    out_dir = args.out or cfg.out_dir
    record = train(cfg, out_dir=out_dir)
    report.write_run_csv(os.path.join(out_dir, "run.csv"), record)
    report.save_loss_curve(record, os.path.join(out_dir, "loss_curve.png"))
    print(f"best_epoch,{record.best_epoch}")
    print(f"best_val_loss,{record.best_val_loss:.6f}")
    print(f"checkpoint,{record.checkpoint_path}")
    return 0


def _cmd_predict(args):
    model = checkpoint_load(args.ckpt)
    image = data_mod.to_grayscale(data_mod.read_image(args.image))
    sample = data_mod.SegmentationSample(image, np.zeros_like(image), None, "cli",
                                         os.path.basename(args.image))
    prob = predict_probability(model, sample)
    data_mod.write_image(args.out, prob.values, bits=16)
    container = os.path.splitext(args.out)[0] + ".fsnt"
    serialize.save_tensor(container, prob.values.astype(np.float32))
    print(f"probability_map,{args.out}")
    print(f"tensor_container,{container}")
    return 0


def _load_probability(path):
    if path.endswith(".fsnt"):
        return post.ProbabilityMap(serialize.load_tensor(path))
    arr = data_mod.to_grayscale(data_mod.read_image(path))
    return post.ProbabilityMap(arr)


def _cmd_threshold(args):
    prob = _load_probability(args.probs)
    if args.optimum is not None:
        optimum = args.optimum
    elif args.from_masks:
        mask_paths = sorted(
            os.path.join(args.from_masks, n)
            for n in os.listdir(args.from_masks)
            if os.path.splitext(n)[1].lower() in data_mod.IMAGE_EXTENSIONS
        )
        if not mask_paths:
            print("error: no mask files found", file=sys.stderr)
            return 2
        masks = [data_mod._binarize_mask(data_mod.read_image(p)) for p in mask_paths]
        optimum = post.estimate_optimum_ratio(masks)
    else:
        print("error: need --optimum or --from-masks", file=sys.stderr)
        return 2
    cfg = post.ThresholdSearchConfig(
        optimum=optimum,
        theta_initial=args.theta_initial,
        delta_theta=args.delta_theta,
        epsilon=args.epsilon,
        theta_max=args.theta_max,
    )
    result = post.adaptive_threshold(prob, cfg)
    out = args.out or os.path.splitext(args.probs)[0] + "_mask.png"
    data_mod.write_image(out, result.mask.astype(np.float64))
    print(f"{result.theta:.6f},{result.ratio:.6f},{result.iterations}")
    return 0


def _cmd_eval(args):
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    if args.dataset:
        cfg.dataset = args.dataset
    if args.root:
        cfg.data_root = args.root
    if args.fold is not None:
        cfg.fold = args.fold
    cfg.validate()
    result = evaluate_checkpoint(args.ckpt, cfg, split=args.split,
                                 use_adaptive=args.adaptive)
    out_dir = args.out or "runs/eval"
    splits = dict(zip(("train", "val", "test"), _load_split_samples(cfg)))
    report.render_eval_outputs(result, splits[args.split], out_dir)
    with open(os.path.join(out_dir, "metrics.csv")) as f:
        sys.stdout.write(f.read())
    return 0


def _cmd_ablate(args):
    cfg = load_train_config(args.config)
    out_dir = args.out or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    results = ablate(cfg)
    csv_path = os.path.join(out_dir, "ablation.csv")
    report.write_ablation_csv(csv_path, results)
    report.save_ablation_bars(results, os.path.join(out_dir, "ablation.png"))
    with open(csv_path) as f:
        sys.stdout.write(f.read())
    return 0


def _cmd_cross(args):
    cfg = load_train_config(args.config)
    out_dir = args.out or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    record, result = cross_train(args.train_tag, args.test_tag, cfg)
    lines = ["train_tag,test_tag," + report.CSV_HEADER]
    lines.append(f"{args.train_tag},{args.test_tag},{result.pooled.csv_row()}")
    csv_path = os.path.join(out_dir, f"cross_{args.train_tag}_{args.test_tag}.csv")
    with open(csv_path, "w") as f:
        f.write("\n".join(lines) + "\n")
    report.save_loss_curve(record, os.path.join(out_dir, "cross_loss_curve.png"))
    sys.stdout.write("\n".join(lines) + "\n")
    return 0


def _parse_shape(text):
    parts = text.lower().split("x")
    values = tuple(int(p) for p in parts)
    if len(values) == 2:
        return values
    if len(values) == 3:
        return values
    raise argparse.ArgumentTypeError(f"cannot parse input shape {text!r}")


def _cmd_stats(args):
    cfg = load_train_config(args.config)
    shape = args.input_shape or (cfg.model.in_channels, 48, 48)
    if len(shape) == 2:
        shape = (cfg.model.in_channels,) + shape
    flops_report = count_flops(cfg.model, shape)
    sys.stdout.write(report.write_complexity_csv(None, flops_report))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="fsnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="run one image through a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("threshold", help="adaptive-threshold a probability map")
    p.add_argument("--probs", required=True)
    p.add_argument("--optimum", type=float, default=None)
    p.add_argument("--from-masks", dest="from_masks", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--theta-initial", type=float, default=0.05)
    p.add_argument("--delta-theta", type=float, default=0.005)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--theta-max", type=float, default=0.99)
    p.set_defaults(func=_cmd_threshold)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", default=None)
    p.add_argument("--root", default=None)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--adaptive", action="store_true")
    p.add_argument("--config", default=None)
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run the BL/+EB/+BE/+SE/+AT ladder")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("cross", help="train on one dataset, test on another")
    p.add_argument("--train-tag", required=True)
    p.add_argument("--test-tag", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_cross)

    p = sub.add_parser("stats", help="parameter and FLOP accounting")
    p.add_argument("--config", required=True)
    p.add_argument("--input-shape", type=_parse_shape, default=None)
    p.set_defaults(func=_cmd_stats)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
