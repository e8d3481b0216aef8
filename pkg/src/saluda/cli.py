"""Command-line entry point.

Every subcommand reads one experiment config (JSON, optional) plus
``--set key=value`` overrides and works inside ``output_dir``. Exit codes:
0 success, 1 usage error, 2 data or config error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import glob
import logging
import os
import sys

import numpy as np

from . import nn
from .config import SPLIT_DOMAIN, ConfigError, load_config
from .data import make_frames, simulate_split, sub_seed
from .formats import ClassMap, FormatError, dump_latents, export_ply, read_kitti_scan, read_native, write_native
from .lidar_sim import CLASS_NAMES, source_lidar, target_lidar
from .metrics import ConfusionMatrix, MetricError, band_matrices, evaluate, predict_raw, report, report_json
from .model import EmptySupportError, Network
from .nn import NumericalError
from .training import adapt_bn, self_train_step2, train_step1, write_trace_csv
from .validators import VALIDATORS, ValidatorError, select_hyperparameter, write_sweep_csv

log = logging.getLogger("saluda")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ------------------------------------------------------------ data plumbing


def _class_map(cfg):
    if cfg.class_map is None:
        return None
    if cfg.class_map.startswith("builtin:"):
        return ClassMap.builtin(cfg.class_map.split(":", 1)[1])
    return ClassMap.load(cfg.class_map)


def _split_dir(cfg, split):
    return os.path.join(cfg.output_dir, "data", split)


def load_split(cfg, split, labeled=True):
    """Frames of one split; labels dropped unless ``labeled``."""
    if split not in cfg.data:
        raise ConfigError(f"config has no {split!r} split")
    spec = cfg.data[split]
    domain = SPLIT_DOMAIN[split]
    if spec.kind in ("synthetic", "native"):
        root = _split_dir(cfg, split) if spec.kind == "synthetic" else spec.path
        files = sorted(glob.glob(os.path.join(root, "*.slpc")))
        if not files:
            hint = " (run `simulate` first)" if spec.kind == "synthetic" else ""
            raise FileNotFoundError(f"no .slpc files in {root!r}{hint}")
        clouds = [read_native(p, domain) for p in files]
    else:
        bins = sorted(glob.glob(os.path.join(spec.path, "velodyne", "*.bin")))
        if not bins:
            raise FileNotFoundError(f"no velodyne/*.bin files under {spec.path!r}")
        cmap = _class_map(cfg)
        clouds = []
        for b in bins:
            stem = os.path.splitext(os.path.basename(b))[0]
            lab = os.path.join(spec.path, "labels", stem + ".label")
            clouds.append(read_kitti_scan(b, lab if os.path.exists(lab) else None, cmap, domain))
    if not labeled:
        clouds = [c.without_labels() for c in clouds]
    return make_frames(clouds, cfg.voxel_size)


def _model_seed(cfg):
    return sub_seed(cfg.seed, "model") % (2**32)


def _load_net(cfg, path):
    net = Network(cfg.model, seed=0)
    net.load_state_dict(nn.checkpoint.load(path))
    return net


def _ckpt(cfg, name):
    return os.path.join(cfg.output_dir, name)


def _default_checkpoint(cfg):
    for name in ("step2.salw", "step1.salw"):
        if os.path.exists(_ckpt(cfg, name)):
            return _ckpt(cfg, name)
    raise FileNotFoundError(f"no checkpoint in {cfg.output_dir!r}; run `train` first")


def _write_json(path, doc):
    with open(path, "w") as f:
        f.write(report_json(doc) + "\n")


# ------------------------------------------------------------ subcommands


def cmd_simulate(cfg, args):
    written = 0
    for split, spec in cfg.data.items():
        if spec.kind != "synthetic":
            continue
        make = source_lidar if spec.lidar == "source" else target_lidar
        lidar = make(azimuth_steps=spec.azimuth_steps, noise_sigma=spec.noise_sigma)
        clouds = simulate_split(spec.frames, lidar, sub_seed(cfg.seed, f"simulate/{split}"),
                                SPLIT_DOMAIN[split], split)
        out = _split_dir(cfg, split)
        os.makedirs(out, exist_ok=True)
        for old in glob.glob(os.path.join(out, "*.slpc")):
            os.remove(old)
        for c in clouds:
            write_native(os.path.join(out, f"{c.frame_id}.slpc"), c)
        written += len(clouds)
        print(f"{split}: {len(clouds)} frames -> {out}")
    print(f"simulated {written} frames")


def _train_cfg(cfg):
    from dataclasses import replace

    return replace(cfg.train, seed=sub_seed(cfg.seed, "train") % (2**32))


def cmd_train(cfg, args):
    source = load_split(cfg, "source")
    target = load_split(cfg, "target", labeled=False) if "target" in cfg.data else []
    net = Network(cfg.model, seed=_model_seed(cfg))
    tcfg = _train_cfg(cfg)
    ckdir = cfg.output_dir if tcfg.checkpoint_every else None
    result = train_step1(source, target, tcfg, net, ckdir)
    nn.checkpoint.save(_ckpt(cfg, "step1.salw"), net.state_dict())
    write_trace_csv(result.trace, _ckpt(cfg, "step1_trace.csv"))
    print(f"mode={tcfg.mode} lambda={tcfg.lam} iterations={tcfg.total_iterations} "
          f"skipped_occ={result.skipped_occ} checksum={net.checksum()}")


def cmd_selftrain(cfg, args):
    from dataclasses import replace

    net = _load_net(cfg, args.checkpoint or _ckpt(cfg, "step1.salw"))
    source = load_split(cfg, "source")
    target = load_split(cfg, "target", labeled=False)
    scfg = replace(cfg.selftrain, seed=sub_seed(cfg.seed, "selftrain") % (2**32))
    result = self_train_step2(net, source, target, scfg)
    nn.checkpoint.save(_ckpt(cfg, "step2.salw"), result.net.state_dict())
    write_trace_csv(result.trace, _ckpt(cfg, "step2_trace.csv"))
    print(f"epochs={scfg.epochs} skipped_targets={result.skipped_targets} checksum={result.net.checksum()}")


def cmd_adapt_bn(cfg, args):
    net = _load_net(cfg, args.checkpoint or _ckpt(cfg, "step1.salw"))
    before = net.checksum()
    adapt_bn(net, load_split(cfg, "target", labeled=False), cfg.bn_adapt)
    assert net.checksum() == before
    out = _ckpt(cfg, f"{cfg.bn_adapt.method}.salw")
    nn.checkpoint.save(out, net.state_dict())
    print(f"method={cfg.bn_adapt.method} -> {out}")


def cmd_sweep(cfg, args):
    from dataclasses import replace

    kind = cfg.sweep.validator
    source = load_split(cfg, "source")
    target = load_split(cfg, "target", labeled=False)
    # label-free validators score the unlabeled target training split
    val = load_split(cfg, "source_val") if kind == "src_val" else target
    oracle = load_split(cfg, "target_val") if args.with_oracle else None
    score = VALIDATORS[kind]
    base = cfg.train if cfg.train.mode == "saluda" else replace(cfg.train, mode="saluda")
    extra = {}

    def trainer(lam, seed):
        net = Network(cfg.model, seed=sub_seed(cfg.seed, f"sweep/model/{seed}") % (2**32))
        tcfg = replace(base, lam=lam, seed=sub_seed(cfg.seed, f"sweep/train/{seed}") % (2**32))
        train_step1(source, target, tcfg, net)
        if oracle is not None:
            extra[(lam, seed)] = evaluate(net, oracle).miou()
        return net

    result = select_hyperparameter(cfg.sweep.grid, trainer, lambda n: score(n, val), cfg.sweep.seeds_per_lambda)
    rows = [dict(r, validator=kind) for r in result.rows]
    if oracle is not None:
        for r in rows:
            r["target_miou"] = extra[(r["lambda"], r["seed"])]
    write_sweep_csv(rows, _ckpt(cfg, "sweep.csv"))
    nn.checkpoint.save(_ckpt(cfg, "sweep_best.salw"), result.net.state_dict())
    _write_json(_ckpt(cfg, "sweep.json"), {"validator": kind, "chosen_lambda": result.chosen_lam,
                                           "final_seed": result.final_seed,
                                           "mean_scores": {repr(k): v for k, v in result.mean_scores.items()}})
    print(f"validator={kind} chosen lambda={result.chosen_lam!r}")


def _read_predictions(directory, frames):
    preds = []
    for f in frames:
        path = os.path.join(directory, f"{f.frame_id}.pred")
        p = np.fromfile(path, dtype="<u2").astype(np.int64)
        if len(p) != len(f.raw):
            raise FormatError(f"{path}: {len(p)} predictions for {len(f.raw)} points")
        preds.append(p)
    return preds


def cmd_eval(cfg, args):
    split = args.split
    frames = load_split(cfg, split)
    if any(f.raw.labels is None for f in frames):
        raise MetricError(f"split {split!r} has no labels to evaluate against")
    num_classes = cfg.model.num_classes
    if args.predictions:
        preds = _read_predictions(args.predictions, frames)
    else:
        net = _load_net(cfg, args.checkpoint or _default_checkpoint(cfg))
        preds = [predict_raw(net, f) for f in frames]
    cm = ConfusionMatrix(num_classes)
    for p, f in zip(preds, frames):
        cm.accumulate(p, f.raw.labels)
    bands = []
    for (lo, hi), bcm in zip(cfg.eval.bands,
                             band_matrices(preds, frames, cfg.eval.bands, num_classes, cfg.eval.distance)):
        try:
            value = bcm.miou()
        except MetricError:
            value = None
        bands.append({"band": [lo, hi], "miou": value, "points": bcm.total})
    names = CLASS_NAMES if num_classes == len(CLASS_NAMES) else None
    doc = report(cm, names, bands)
    doc["split"] = split
    _write_json(_ckpt(cfg, f"eval_{split}.json"), doc)
    print(f"mIoU {100 * doc['miou']:.1f}  fw-IoU {100 * doc['fw_iou']:.1f}  points {doc['points']}")
    for b in bands:
        v = "n/a" if b["miou"] is None else f"{100 * b['miou']:.1f}"
        print(f"  {b['band'][0]:g}-{b['band'][1]:g} m: {v} ({b['points']} points)")


def cmd_export(cfg, args):
    frames = load_split(cfg, args.split, labeled=args.color == "label")
    if args.what == "latents":
        net = _load_net(cfg, args.checkpoint or _default_checkpoint(cfg))
        out = args.out or _ckpt(cfg, f"latents_{args.split}.csv")
        rows = dump_latents(net, frames, out)
        print(f"{rows} latent rows -> {out}")
        return
    if not 0 <= args.frame < len(frames):
        raise ConfigError(f"--frame {args.frame} out of range for {len(frames)} frames")
    f = frames[args.frame]
    out = args.out or _ckpt(cfg, f"{f.frame_id}_{args.color}.ply")
    if args.color == "label":
        export_ply(out, f.raw.positions, f.raw.labels, "label")
    elif args.color == "prediction":
        net = _load_net(cfg, args.checkpoint or _default_checkpoint(cfg))
        export_ply(out, f.raw.positions, predict_raw(net, f), "prediction")
    else:
        from .queries import sample_visibility_queries

        q = sample_visibility_queries(f.rep, cfg.train.delta, sub_seed(cfg.seed, "export/queries"),
                                      cfg.train.anchors_per_frame)
        export_ply(out, q.positions, q.labels, "occupancy")
    print(f"-> {out}")


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "selftrain": cmd_selftrain,
            "adapt-bn": cmd_adapt_bn, "sweep": cmd_sweep, "eval": cmd_eval, "export": cmd_export}


def build_parser():
    p = _Parser(prog="saluda", description="Surface-aware lidar domain adaptation experiments.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("-c", "--config", help="experiment config JSON")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. train.lambda=0.01")
        s.add_argument("-o", "--output-dir", help="shortcut for --set output_dir=...")
        s.add_argument("-v", "--verbose", action="store_true")
        return s

    add("simulate", "generate synthetic source/target splits")
    add("train", "Step-1 training in any mode (train.mode)")
    for name, help_ in (("selftrain", "Step-2 mean-teacher self-training"),
                        ("adapt-bn", "AdaBN / DUA statistics adaptation")):
        add(name, help_).add_argument("--checkpoint", help="starting weights (default: step1.salw)")
    add("sweep", "validator-driven lambda selection").add_argument(
        "--with-oracle", action="store_true", help="also record target_val mIoU per model (post hoc only)")
    s = add("eval", "segmentation metrics on a labeled split")
    s.add_argument("--split", default="target_val")
    s.add_argument("--checkpoint")
    s.add_argument("--predictions", help="directory of <frame_id>.pred files (u16) instead of a model")
    s = add("export", "PLY clouds or latent CSV")
    s.add_argument("what", choices=("ply", "latents"))
    s.add_argument("--split", default="target_val")
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--color", choices=("label", "prediction", "occupancy"), default="label")
    s.add_argument("--checkpoint")
    s.add_argument("--out")
    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = list(args.set) + ([f"output_dir={args.output_dir}"] if args.output_dir else [])
        cfg = load_config(args.config, overrides)
        os.makedirs(cfg.output_dir, exist_ok=True)
        COMMANDS[args.command](cfg, args)
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FormatError, MetricError, ValidatorError, EmptySupportError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
