"""Command-line entry point: ``tds <command> [--key value ...]``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import activations
from .autodiff.checkpoint import CheckpointError, load_checkpoint
from .autodiff.gradcheck import SmoothedCrossEntropyHead, grad_check
from .config import FIELD_OWNER, SECTIONS, RunConfig, parse_value, read_config_file, write_config_file
from .data import DatasetFormatError, flip_label, gen_clip, make_dataset, read_dataset, stack, write_dataset
from .network import ConfigError, TDSModel, ls_cross_entropy, network_forward
from .profiler import audit_backward_memory, audit_by_extrapolation
from .train import evaluate, train

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _flag(name):
    return "--" + name.replace("_", "-")


def build_parser():
    common = _Parser(add_help=False)
    g = common.add_argument_group("run")
    g.add_argument("--preset", default="tiny", help="built-in defaults: tiny or paper")
    g.add_argument("--config", help="key = value file applied over the preset")
    g.add_argument("--out", default="tds_out", help="directory receiving every output")
    g.add_argument("--seed", type=int, help="training/init seed (falls back to $TDS_SEED)")
    for sec, cls in SECTIONS:
        grp = common.add_argument_group(sec)
        for f in dataclasses.fields(cls):
            if f.name == "seed":
                continue
            grp.add_argument(_flag(f.name), dest=f"cfg_{f.name}", metavar="V")

    p = _Parser(prog="tds", description="Temporal side network: data, training, checks and profiling.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="write train/val clip files")

    s = sub.add_parser("train", parents=[common], help="train the side network")
    s.add_argument("--data", help="directory holding train.tdsd / val.tdsd (generated if absent)")

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data")

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full network")
    s.add_argument("--eps", type=float, default=1e-4)
    s.add_argument("--max-entries", type=int, default=4, help="probed entries per parameter tensor")
    s.add_argument("--batch", type=int, default=2)
    s.add_argument("--threshold", type=float, default=1e-4)

    s = sub.add_parser("profile", parents=[common], help="FLOPs and retained-activation census")
    s.add_argument("--batch", type=int, default=1)
    s.add_argument("--census", choices=("auto", "graph", "affine"), default="auto")

    s = sub.add_parser("ablate", parents=[common], help="train once per value of one config field")
    s.add_argument("--axis", required=True, help="config field (dashes allowed) or alpha-beta")
    s.add_argument("--values", required=True, help="comma-separated values; alpha-beta takes a:b pairs")

    s = sub.add_parser("dump-activations", parents=[common], help="write activation maps as PPM images")
    s.add_argument("--checkpoint")
    s.add_argument("--layer", type=int, default=-1, help="block index (negative counts from the end)")
    s.add_argument("--clip-class", type=int, default=0)
    s.add_argument("--clip-seed", type=int, default=0)
    s.add_argument("--static", action="store_true", help="use a temporally constant clip")
    s.add_argument("--scale", type=int, default=8)
    return p


def resolve(args):
    cfg = RunConfig.preset(args.preset)
    env_seed = os.environ.get("TDS_SEED")
    if env_seed is not None:
        try:
            cfg = cfg.update({"seed": int(env_seed)})
        except ValueError:
            raise ConfigError(f"TDS_SEED must be an integer, got {env_seed!r}") from None
    if args.config:
        cfg = cfg.update(read_config_file(args.config))
    flags = {}
    for name in FIELD_OWNER:
        val = getattr(args, f"cfg_{name}", None)
        if val is not None:
            flags[name] = parse_value(name, val)
    if args.seed is not None:
        flags["seed"] = args.seed
    return cfg.update(flags).validate()


def _datasets(cfg, data_dir):
    if data_dir:
        d = Path(data_dir)
        tr = read_dataset(d / "train.tdsd")
        va = read_dataset(d / "val.tdsd") if (d / "val.tdsd").exists() else []
        return tr, va
    return make_dataset(cfg.data.spec(cfg.model))


def _flip_map(cfg):
    spec = cfg.data.spec(cfg.model)
    return [flip_label(c, spec) for c in range(spec.num_classes)]


def _load_model(cfg, path):
    model = TDSModel(cfg.model, seed=cfg.train.seed)
    if path:
        model.load_arrays(load_checkpoint(path))
    return model


def cmd_gen_data(cfg, args, out):
    tr, va = make_dataset(cfg.data.spec(cfg.model))
    write_dataset(out / "train.tdsd", tr)
    write_dataset(out / "val.tdsd", va)
    print(f"wrote {len(tr)} train and {len(va)} val clips to {out}")
    return EXIT_OK


def _train_run(cfg, out, train_clips, val_clips):
    out.mkdir(parents=True, exist_ok=True)
    write_config_file(out / "config.txt", cfg)

    def log(m):
        print(json.dumps({k: getattr(m, k) for k in ("epoch", "loss", "top1", "top5", "lr", "seconds")}), flush=True)

    _, hist = train(cfg.model, cfg.train, train_clips, val_clips, out_dir=out, flip_map=_flip_map(cfg), log=log)
    return hist


def cmd_train(cfg, args, out):
    tr, va = _datasets(cfg, args.data)
    hist = _train_run(cfg, out, tr, va)
    last = hist[-1]
    print(f"final: train top1 {last.top1:.2f}  val top1 {last.val_top1:.2f}")
    return EXIT_OK


def cmd_eval(cfg, args, out):
    model = _load_model(cfg, args.checkpoint)
    tr, va = _datasets(cfg, args.data)
    result = {"train": evaluate(model, tr), "val": evaluate(model, va) if va else None}
    (out / "eval.json").write_text(json.dumps(result, indent=2))
    print(json.dumps(result))
    return EXIT_OK


def cmd_gradcheck(cfg, args, out):
    mc = cfg.model
    model = TDSModel(mc, seed=cfg.train.seed)
    rng = np.random.default_rng(cfg.train.seed)
    # i.i.d. pixels: flat backgrounds would put temporal max-pool windows
    # within eps of a tie, where central differences straddle the kink
    x = rng.uniform(0.0, 1.0, size=(args.batch, 3, cfg.data.t_raw, mc.height, mc.width))
    y = np.arange(args.batch) % mc.num_classes
    params = model.trainable()

    head = SmoothedCrossEntropyHead(y, mc.label_smoothing)

    def logits():
        return network_forward(x, mc, model)

    t0 = time.perf_counter()
    report, skipped = [], []
    err = grad_check(logits, params, eps=args.eps, max_entries=args.max_entries, seed=cfg.train.seed,
                     report=report, skipped=skipped, head=head)
    secs = time.perf_counter() - t0
    worst = max(report, key=lambda r: r[4])
    result = {"max_relative_error": err, "probes": len(report), "kink_skips": len(skipped),
              "tensors": len(params), "seconds": secs,
              "worst": {"name": worst[0], "index": worst[1], "analytic": worst[2], "numeric": worst[3]}}
    (out / "gradcheck.json").write_text(json.dumps(result, indent=2))
    print(f"max relative error {err:.3e} over {len(report)} probes "
          f"({len(skipped)} kink-straddling entries replaced) in {secs:.1f}s")
    return EXIT_OK if err < args.threshold else EXIT_RUNTIME


def cmd_profile(cfg, args, out):
    topos = tuple(t.strip() for t in args.topologies.split(",") if t.strip())
    for t in topos:
        if t not in ("side", "inbackbone", "full"):
            raise ConfigError(f"unknown topology {t!r}")
    mc = cfg.model
    method = args.census
    if method == "auto":
        method = "affine" if mc.num_patches * mc.frozen_dim > 64 * 256 and mc.frames > 4 else "graph"
    if method == "affine":
        rep = audit_by_extrapolation(mc, topos, batch=args.batch, seed=cfg.train.seed, label=args.preset)
    else:
        rep = audit_backward_memory(mc, topos, batch=args.batch, seed=cfg.train.seed, label=args.preset)
    (out / "profile.json").write_text(rep.to_json())
    (out / "profile.txt").write_text(rep.to_table())
    print(rep.to_table(), end="")
    sizes = [rep.row(t).total_bytes for t in topos]
    if all(a < b for a, b in zip(sizes, sizes[1:])):
        print("retained bytes strictly increase in the listed topology order")
    return EXIT_OK


def _ablation_points(axis, values):
    if axis == "alpha-beta":
        pts = []
        for v in values.split(","):
            a, b = v.split(":")
            pts.append((f"alpha={a},beta={b}", {"alpha": float(a), "beta": float(b)}))
        return pts
    name = axis.replace("-", "_")
    if name not in FIELD_OWNER or name == "seed":
        raise ConfigError(f"unknown ablation axis {axis!r}")
    sep = ";" if name in ("velocities",) else ","
    return [(f"{name}={v.strip()}", {name: parse_value(name, v)}) for v in values.split(sep) if v.strip()]


def cmd_ablate(cfg, args, out):
    points = _ablation_points(args.axis, args.values)
    runs = [(tag, cfg.update(changes).validate()) for tag, changes in points]
    summary = {}
    for tag, rc in runs:
        print(f"== {tag}", flush=True)
        tr, va = make_dataset(rc.data.spec(rc.model))
        hist = _train_run(rc, out / tag, tr, va)
        summary[tag] = {"train_top1": hist[-1].top1, "val_top1": hist[-1].val_top1, "loss": hist[-1].loss}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary))
    return EXIT_OK


def cmd_dump_activations(cfg, args, out):
    model = _load_model(cfg, args.checkpoint)
    layer = args.layer if args.layer >= 0 else cfg.model.layers + args.layer
    if not 0 <= layer < cfg.model.layers:
        raise ConfigError(f"layer {args.layer} outside the {cfg.model.layers} blocks")
    spec = cfg.data.spec(cfg.model)
    if not 0 <= args.clip_class < spec.num_classes:
        raise ConfigError(f"clip class {args.clip_class} outside [0, {spec.num_classes})")
    clip = gen_clip(args.clip_class, args.clip_seed, spec)
    frames = clip.frames
    if args.static:
        frames = np.repeat(frames[:, :1], frames.shape[1], axis=1)
    maps = activations.activation_maps(model, frames, layer)
    for t in range(maps["with_sme"].shape[0]):
        img = activations.side_by_side((maps["with_sme"][t], maps["without_sme"][t], maps["motion"][t]), args.scale)
        activations.write_ppm(out / f"layer{layer}_frame{t:02d}.ppm", img)
    np.savez(out / f"layer{layer}_maps.npz", **maps)
    print(f"wrote {maps['with_sme'].shape[0]} frames of {cfg.model.grid[0]}x{cfg.model.grid[1]} maps to {out}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "profile": cmd_profile,
    "ablate": cmd_ablate,
    "dump-activations": cmd_dump_activations,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command == "profile":
            # here --topology lists the topologies to compare
            args.topologies = args.cfg_topology or "side,inbackbone,full"
            args.cfg_topology = None
        cfg = resolve(args)
    except ConfigError as exc:
        print(f"tds: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print(f"# command = {args.command}")
    print(cfg.to_text(), end="", flush=True)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args, out)
    except ConfigError as exc:
        print(f"tds: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (CheckpointError, DatasetFormatError, OSError, RuntimeError, ValueError, KeyError, IndexError) as exc:
        print(f"tds: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
