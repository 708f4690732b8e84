"""Command-line entry point: ``csgprog <subcommand> ...``.

Subcommands: gen, exec, train, infer, eval, detect, plot.  The grammar
config file defaults to ``$CSGPROG_CONFIG`` when ``--config`` is not given.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import random
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

CONFIG_ENV = "CSGPROG_CONFIG"
log = logging.getLogger("csgprog")


class UsageError(Exception):
    pass


# -- shared helpers ------------------------------------------------------------

def _seed_everything(seed: int):
    import torch

    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def _grammar(args, data_root: str | None = None):
    from .lang import GrammarConfig

    path = getattr(args, "config", None) or os.environ.get(CONFIG_ENV)
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"grammar config {p} not found")
        cfg = GrammarConfig.from_text(p.read_text())
    elif data_root and (Path(data_root) / "grammar.cfg").is_file():
        cfg = GrammarConfig.from_text((Path(data_root) / "grammar.cfg").read_text())
    else:
        cfg = GrammarConfig(dim=3 if getattr(args, "dim", "2d") == "3d" else 2)
    if getattr(args, "dim", None) and cfg.dim != (3 if args.dim == "3d" else 2) and args.dim_given:
        raise UsageError(f"--dim {args.dim} conflicts with the grammar config (dim {cfg.dim})")
    return cfg


def _require(path, what):
    if path is None or not Path(path).exists():
        raise UsageError(f"{what} {path} does not exist")
    return Path(path)


def _load_policy(args, vocab):
    from .policy import TorchPolicy, load_checkpoint

    model = load_checkpoint(_require(args.checkpoint, "checkpoint"), vocab)
    return TorchPolicy(model, vocab)


def _targets(args, config):
    """(ids, rasters, programs-or-None) from --targets or --data/--split."""
    from .datagen import load_dataset
    from .formats import load_targets

    if args.targets:
        rasters = load_targets(_require(args.targets, "targets"))
        progs = None
    else:
        root = _require(args.data, "dataset")
        progs, rasters = load_dataset(root, args.split, config, lengths=args.lengths)
    if args.limit:
        rasters = rasters[:args.limit]
        progs = progs[:args.limit] if progs is not None else None
    for r in rasters:
        if r.shape != config.shape:
            raise UsageError(f"target shape {r.shape} does not match the grammar canvas {config.shape}")
    return list(range(len(rasters))), rasters, progs


def _mask(value: str) -> bool:
    return value == "on"


# -- gen -----------------------------------------------------------------------

def cmd_gen(args) -> int:
    from .datagen import DatasetSpec, generate_dataset, preset

    cfg = _grammar(args)
    spec = preset(args.preset, dim=cfg.dim, seed=args.seed, grammar=cfg)
    counts = spec.counts
    if args.len:
        for length in args.len:
            if length % 2 == 0 or length < 1:
                raise UsageError(f"--len {length}: program lengths are odd")
            if length > cfg.max_length:
                raise UsageError(f"--len {length} exceeds max_length {cfg.max_length}")
        counts = {s: {L: per.get(L, 1) for L in args.len} for s, per in counts.items()}
    for split, n in (("train", args.train), ("val", args.val), ("test", args.test)):
        if n is not None:
            counts[split] = {L: n for L in (args.len or counts[split])}
    spec = DatasetSpec(counts, args.seed, cfg)
    manifest = generate_dataset(spec, args.out, jobs=args.jobs, with_rasters=not args.no_rasters)
    total = sum(int(n) for per in manifest["counts"].values() for n in per.values())
    print(f"wrote {total} programs to {args.out}")
    return 0


# -- exec ----------------------------------------------------------------------

def cmd_exec(args) -> int:
    from .formats import write_pgm, write_rasters
    from .lang import CSGError, parse_program
    from .render import InvalidProgram, execute

    cfg = _grammar(args)
    src = _require(args.programs, "program file")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    errors = 0
    n_ok = 0
    for lineno, line in enumerate(src.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            p = parse_program(line, cfg, enforce_grid=not args.off_grid)
            raster, steps = execute(p, cfg, trace=args.trace)
        except (CSGError, InvalidProgram) as e:
            errors += 1
            print(f"{src}:{lineno}: {e}", file=sys.stderr)
            if not args.keep_going:
                return 1
            continue
        stem = f"prog{lineno:05d}"
        if cfg.dim == 2:
            write_pgm(out / f"{stem}.pgm", raster)
        else:
            write_rasters(out / f"{stem}.bin", [raster])
        if args.trace:
            tdir = out / f"{stem}_trace"
            tdir.mkdir(exist_ok=True)
            with open(tdir / "trace.txt", "w") as f:
                for i, s in enumerate(steps):
                    f.write(f"{i}\t{s.instruction}\t{s.depth}\n")
                    if cfg.dim == 2:
                        write_pgm(tdir / f"step{i:02d}.pgm", s.top)
                    else:
                        write_rasters(tdir / f"step{i:02d}.bin", [s.top])
            print(f"{lineno}: depths {[s.depth for s in steps]}")
        if args.figure:
            from .plotting import plot_rasters

            if args.trace:
                plot_rasters([s.top for s in steps], out / f"{stem}.svg", [str(s.instruction) for s in steps])
            else:
                plot_rasters([raster], out / f"{stem}.svg")
        n_ok += 1
    print(f"rendered {n_ok} programs into {out}" + (f", {errors} errors" if errors else ""))
    return 0


# -- train ---------------------------------------------------------------------

def cmd_train(args) -> int:
    from .datagen import load_dataset
    from .lang import build_vocabulary
    from .plotting import plot_training_curves
    from .policy import arch_for, init_policy, load_checkpoint
    from .training import TrainConfig, train_reinforce, train_supervised

    root = _require(args.data, "dataset")
    cfg = _grammar(args, root)
    vocab = build_vocabulary(cfg)
    overrides = {k: getattr(args, k) for k in ("mode", "epochs", "steps", "batch_size", "lr", "gamma", "rollouts",
                                               "weight_decay") if getattr(args, k) is not None}
    overrides["seed"] = args.seed
    if args.canonical:
        overrides["canonical"] = True
    if args.train_config:
        tc = replace(TrainConfig.from_text(_require(args.train_config, "training config").read_text()), **overrides)
    else:
        tc = TrainConfig(**overrides)
    _seed_everything(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.init:
        model = load_checkpoint(_require(args.init, "initial checkpoint"), vocab)
    else:
        model = init_policy(arch_for(cfg, args.stack_k), vocab, args.seed)
    progs, rasters = load_dataset(root, "train", cfg, lengths=args.lengths)
    if args.limit:
        progs, rasters = progs[:args.limit], rasters[:args.limit]
    if tc.mode == "supervised":
        val = None
        if (root / "val").is_dir():
            vp, vr = load_dataset(root, "val", cfg, lengths=args.lengths)
            val = (vr, vp) if vp else None
        model, _ = train_supervised(model, (rasters, progs), vocab, tc, val=val, log_path=out / "log.csv",
                                    checkpoint_path=out / "model.ckpt", time_limit=args.time_limit)
        keys = ("loss", "val_loss")
    else:
        model, _ = train_reinforce(model, rasters, vocab, tc, log_path=out / "log.csv",
                                   checkpoint_path=out / "model.ckpt")
        keys = ("reward", "baseline")
    plot_training_curves({tc.mode: out / "log.csv"}, out / "curves.svg", keys)
    print(f"checkpoint {out / 'model.ckpt'}")
    return 0


# -- infer / eval / detect -----------------------------------------------------

def _policy_or_nn(args, cfg, vocab):
    if args.checkpoint:
        return _load_policy(args, vocab), None
    if args.nn_index:
        from .datagen import load_dataset
        from .nearest import nn_build_index

        progs, rasters = load_dataset(_require(args.nn_index, "index dataset"), "train", cfg)
        return None, nn_build_index(rasters, progs)
    raise UsageError("give --checkpoint or --nn-index")


def cmd_infer(args) -> int:
    from .evaluation import best_of, score_program
    from .lang import build_vocabulary, format_program
    from .nearest import nn_retrieve
    from .search import beam_search, refine

    cfg = _grammar(args, args.data)
    vocab = build_vocabulary(cfg)
    _seed_everything(args.seed)
    policy, index = _policy_or_nn(args, cfg, vocab)
    ids, targets, _ = _targets(args, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines, refined_lines = [], []
    print("id\tcd_pixels\tprogram")
    for i, t in zip(ids, targets):
        if index is not None:
            p = nn_retrieve(index, t)
        else:
            p, _ = best_of(beam_search(policy, t, args.beam, cfg, mask=_mask(args.mask)), t, cfg)
        lines.append(format_program(p) if p is not None else "")
        final = p
        if args.refine_iters and p is not None:
            final = refine(p, t, args.refine_iters, cfg)
            refined_lines.append(format_program(final))
        cd = score_program(final, t, cfg)["cd_pixels"] if final is not None else cfg.diagonal
        print(f"{i}\t{cd:.4f}\t{format_program(final) if final is not None else ''}")
    out.write_text("".join(line + "\n" for line in lines))
    if refined_lines:
        out.with_suffix(".refined" + out.suffix).write_text("".join(line + "\n" for line in refined_lines))
    return 0


def cmd_eval(args) -> int:
    from .evaluation import EvalReport, eval_reconstruction, score_program
    from .lang import build_vocabulary
    from .nearest import nn_retrieve
    from .plotting import plot_cd_histogram

    cfg = _grammar(args, args.data)
    vocab = build_vocabulary(cfg)
    _seed_everything(args.seed)
    policy, index = _policy_or_nn(args, cfg, vocab)
    ids, targets, _ = _targets(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if index is not None:
        report = EvalReport()
        for i, t in zip(ids, targets):
            row = {"id": i, "k": 1, "refine_iters": 0}
            row.update(score_program(nn_retrieve(index, t), t, cfg))
            report.rows.append(row)
    else:
        report = eval_reconstruction(policy, targets, args.beam, args.refine_iters, cfg, mask=_mask(args.mask),
                                     ids=ids)
    report.to_csv(out / "report.csv")
    summary = report.summary()
    (out / "summary.txt").write_text(summary)
    plot_cd_histogram([r["cd_pixels"] for r in report.rows], out / "cd_hist.svg",
                      f"k={args.beam}, refine={args.refine_iters}")
    print(summary, end="")
    errors = sum(1 for r in report.rows if r.get("error"))
    return 0 if errors == 0 or args.keep_going else 1


def cmd_detect(args) -> int:
    from .evaluation import Detection, detection_scores, map_evaluation
    from .lang import build_vocabulary

    cfg = _grammar(args, args.data)
    vocab = build_vocabulary(cfg)
    _seed_everything(args.seed)
    policy = _load_policy(args, vocab)
    ids, targets, progs = _targets(args, cfg)
    if progs is None:
        raise UsageError("detection needs ground-truth programs: use --data/--split")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dets = [detection_scores(policy, t, args.beam, cfg, mask=_mask(args.mask)) for t in targets]
    gts = [[Detection.of(q) for q in dict.fromkeys(p.primitives)] for p in progs]
    n = cfg.dim
    with open(out / "detections.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["image_id", "class", "score"] + [f"{a}{b}" for b in "01" for a in "xyz"[:n]])
        for i, ds in zip(ids, dets):
            for d in ds:
                w.writerow([i, d.kind, repr(d.score)] + [repr(float(v)) for v in d.box])
    ap, m = map_evaluation(dets, gts, args.iou_threshold)
    with open(out / "ap.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["class", "ap"])
        for c, v in ap.items():
            w.writerow([c, repr(v)])
        w.writerow(["MAP", repr(m)])
    for c, v in ap.items():
        print(f"AP {c}: {v:.4f}")
    print(f"MAP: {m:.4f}")
    return 0


# -- plot ----------------------------------------------------------------------

def cmd_plot(args) -> int:
    from .plotting import plot_cd_by_gamma, plot_shaping, plot_training_curves

    out = Path(args.out)
    done = False
    if args.shaping:
        try:
            gammas = [float(g) for g in args.shaping.split(",") if g.strip()]
        except ValueError:
            raise UsageError(f"--shaping expects comma-separated numbers, got {args.shaping!r}")
        if not gammas or any(g <= 0 for g in gammas):
            raise UsageError("--shaping needs positive gamma values")
        print(plot_shaping(gammas, out))
        done = True
    if args.curves:
        logs = {Path(p).parent.name or Path(p).stem: p for p in args.curves}
        for p in args.curves:
            _require(p, "log")
        target = out if not done else out.with_name(out.stem + "_curves" + out.suffix)
        print(plot_training_curves(logs, target, args.keys.split(",")))
        done = True
    if args.cd_by_gamma:
        results: dict[float, list[float]] = {}
        with open(_require(args.cd_by_gamma, "results CSV"), newline="") as f:
            reader = csv.DictReader(f)
            if not reader.fieldnames or not {"gamma", "cd"} <= set(reader.fieldnames):
                raise UsageError("CD-by-gamma CSV needs gamma and cd columns")
            for row in reader:
                results.setdefault(float(row["gamma"]), []).append(float(row["cd"]))
        target = out if not done else out.with_name(out.stem + "_gamma" + out.suffix)
        print(plot_cd_by_gamma(results, target))
        done = True
    if not done:
        raise UsageError("nothing to plot: give --shaping, --curves or --cd-by-gamma")
    return 0


# -- argument parsing -------------------------------------------------------------

def _odd_len(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer")
    if v < 1 or v % 2 == 0:
        raise argparse.ArgumentTypeError(f"program lengths are odd and positive, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"grammar config file (default: ${CONFIG_ENV})")
    common.add_argument("--dim", choices=("2d", "3d"), default=None)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    common.add_argument("--keep-going", action="store_true", help="report per-item errors and exit 0")
    common.add_argument("-v", "--verbose", action="store_true")

    targets = argparse.ArgumentParser(add_help=False)
    targets.add_argument("--targets", help="packed raster file, PGM, or directory of PGMs")
    targets.add_argument("--data", help="dataset root (with --split)")
    targets.add_argument("--split", default="test", choices=("train", "val", "test"))
    targets.add_argument("--lengths", type=_odd_len, nargs="*")
    targets.add_argument("--limit", type=int, default=0)
    targets.add_argument("--beam", type=int, default=1)
    targets.add_argument("--refine-iters", type=int, default=0)
    targets.add_argument("--mask", choices=("on", "off"), default="on")

    ap = argparse.ArgumentParser(prog="csgprog", description="CSG program induction toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--preset", default="small", choices=("full", "small", "tiny"))
    g.add_argument("--len", type=int, action="append", help="keep only these program lengths (repeatable)")
    g.add_argument("--train", type=int, help="programs per length in the train split")
    g.add_argument("--val", type=int)
    g.add_argument("--test", type=int)
    g.add_argument("--no-rasters", action="store_true")
    g.set_defaults(func=cmd_gen)

    e = sub.add_parser("exec", parents=[common], help="render a program file")
    e.add_argument("programs")
    e.add_argument("--out", required=True)
    e.add_argument("--trace", action="store_true", help="dump top-of-stack after every instruction")
    e.add_argument("--figure", action="store_true", help="also write an SVG per program")
    e.add_argument("--off-grid", action="store_true", help="accept parameters off the grammar grid")
    e.set_defaults(func=cmd_exec)

    t = sub.add_parser("train", parents=[common], help="train a policy")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--mode", choices=("supervised", "reinforce"))
    t.add_argument("--train-config", help="key = value training config file")
    t.add_argument("--stack-k", type=int, default=0)
    t.add_argument("--init", help="checkpoint to start from")
    t.add_argument("--epochs", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--gamma", type=float)
    t.add_argument("--rollouts", type=int)
    t.add_argument("--canonical", action="store_true", help="canonical operand order for union/intersect")
    t.add_argument("--lengths", type=_odd_len, nargs="*")
    t.add_argument("--limit", type=int, default=0)
    t.add_argument("--time-limit", type=float)
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("infer", cmd_infer, "decode programs for targets"),
                                 ("eval", cmd_eval, "reconstruction report")):
        p = sub.add_parser(name, parents=[common, targets], help=helptext)
        p.add_argument("--checkpoint")
        p.add_argument("--nn-index", help="dataset root whose train split is the nearest-neighbour index")
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    d = sub.add_parser("detect", parents=[common, targets], help="primitive detection and MAP")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--iou-threshold", type=float, default=0.5)
    d.set_defaults(func=cmd_detect)

    pl = sub.add_parser("plot", parents=[common], help="render figures")
    pl.add_argument("--out", required=True)
    pl.add_argument("--shaping", help="comma-separated gamma values")
    pl.add_argument("--curves", nargs="*", help="CSV training logs")
    pl.add_argument("--keys", default="loss,val_loss")
    pl.add_argument("--cd-by-gamma", help="CSV with gamma,cd rows")
    pl.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.dim_given = args.dim is not None
    if args.dim is None:
        args.dim = "2d"
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .datagen import CapacityError
    from .formats import FormatError
    from .lang import CSGError
    from .policy import CheckpointError

    try:
        return args.func(args)
    except UsageError as e:
        parser.error(str(e))
    except (CapacityError, CheckpointError, FormatError, CSGError, OSError) as e:
        print(f"csgprog {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
