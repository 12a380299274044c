"""Command-line entry point: gen, corrupt, train, refine and eval.

Exit codes: 0 success, 1 usage, 2 I/O or file format, 3 numeric instability.
Results go to stdout (paths and summaries); diagnostics go to stderr.
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import (KINDS as SHAPE_KINDS, ShapeSpec, default_corruption, load_image, load_mask,
                   make_dataset, read_manifest, save_mask, write_dataset)
from .errors import ContractError, FormatError, NumericInstabilityError
from .metrics import aggregate, evaluate, write_report
from .morph import KINDS as CORRUPTION_KINDS, CorruptionSpec, apply_kind, corrupt, fill_holes
from .nca import ModelConfig, binarize, load_checkpoint, rollout
from .train import TrainConfig, dataset_source, load_config, parse_config_text, train_loop

log = logging.getLogger("rnca")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
MASK_SUFFIXES = (".pgm", ".png")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _fractions(text):
    try:
        parts = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    return parts


def _list_masks(paths):
    """Expand files and directories into sorted (id, path) pairs."""
    found = {}
    for p in map(Path, paths):
        if p.is_dir():
            files = [f for f in p.iterdir() if f.suffix.lower() in MASK_SUFFIXES]
        elif p.exists():
            files = [p]
        else:
            raise FileNotFoundError(f"no such file or directory: {p}")
        for f in files:
            if f.stem in found and found[f.stem] != f:
                raise UsageError(f"duplicate id {f.stem!r}: {found[f.stem]} and {f}")
            found[f.stem] = f
    return sorted(found.items())


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args):
    if args.n < 3:
        raise UsageError(f"--n must be at least 3, got {args.n}")
    spec = ShapeSpec(kind=args.kind, size=args.size)
    cspec = default_corruption(args.kind)
    if args.corruption:
        cspec = CorruptionSpec.single(args.corruption)
    if args.identity_fraction is not None:
        cspec = replace(cspec, identity_fraction=args.identity_fraction)
    ds = make_dataset(args.n, spec, cspec, np.random.default_rng(args.seed), fractions=args.fractions)
    manifest = write_dataset(ds, args.out)
    print(manifest)


def cmd_corrupt(args):
    cspec = CorruptionSpec.single(args.kind)
    if args.identity_fraction is not None:
        cspec = replace(cspec, identity_fraction=args.identity_fraction)
    out = Path(args.out)
    for k, (rid, path) in enumerate(_list_masks(args.masks)):
        rng = np.random.default_rng([args.seed, k])
        mask = load_mask(path)
        bad = corrupt(mask, cspec, rng) if cspec.identity_fraction else apply_kind(mask, args.kind, cspec, rng)
        print(save_mask(out / f"{rid}.pgm", bad))


def _train_configs(args):
    model_kw, train_kw = {}, {}
    try:
        if args.config:
            model_kw, train_kw = load_config(args.config)
        m, t = parse_config_text("\n".join(args.set or []), "--set")
    except FormatError as e:
        raise UsageError(str(e))
    model_kw.update(m)
    train_kw.update(t)
    for flag, key in (("iterations", "iterations"), ("seed", "seed"), ("batch_size", "batch_size"),
                      ("lr", "learning_rate"), ("steps", "total_steps")):
        value = getattr(args, flag)
        if value is not None:
            train_kw[key] = value
    try:
        return ModelConfig(**model_kw), TrainConfig(**train_kw)
    except ContractError as e:
        raise UsageError(str(e))


def cmd_train(args):
    ds = read_manifest(args.manifest)
    model_config, train_config = _train_configs(args)
    pairs = ds.subset(args.split)
    if not pairs:
        raise UsageError(f"manifest {args.manifest} has no {args.split!r} samples")
    log.info("training on %d samples for %d iterations", len(pairs), train_config.iterations)
    log_path = args.log or Path(args.out).with_suffix(".loss.csv")
    result = train_loop(dataset_source([p.triple() for p in pairs]), model_config, train_config,
                        checkpoint_path=args.out, log_path=log_path)
    print(args.out)
    print(log_path)
    if result.history:
        print(f"final_loss={result.history[-1][1]:.6g}")


def _refine_inputs(args):
    if args.manifest:
        if args.mask or args.image:
            raise UsageError("use either --manifest or --mask/--image, not both")
        ds = read_manifest(args.manifest)
        pairs = ds.subset(args.split) if args.split != "all" else ds.pairs
        return sorted(((p.id, p.corrupted, p.image) for p in pairs), key=lambda r: r[0])
    if not args.mask or not args.image:
        raise UsageError("refine needs --manifest or both --mask and --image")
    masks = _list_masks(args.mask)
    images = dict(_list_masks(args.image))
    rows = []
    for rid, path in masks:
        if rid not in images:
            raise UsageError(f"no image for mask {rid!r}")
        rows.append((rid, load_mask(path), load_image(images[rid])))
    return rows


def cmd_refine(args):
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    if not 0 < args.threshold < 1:
        raise UsageError("--threshold must lie in (0, 1)")
    params = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    for k, (rid, mask, image) in enumerate(_refine_inputs(args)):
        if image.shape[:2] != mask.shape:
            raise UsageError(f"{rid}: image {image.shape[:2]} and mask {mask.shape} differ in size")
        rng = np.random.default_rng([args.seed, k])
        traj = rollout(mask, image, params, args.steps, rng, args.deterministic,
                       snapshots=args.snapshots)
        print(save_mask(out / f"{rid}.pgm", binarize(traj.final, args.threshold)))
        for t, snap in enumerate(traj.snapshots, 1):
            save_mask(out / "snapshots" / f"{rid}_step{t:03d}.pgm", binarize(snap, args.threshold))


def cmd_eval(args):
    preds = dict(_list_masks([args.pred]))
    gts = dict(_list_masks([args.gt]))
    inputs = {}
    if args.baseline == "fill":
        if not args.input:
            raise UsageError("--baseline fill needs --input (the unrefined masks)")
        inputs = dict(_list_masks([args.input]))
    ids = sorted(set(preds) & set(gts) & (set(inputs) if inputs else set(preds)))
    unmatched = sorted((set(preds) | set(gts) | set(inputs)) - set(ids))
    for rid in unmatched:
        log.warning("unmatched id %s excluded", rid)
    if not ids:
        raise UsageError("no matching ids between prediction and ground-truth directories")
    rows, base = [], []
    for rid in ids:
        gt = load_mask(gts[rid])
        rows.append((rid, evaluate(load_mask(preds[rid]), gt)))
        if inputs:
            base.append((rid, evaluate(fill_holes(load_mask(inputs[rid])), gt)))
    extra = [("fill_", [r for _, r in base])] if base else []
    print(write_report(args.out, rows, extra))
    if base:
        print(write_report(Path(args.out).with_name(Path(args.out).stem + "_fill.csv"), base))
    _print_summary("", aggregate([r for _, r in rows]))
    if base:
        _print_summary("fill_", aggregate([r for _, r in base]))
    print(f"unmatched={len(unmatched)}")


def _print_summary(prefix, agg):
    print(f"{prefix}n={agg['n']}")
    for key, value in agg.items():
        if isinstance(value, tuple):
            print(f"{prefix}{key}={value[0]:.6f}+-{value[1]:.6f}")
        elif key != "n":
            print(f"{prefix}{key}={value}")


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = _Parser(prog="rnca", description="Refinement neural cellular automata for binary masks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="synthesize an image/gt/corrupted dataset")
    g.add_argument("--kind", choices=SHAPE_KINDS, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corruption", choices=CORRUPTION_KINDS, help="override the kind's default corruption")
    g.add_argument("--identity-fraction", type=float)
    g.add_argument("--fractions", type=_fractions, default=(0.7, 0.15, 0.15), help="train,val,test")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    c = sub.add_parser("corrupt", help="corrupt existing masks")
    c.add_argument("masks", nargs="+", help="mask files or directories")
    c.add_argument("--kind", choices=CORRUPTION_KINDS, required=True)
    c.add_argument("--identity-fraction", type=float)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_corrupt)

    t = sub.add_parser("train", help="train a model on a dataset manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--split", default="train")
    t.add_argument("--config", help="file of 'key = value' lines")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--steps", type=int, help="unrolled steps T")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="loss CSV path (default: next to the checkpoint)")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("refine", help="refine masks with a trained model")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--manifest")
    r.add_argument("--split", default="test", help="manifest split, or 'all'")
    r.add_argument("--mask", nargs="+")
    r.add_argument("--image", nargs="+")
    r.add_argument("--steps", type=int, default=64)
    r.add_argument("--threshold", type=float, default=0.5)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--deterministic", action="store_true", help="disable stochastic skipping")
    r.add_argument("--snapshots", action="store_true", help="write one mask per step")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_refine)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--baseline", choices=("fill", "none"), default="none")
    e.add_argument("--input", help="unrefined masks, for the fill baseline")
    e.add_argument("--seed", type=int, default=0, help="accepted for symmetry; eval is deterministic")
    e.add_argument("--out", required=True, help="CSV report path")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"rnca: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except UsageError as e:
        print(f"rnca {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericInstabilityError as e:
        print(f"rnca {args.command}: numeric instability: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as e:
        print(f"rnca {args.command}: {e}", file=sys.stderr)
        return EXIT_IO
    except ContractError as e:
        print(f"rnca {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
