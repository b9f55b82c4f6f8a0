"""Command line: ``braidnet {gen-braid,show-arch,train,compare,sweep}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import arch, braid, experiments
from .experiments import DataRef, RunConfig
from .model import MixConfig

MIXING_KINDS = (arch.BRAIDNET, arch.RANDOM)


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _arch_list(text: str) -> list[str]:
    kinds = [t.strip() for t in text.split(",") if t.strip()]
    for k in kinds:
        if k not in arch.KINDS:
            raise argparse.ArgumentTypeError(f"unknown architecture {k!r}; choose from {', '.join(arch.KINDS)}")
    return kinds


def _add_training_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--alpha", type=float, default=None, help="influence coefficient (default 0.01)")
    p.add_argument("--mix-interval", type=int, default=None, help="mix every k-th batch (default 1)")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--data", default="synth", help="'synth' or a dataset manifest JSON")
    p.add_argument("--train-per-class", type=int, default=None)
    p.add_argument("--test-per-class", type=int, default=None)
    p.add_argument("--image-side", type=int, default=None)
    p.add_argument("--data-seed", type=int, default=None)
    p.add_argument("--out", default=None, help="CSV path (default: standard output)")
    p.add_argument("--manifest", default=None, help="run manifest path (default: <out>.manifest.json)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="braidnet", description="Braid-structured multi-strand networks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-braid", help="sample a random braid word")
    p.add_argument("--strands", type=int, required=True)
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("show-arch", help="print an architecture spec as JSON")
    p.add_argument("--arch", choices=arch.KINDS, required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--crossings", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-side", type=int, default=16)

    p = sub.add_parser("train", help="train one architecture")
    p.add_argument("--arch", choices=arch.KINDS, required=True)
    p.add_argument("--crossings", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    _add_training_opts(p)

    p = sub.add_parser("compare", help="train several architectures over several seeds")
    p.add_argument("--arch", type=_arch_list, required=True, help="comma-separated kinds")
    p.add_argument("--crossings", type=int, default=None)
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4])
    p.add_argument("--summary", default=None, help="median-curve CSV path")
    _add_training_opts(p)

    p = sub.add_parser("sweep", help="BraidNets with k crossings per gap")
    p.add_argument("--k", type=_int_list, default=[1, 2, 3, 4, 5])
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4])
    p.add_argument("--summary", default=None, help="median-curve CSV path")
    _add_training_opts(p)
    return parser


def _data_ref(args, parser) -> DataRef:
    synth_opts = {"train_per_class": args.train_per_class, "test_per_class": args.test_per_class,
                  "image_side": args.image_side, "seed": args.data_seed}
    given = {k: v for k, v in synth_opts.items() if v is not None}
    if args.data == "synth":
        return DataRef("synth", **given)
    if given:
        parser.error("synthetic-data options cannot be combined with a manifest")
    return DataRef("manifest", path=args.data)


def _config(args, parser, kind: str, crossings: int | None, seed: int) -> RunConfig:
    mixes = kind in MIXING_KINDS
    if not mixes and crossings is not None:
        parser.error(f"--crossings is not valid for --arch {kind}")
    if not mixes and (args.alpha is not None or args.mix_interval is not None):
        parser.error(f"--alpha/--mix-interval are not valid for --arch {kind}")
    defaults = MixConfig()
    try:
        mix = MixConfig(defaults.alpha if args.alpha is None else args.alpha,
                        defaults.mix_interval if args.mix_interval is None else args.mix_interval)
        return RunConfig(kind, num_classes=args.classes,
                         crossings_per_gap=(1 if crossings is None else crossings) if mixes else 0,
                         mix=mix, lr=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                         master_seed=seed, data=_data_ref(args, parser))
    except ValueError as exc:
        parser.error(str(exc))


def _emit(args, report: experiments.ComparisonReport) -> int:
    text = experiments.csv_text(report.rows())
    manifest = report.manifest()
    if args.out:
        experiments.write_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    manifest_path = args.manifest or (f"{args.out}.manifest.json" if args.out else None)
    if manifest_path:
        experiments.write_json(manifest_path, manifest)
    else:
        sys.stderr.write(json.dumps(manifest, sort_keys=True) + "\n")
    if getattr(args, "summary", None):
        experiments.write_atomic(args.summary, experiments.summary_csv_text(report.summary()))
    if report.failures:
        for name, seed, err in report.failures:
            print(f"FAILED {name} seed={seed}: {err}", file=sys.stderr)
        return 1
    return 0


def cmd_gen_braid(args, parser) -> int:
    if args.strands < 2:
        parser.error("--strands must be at least 2")
    if args.length < 0:
        parser.error("--length must be non-negative")
    w = braid.random_word(args.strands, args.length, args.seed)
    print(braid.format_word(w))
    print("perm=" + ",".join(str(p - 1) for p in braid.permutation(w).mapping))
    return 0


def cmd_show_arch(args, parser) -> int:
    if args.arch not in MIXING_KINDS and args.crossings is not None:
        parser.error(f"--crossings is not valid for --arch {args.arch}")
    k = (1 if args.crossings is None else args.crossings) if args.arch in MIXING_KINDS else 0
    try:
        spec = arch.build(args.arch, args.classes, (1, args.image_side, args.image_side), k, args.seed)
    except ValueError as exc:
        parser.error(str(exc))
    print(spec.to_json())
    return 0


def cmd_train(args, parser) -> int:
    cfg = _config(args, parser, args.arch, args.crossings, args.seed)
    report = experiments.compare({args.arch: cfg}, [args.seed])
    return _emit(args, report)


def cmd_compare(args, parser) -> int:
    if args.crossings is not None and not any(k in MIXING_KINDS for k in args.arch):
        parser.error("--crossings needs a braidnet or random architecture in --arch")
    if not args.seeds:
        parser.error("--seeds is empty")
    configs = {}
    for kind in args.arch:
        crossings = args.crossings if kind in MIXING_KINDS else None
        if kind not in MIXING_KINDS and (args.alpha is not None or args.mix_interval is not None):
            args_kind = argparse.Namespace(**{**vars(args), "alpha": None, "mix_interval": None})
            configs[kind] = _config(args_kind, parser, kind, crossings, args.seeds[0])
        else:
            configs[kind] = _config(args, parser, kind, crossings, args.seeds[0])
    return _emit(args, experiments.compare(configs, args.seeds))


def cmd_sweep(args, parser) -> int:
    if not args.k or any(k < 0 for k in args.k):
        parser.error("--k needs non-negative integers")
    if not args.seeds:
        parser.error("--seeds is empty")
    base = _config(args, parser, arch.BRAIDNET, None, args.seeds[0])
    return _emit(args, experiments.sweep_crossings(base, args.k, args.seeds))


COMMANDS = {
    "gen-braid": cmd_gen_braid,
    "show-arch": cmd_show_arch,
    "train": cmd_train,
    "compare": cmd_compare,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    return COMMANDS[args.command](args, sub)


if __name__ == "__main__":
    sys.exit(main())
