"""Command line front end. Exit codes: 0 ok, 2 usage, 3 config, 4 checkpoint
mismatch, 5 numeric abort."""

import argparse
import sys
from pathlib import Path

from . import metrics, pipeline
from .checkpoint import CheckpointMismatch
from .config import ABLATIONS, ConfigError, apply_overrides, load_config, \
    make_settings, preset_names
from .training import NumericAbort

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_CHECKPOINT = 4
EXIT_NUMERIC = 5


def _add_common(p):
    p.add_argument("--preset", default="desk", choices=preset_names(),
                   help="named settings bundle")
    p.add_argument("--config", default=None,
                   help="sectioned key=value file layered over the preset")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="single-setting override")


def build_parser():
    top = argparse.ArgumentParser(
        prog="signlab",
        description="desk-scale gloss-free sign language translation pipeline")
    top.add_argument("--workdir", default=".", help="all paths resolve against this")
    sub = top.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-data", help="write dataset, vocabulary, template")
    _add_common(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--vocab-size", type=int, default=None)
    p.add_argument("--train", type=int, default=None)
    p.add_argument("--val", type=int, default=None)
    p.add_argument("--test", type=int, default=None)
    p.add_argument("--out", default=None, help="run root (default: the workdir)")

    for name, helptext in (("pretrain-lm", "stage 1: linguistic pretraining"),
                           ("pretrain-visual", "stage 2: contrastive pretraining"),
                           ("tune", "stage 3: connector tuning"),
                           ("full-tune", "unfrozen end-to-end tuning")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        p.add_argument("--resume", action="store_true")
        p.add_argument("--stop-at", type=int, default=None,
                       help="halt after this many optimizer steps (for resume drills)")
        if name == "pretrain-lm":
            p.add_argument("--pair-doc-ratio", type=float, default=None)
        if name in ("tune", "full-tune"):
            p.add_argument("--allow-random-init", action="store_true",
                           help="tolerate missing stage-1/2 checkpoints")

    p = sub.add_parser("eval", help="translate a split and write a report")
    _add_common(p)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--bundle", default=None,
                   help="run root holding checkpoints, or the literal echo-stub")
    p.add_argument("--allow-random-init", action="store_true")

    p = sub.add_parser("translate", help="translate one SLTF video")
    _add_common(p)
    p.add_argument("--video", required=True)
    p.add_argument("--bundle", default=None)
    p.add_argument("--allow-random-init", action="store_true")

    p = sub.add_parser("ablate", help="baseline-vs-variant comparison")
    _add_common(p)
    p.add_argument("--name", required=True, choices=sorted(ABLATIONS))
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    return top


def _resolve(workdir: Path, p):
    p = Path(p)
    return p if p.is_absolute() else workdir / p


def _settings(args, workdir: Path):
    st = make_settings(args.preset)
    if args.config:
        st = load_config(_resolve(workdir, args.config), base=st)
    triples = []
    for item in args.overrides:
        key, sep, val = item.partition("=")
        sec, dot, field = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        triples.append((sec.strip(), field.strip(), val.strip()))
    return apply_overrides(st, triples)


def _run(args) -> int:
    wd = Path(args.workdir)
    st = _settings(args, wd)
    if args.cmd == "gen-data":
        for sec_key, val in (("seed", args.seed), ("vocab_size", args.vocab_size),
                             ("train", args.train), ("val", args.val),
                             ("test", args.test)):
            if val is not None:
                st = apply_overrides(st, [("data", sec_key, val)])
        root = _resolve(wd, args.out) if args.out else wd
        pipeline.generate_data(st, root)
        return EXIT_OK
    if args.cmd == "pretrain-lm":
        if args.pair_doc_ratio is not None:
            st = apply_overrides(st, [("stage1", "pair_doc_ratio", args.pair_doc_ratio)])
        pipeline.run_stage1(st, wd, resume=args.resume, stop_at=args.stop_at)
        return EXIT_OK
    if args.cmd == "pretrain-visual":
        pipeline.run_stage2(st, wd, resume=args.resume, stop_at=args.stop_at)
        return EXIT_OK
    if args.cmd == "tune":
        pipeline.run_stage3(st, wd, allow_random_init=args.allow_random_init,
                            resume=args.resume, stop_at=args.stop_at)
        return EXIT_OK
    if args.cmd == "full-tune":
        pipeline.run_fulltune(st, wd, allow_random_init=args.allow_random_init,
                              resume=args.resume, stop_at=args.stop_at)
        return EXIT_OK
    if args.cmd == "eval":
        if args.bundle == "echo-stub":
            report = pipeline.evaluate_bundle(st, wd, args.split, bundle="echo-stub")
        else:
            root = _resolve(wd, args.bundle) if args.bundle else wd
            report = pipeline.evaluate_bundle(
                st, root, args.split, allow_random_init=args.allow_random_init)
        sys.stdout.write(metrics.format_report(report))
        return EXIT_OK
    if args.cmd == "translate":
        root = _resolve(wd, args.bundle) if args.bundle else wd
        text = pipeline.translate_file(st, root, _resolve(wd, args.video),
                                       allow_random_init=args.allow_random_init)
        print(text)
        return EXIT_OK
    if args.cmd == "ablate":
        seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
        if not seeds:
            raise ConfigError("--seeds must list at least one integer")
        res = pipeline.run_ablation(st, wd, args.name, seeds=seeds, split=args.split)
        print(f"baseline median BLEU4 {res['baseline_median']:.4f}  "
              f"variant median BLEU4 {res['variant_median']:.4f}")
        return EXIT_OK
    raise ConfigError(f"unhandled command {args.cmd!r}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_USAGE
    try:
        return _run(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointMismatch as e:
        print(f"checkpoint mismatch: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_CONFIG


def entry():
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
