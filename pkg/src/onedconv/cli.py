"""Command line entry point: ``onedconv <subcommand>`` (or ``python -m onedconv``)."""
from __future__ import annotations

import argparse
import csv
import logging
import sys

from . import gradcheck
from .accounting import build_model_graph, count_buffers, count_params, layer_table
from .data import DistortionSpec, distort_dataset, load_idx, save_idx
from .train import TrainConfig, dump_offsets, evaluate, load_checkpoint, train


def _cmd_gradcheck(args) -> int:
    cases = gradcheck.default_cases()
    if args.op:
        cases = [c for c in cases if c.name in args.op]
        if not cases:
            print(f"no such op; choose from {[c.name for c in gradcheck.default_cases()]}",
                  file=sys.stderr)
            return 2
    ok = True
    for case in cases:
        reports = [gradcheck.check(case, seed) for seed in range(args.seeds)]
        worst = max(r.max_rel for r in reports)
        passed = all(r.passed for r in reports)
        ok &= passed
        print(f"{case.name:<12s} {worst:.3e} {'pass' if passed else 'FAIL'}")
    return 0 if ok else 1


def _cmd_account(args) -> int:
    graph = build_model_graph(args.model, args.variant, args.classes,
                              (args.in_channels, args.size, args.size))
    rows = layer_table(graph)
    total_params = count_params(graph)
    total_main = sum(r.main_flops for r in rows)
    total_over = sum(r.overhead_flops for r in rows)
    if args.csv:
        w = csv.writer(sys.stdout)
        w.writerow(["name", "kind", "params", "main_flops", "overhead_flops"])
        w.writerows(rows)
        w.writerow(["total", "", total_params, total_main, total_over])
        return 0
    print(f"{'layer':<28s} {'kind':<9s} {'params':>10s} {'main FLOPs':>14s} {'overhead':>12s}")
    for r in rows:
        if r.params or r.main_flops:
            print(f"{r.name:<28s} {r.kind:<9s} {r.params:>10d} {r.main_flops:>14d} {r.overhead_flops:>12d}")
    print(f"{'total':<28s} {'':<9s} {total_params:>10d} {total_main:>14d} {total_over:>12d}")
    print(f"trainable params: {total_params / 1e6:.2f} M  (+{count_buffers(graph)} BN running stats)")
    return 0


def _cmd_distort(args) -> int:
    ds = load_idx(args.inp[0], args.inp[1], args.limit)
    spec = DistortionSpec.for_mode(args.mode, args.seed)
    save_idx(distort_dataset(ds, spec), args.out[0], args.out[1])
    print(f"wrote {len(ds)} {args.mode} images ({spec.rotation=}, {spec.scale=}, "
          f"{spec.translation=}, order scale,rotate,translate)")
    return 0


def _cmd_train(args) -> int:
    text = open(args.config).read() if args.config else ""
    text += "\n" + "\n".join(args.set or [])
    cfg = TrainConfig.from_text(text)
    _, records = train(cfg)
    for r in records:
        print(f"epoch {r.epoch:3d} {r.split:<5s} loss {r.loss:.4f} acc {r.accuracy:.4f}")
    return 0


def _eval_data(args):
    ds = load_idx(args.data[0], args.data[1], args.limit)
    if args.distortion != "origin":
        ds = distort_dataset(ds, DistortionSpec.for_mode(args.distortion, args.seed))
    return ds


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    rec = evaluate(model, _eval_data(args), split=args.distortion)
    print("split,loss,accuracy," + ",".join(f"offset_dev_{k}" for k in rec.offset_dev))
    print(",".join([rec.split, repr(rec.loss), repr(rec.accuracy)]
                   + [repr(v) for v in rec.offset_dev.values()]))
    return 0


def _cmd_dump_offsets(args) -> int:
    model = load_checkpoint(args.checkpoint)
    rows = dump_offsets(model, _eval_data(args), args.out)
    for r in rows:
        print(f"{r['layer']:<10s} mean {r['mean_deviation']:.4f} max {r['max_deviation']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="onedconv", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    g.add_argument("--seeds", type=int, default=20)
    g.add_argument("--op", action="append")
    g.set_defaults(func=_cmd_gradcheck)

    a = sub.add_parser("account", help="per-layer parameter and FLOP table")
    a.add_argument("--model", default="resnet18", choices=["resnet18", "tiny-cnn"])
    a.add_argument("--variant", default="onedconv", choices=["vanilla", "onedconv"])
    a.add_argument("--classes", type=int, default=10)
    a.add_argument("--in-channels", type=int, default=3)
    a.add_argument("--size", type=int, default=32)
    a.add_argument("--csv", action="store_true")
    a.set_defaults(func=_cmd_account)

    d = sub.add_parser("distort", help="write a Rotated / RTS copy of an IDX pair")
    d.add_argument("--mode", required=True, choices=["origin", "rotated", "rts"])
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--in", dest="inp", nargs=2, required=True, metavar=("IMAGES", "LABELS"))
    d.add_argument("--out", nargs=2, required=True, metavar=("IMAGES", "LABELS"))
    d.add_argument("--limit", type=int)
    d.set_defaults(func=_cmd_distort)

    t = sub.add_parser("train", help="train from a key=value config")
    t.add_argument("--config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.set_defaults(func=_cmd_train)

    for name, func, extra in (("eval", _cmd_eval, False), ("dump-offsets", _cmd_dump_offsets, True)):
        e = sub.add_parser(name)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", nargs=2, required=True, metavar=("IMAGES", "LABELS"))
        e.add_argument("--distortion", default="origin", choices=["origin", "rotated", "rts"])
        e.add_argument("--seed", type=int, default=1)
        e.add_argument("--limit", type=int)
        if extra:
            e.add_argument("--out", required=True)
        e.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    return args.func(args)
