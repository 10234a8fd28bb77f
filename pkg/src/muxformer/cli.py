"""``muxformer`` command line: train, eval, bench, flops."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from threadpoolctl import threadpool_limits

from . import harness
from .data import load_dataset
from .models import load_checkpoint


def _threads() -> int | None:
    raw = os.environ.get("MUXFORMER_THREADS")
    if not raw:
        return None
    value = int(raw)
    if value < 1:
        raise SystemExit(f"MUXFORMER_THREADS must be >= 1, got {raw!r}")
    return value


def _batch_sizes(text: str) -> list[int]:
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not sizes or min(sizes) < 1:
        raise argparse.ArgumentTypeError("batch sizes must be positive")
    return sizes


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(s) for s in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def cmd_train(args) -> int:
    cfg = harness.load_train_config(args.config)
    if args.output_dir:
        cfg = harness.dataclasses.replace(cfg, output_dir=args.output_dir)
    record = harness.train(cfg)
    for info in record.epochs:
        print(json.dumps(info, sort_keys=True))
    print(f"metrics: {record.metrics_path}")
    print(f"checkpoint: {record.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data, args.format, labels_path=args.labels, pad_to=args.pad_to,
                      mean=args.mean, std=args.std, num_classes=args.num_classes or state.config.num_classes,
                      offset=args.offset, limit=args.limit)
    result = harness.evaluate(state, ds, args.batch_size)
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    cfg = harness.model_config_from_file(args.config)
    threads = 1 if args.single_thread else _threads()
    res = harness.bench_throughput(cfg, args.batch_sizes, repeats=args.repeats, warmup=args.warmup,
                                   threads=threads)
    print(f"{'batch':>6} {'img/s':>10} {'vit img/s':>10} {'speedup':>8}")
    for bs, r in res.items():
        print(f"{bs:>6} {r['images_per_sec']:>10.1f} {r['vit_images_per_sec']:>10.1f} {r['speedup']:>8.3f}")
    return 0


def cmd_flops(args) -> int:
    configs = [harness.model_config_from_file(p) for p in args.config]
    names = [os.path.splitext(os.path.basename(p))[0] for p in args.config]
    sys.stdout.write(harness.report_flops(configs, names, as_csv=args.csv))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="muxformer", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a JSON TrainConfig")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir", help="override output_dir from the config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="IDX image file, CIFAR .bin file or CIFAR directory")
    p.add_argument("--format", default="idx-ubyte", choices=["idx-ubyte", "cifar-binary"])
    p.add_argument("--labels", help="IDX label file (inferred when omitted)")
    p.add_argument("--pad-to", type=int)
    p.add_argument("--mean", type=_floats, help="per-channel normalisation mean, comma-separated")
    p.add_argument("--std", type=_floats, help="per-channel normalisation std, comma-separated")
    p.add_argument("--num-classes", type=int, help="defaults to the checkpoint's class count")
    p.add_argument("--offset", type=int, default=0)
    p.add_argument("--limit", type=int)
    p.add_argument("--batch-size", type=int, default=128)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="inference throughput against a matched ViT")
    p.add_argument("--config", required=True)
    p.add_argument("--batch-sizes", type=_batch_sizes, default=[64])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--single-thread", action="store_true", help="pin BLAS to one thread")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("flops", help="analytic FLOPs per image")
    p.add_argument("--config", required=True, nargs="+")
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_flops)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    with threadpool_limits(limits=_threads()):
        return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
