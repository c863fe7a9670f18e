"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 numeric divergence,
4 sweep finished with low-confidence points present.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import harness, qinfer
from .compress import DivergenceError
from .harness import ConfigError, ExperimentConfig, load_config
from .qmodel import QuantizedModel

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_LOW_CONFIDENCE = 4


def _config_from_args(args):
    if args.config:
        return load_config(args.config)
    return ExperimentConfig()


def _cmd_train(args):
    config = _config_from_args(args)
    net, history = harness.cmd_train(config, out_dir=args.out)
    print(f"trained {config.system} network: final epoch loss {history[-1]['loss']:.6f}")
    print(f"checkpoint written under {args.out}")
    return EXIT_OK


def _cmd_compress(args):
    config = _config_from_args(args)
    if args.bits:
        config.lc.bits = args.bits
    net, _ = harness.load_checkpoint(args.checkpoint)
    net, model, trace, report = harness.cmd_compress(net, config, method=args.method,
                                                     out_dir=args.out)
    print(f"{args.method} compression at {config.lc.bits} bit(s): "
          f"levels per layer = {2 ** config.lc.bits + 1}, "
          f"compression rate = {report['compression_rate']:.2f}")
    if trace:
        print(f"final consensus gap ||w - w_hat|| = {trace[-1].gap:.4g}")
    return EXIT_OK


def _cmd_sweep(args):
    config = _config_from_args(args)
    net, _ = harness.load_checkpoint(args.checkpoint)
    lc_model = QuantizedModel.load_binary(args.lc_model) if args.lc_model else None
    post_model = QuantizedModel.load_binary(args.post_model) if args.post_model else None
    kinds = harness.build_receivers(config, net, lc_model, post_model)
    records = harness.cmd_sweep(kinds, config, out_path=args.out)
    for rec in records:
        flag = " LOW-CONFIDENCE" if rec.low_confidence else ""
        print(f"{rec.receiver:18s} snr {rec.snr_db:+6.1f} dB  ber {rec.ber:.3e} "
              f"({rec.errors}/{rec.symbols}){flag}")
    if harness.has_low_confidence(records):
        return EXIT_LOW_CONFIDENCE
    return EXIT_OK


def _cmd_reproduce(args):
    config = load_config(args.config) if args.config else None
    result = harness.cmd_reproduce(args.figure, scale=args.scale, out_dir=args.out,
                                   master_seed=args.seed, config=config)
    print(f"figure {args.figure} ({args.scale} scale) records: {result['records_path']}")
    if harness.has_low_confidence(result["records"]):
        return EXIT_LOW_CONFIDENCE
    return EXIT_OK


def _cmd_inspect(args):
    model = QuantizedModel.load_binary(args.model)
    print(f"bits: {model.bits}")
    print(f"quantized tensors: {len(model.quantized)}, raw tensors: {len(model.raw)}")
    print(f"storage compression rate: {model.storage_compression_rate():.2f}")
    for name, qt in model.quantized.items():
        values = ", ".join(f"{v:+.4g}" for v in qt.codebook.values)
        print(f"  {name}: shape {qt.shape}, levels [{values}], "
              f"pruned {100 * qt.pruned_fraction:.1f}%")
    return EXIT_OK


def _cmd_report_ops(args):
    model = QuantizedModel.load_binary(args.model)
    rng = np.random.default_rng(args.seed)
    first = model.arch[0]
    if first.kind == "conv2d":
        shape = (args.batch, args.antennas, args.block_len)
    elif first.kind == "conv1d":
        shape = (args.batch, args.block_len)
    else:
        shape = (args.batch, first.in_dim)
    counter = qinfer.OpCounter()
    qinfer.qforward(model, rng.normal(size=shape), counter)
    report = qinfer.count_report(counter, model)
    text = json.dumps(report, indent=1)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    print(text)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="fsolc",
                                     description="compression-aware CNN training and FSO BER harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="pre-train the full-precision receiver CNN")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--out", default="out", help="output directory")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("compress", help="quantize and prune a trained checkpoint")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--method", choices=["lc", "post"], default="lc")
    p.add_argument("--bits", type=int, default=0, help="override config bits")
    p.add_argument("--out", default="out")
    p.set_defaults(func=_cmd_compress)

    p = sub.add_parser("sweep", help="Monte-Carlo BER versus SNR")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lc-model")
    p.add_argument("--post-model")
    p.add_argument("--out", default="records.csv")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("reproduce", help="end-to-end pipeline for one BER figure")
    p.add_argument("--figure", type=int, required=True, choices=sorted(harness.FIGURES))
    p.add_argument("--scale", choices=sorted(harness.SCALES), default="desk")
    p.add_argument("--config", help="override the preset config entirely")
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--out", default="reproduce")
    p.set_defaults(func=_cmd_reproduce)

    p = sub.add_parser("inspect-model", help="print a quantized model's codebooks")
    p.add_argument("--model", required=True)
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("report-ops", help="shift/add cost report for a quantized model")
    p.add_argument("--model", required=True)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--block-len", type=int, default=10)
    p.add_argument("--antennas", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_report_ops)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
