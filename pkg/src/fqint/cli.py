"""Command-line entry point: ``fqint <command> ...``.

Set ``FQINT_LOG_LEVEL`` (DEBUG, INFO, WARNING...) to control verbosity.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import calibration as cal
from .errors import QuantError
from .model import EncoderConfig, FloatEncoder, QuantizedEncoderModel, init_float_model

log = logging.getLogger("fqint")


def _bits(text: str) -> tuple[int, int, int]:
    try:
        w, a, attn = (int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("bits must look like W,A,Attn e.g. 8,8,4")
    return w, a, attn


def _emit(doc: dict, out: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
        log.info("wrote %s", out)
    else:
        print(text)


def _load_float(path) -> FloatEncoder:
    model = cal.load_model(path)
    if not isinstance(model, FloatEncoder):
        raise QuantError(f"{path} is not a float model")
    return model


def cmd_init_model(args) -> None:
    cfg = EncoderConfig(embed_dim=args.embed_dim, num_heads=args.heads, tokens=args.tokens,
                        depth=args.depth, mlp_ratio=args.mlp_ratio)
    cal.save_model(init_float_model(cfg, args.seed, args.qk_gain), args.out)


def cmd_gen_data(args) -> None:
    if args.kind == "gaussian":
        data = cal.gen_gaussian(args.n, args.tokens, args.channels, args.seed)
    else:
        data = cal.gen_channel_variance(args.n, args.tokens, args.channels, args.seed,
                                        spread=args.spread, outliers=args.outliers)
    cal.save_dataset(args.out, data, cal.toy_labels(data) if args.labels else None)


def cmd_calibrate(args) -> None:
    w, a, attn = args.bits
    cfg = cal.CalibrationConfig(num_samples=args.samples, K=args.K, weight_bits=w, act_bits=a,
                                attn_bits=attn, attention_mode=args.attn_mode,
                                layernorm_mode=args.ln_mode, seed=args.seed)
    data, _ = cal.load_dataset(args.data)
    qmodel = cal.run_calibration(_load_float(args.model), data, cfg)
    cal.save_model(qmodel, args.out)


def cmd_eval(args) -> None:
    data, labels = cal.load_dataset(args.data)
    if args.limit:
        data = data[: args.limit]
        labels = None if labels is None else labels[: args.limit]
    model = cal.load_model(args.model)
    _emit(cal.evaluate(model, data, _load_float(args.reference), labels), args.out)


def cmd_report(args) -> None:
    data, _ = cal.load_dataset(args.data)
    model = _load_float(args.model)
    if args.kind == "ranges":
        doc = cal.emit_channel_range_report(model, data)
    else:
        doc = cal.emit_attention_histogram(model, data, args.bins)
    _emit(doc, args.out)


def cmd_sweep_k(args) -> None:
    data, _ = cal.load_dataset(args.data)
    model = _load_float(args.model)
    data = data[: args.samples]
    errors = cal.sweep_k(model, data, range(args.kmin, args.kmax + 1), args.act_bits)
    doc = {"report": "k-sweep", "samples": int(len(data)),
           "layernorm_input_sq_error": {str(k): v for k, v in errors.items()},
           "total_sq_error": {str(k): float(sum(v.values())) for k, v in errors.items()}}
    _emit(doc, args.out)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fqint", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-model", help="write a randomly initialized float encoder")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--tokens", type=int, default=16)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--mlp-ratio", type=int, default=4)
    p.add_argument("--qk-gain", type=float, default=1.0)
    p.set_defaults(func=cmd_init_model)

    p = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    p.add_argument("--kind", choices=("gaussian", "channel-variance"), default="gaussian")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=1100)
    p.add_argument("--tokens", type=int, default=16)
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--spread", type=float, default=40.0)
    p.add_argument("--outliers", type=int, default=1)
    p.add_argument("--labels", action="store_true", help="also write labels.txt for the toy task")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("calibrate", help="post-training calibration of a float model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--K", type=int, default=3)
    p.add_argument("--bits", type=_bits, default=(8, 8, 4))
    p.add_argument("--attn-mode", choices=("lis", "uniform", "float"), default="lis")
    p.add_argument("--ln-mode", choices=("ptf", "float"), default="ptf")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", help="compare a model against the float reference")
    p.add_argument("--model", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--limit", type=int, default=0, help="evaluate only the first N samples")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="diagnostics reports")
    p.add_argument("kind", choices=("ranges", "attn-hist"))
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--bins", type=int, default=16)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep-k", help="LayerNorm-input quantization error for a range of K")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--kmin", type=int, default=0)
    p.add_argument("--kmax", type=int, default=4)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--act-bits", type=int, default=8)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep_k)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("FQINT_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (QuantError, OSError, KeyError) as exc:
        print(f"fqint {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
