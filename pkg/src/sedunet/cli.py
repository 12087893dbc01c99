"""Command-line entry point: ``sedunet <command> ...``.

Exit codes: 0 success, 1 runtime error, 2 verification failure (argparse
usage errors also exit with 2).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import MISSING, dataclass, fields

import numpy as np

from sedunet.algebra import (
    SUPPORTED_DIMS,
    HyperNumber,
    cayley_dickson_table,
    find_zero_divisor,
    hyper_mul,
    paper_table_16,
)
from sedunet.data import (
    HORIZON_NAMES,
    Dataset,
    GeneratorConfig,
    WindowSpec,
    denormalize_and_quantize,
    extract_window,
    save_tensor,
    write_dataset,
)
from sedunet.layers import HxConvLayer, hxconv_forward, hxconv_init, hxconv_param_count, real_conv_param_count
from sedunet.model import ModelConfig, SedUNet
from sedunet.tensor import Conv2dSpec, Prng, conv2d
from sedunet.train import TrainConfig, evaluate, fit, load_checkpoint, restore_model

EXIT_OK, EXIT_ERROR, EXIT_VERIFY = 0, 1, 2


@dataclass
class DataConfig:
    root: str | None = None   # used when --data is not given


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}


def load_run_config(path) -> dict:
    """Parse a run config JSON into ``{"model": ModelConfig, "train": TrainConfig, "data": DataConfig}``."""
    with open(path) as f:
        doc = json.load(f)
    if not isinstance(doc, dict):
        raise ValueError("config must be a JSON object")
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    out = {}
    for name, cls in SECTIONS.items():
        section = doc.get(name, {})
        if not isinstance(section, dict):
            raise ValueError(f"config section {name!r} must be an object")
        if hasattr(cls, "from_dict"):
            out[name] = cls.from_dict(section)
        else:
            bad = set(section) - {f.name for f in fields(cls)}
            if bad:
                raise ValueError(f"unknown {name} config keys: {sorted(bad)}")
            out[name] = cls(**section)
    return out


def config_help() -> str:
    lines = ["config keys (JSON sections and defaults):"]
    for name, cls in SECTIONS.items():
        lines.append(f"  {name}:")
        for f in fields(cls):
            if f.default is not MISSING:
                default = f.default
            elif f.default_factory is not MISSING:
                default = f.default_factory()
            else:
                default = "(required)"
            lines.append(f"    {f.name} = {json.dumps(default)}")
    return "\n".join(lines)


# ---------------------------------------------------------------- commands

def cmd_table(args) -> int:
    table = cayley_dickson_table(args.dim)
    print(table.to_text())
    if not args.verify:
        return EXIT_OK
    problems = []
    if not table.is_latin_square():
        problems.append("table is not a Latin square in absolute index")
    if args.dim == 16:
        ref = paper_table_16()
        for r, c, got, want in table.mismatches(ref):
            problems.append(f"entry ({r},{c}): got {got:+d}, transcribed {want:+d}")
    if problems:
        print("\n".join(problems), file=sys.stderr)
        return EXIT_VERIFY
    n = args.dim * args.dim
    if args.dim == 16:
        print(f"OK: {n}/{n} entries match Eq.(1)")
    else:
        print(f"OK: {n}/{n} entries form a Latin square")
    return EXIT_OK


def cmd_gen(args) -> int:
    mult = 2 ** args.depth
    for name in ("height", "width"):
        if getattr(args, name) % mult:
            raise ValueError(f"{name} not divisible by {mult}")
    cfg = GeneratorConfig(height=args.height, width=args.width, num_days=args.days, seed=args.seed,
                          num_lanes=args.lanes, incident_rate=args.incident_rate, val_days=args.val_days)
    manifest = write_dataset(args.out, cfg, force=args.force)
    print(f"wrote {cfg.num_days} days ({manifest['height']}x{manifest['width']}) to {args.out}: "
          f"train {manifest['train']} val {manifest['val']}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config) if args.config else {
        "model": ModelConfig(), "train": TrainConfig(), "data": DataConfig()}
    root = args.data or cfg["data"].root
    if root is None:
        raise ValueError("no dataset: pass --data or set data.root in the config")
    model = SedUNet(cfg["model"])
    resume = load_checkpoint(args.resume) if args.resume else None
    _, history = fit(model, Dataset(root), cfg["train"], out_dir=args.out, resume=resume)
    if history:
        last = history[-1]
        print(f"epoch {last['epoch']} train_mse {last['train_mse']:.6e} val_mse {last['val_mse']:.6e}")
    return EXIT_OK


def _load_model(path) -> SedUNet:
    return restore_model(load_checkpoint(path))


def cmd_predict(args) -> int:
    model = _load_model(args.ckpt)
    ds = Dataset(args.data)
    if not 0 <= args.day < ds.manifest["num_days"]:
        raise ValueError(f"day {args.day} out of range [0, {ds.manifest['num_days']})")
    inputs, _ = extract_window(ds.day(args.day), WindowSpec(args.t))
    pred = model.predict(ds.static[None], inputs[None])[0]
    out = denormalize_and_quantize(pred)
    save_tensor(args.out, out)
    print(f"wrote {list(out.shape)} u8 prediction to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.ckpt)
    res = evaluate(model.predict, Dataset(args.data), args.split, batch_size=args.batch_size, limit=args.limit)
    cols = ["split", "windows", "mse", "mse_u8", *HORIZON_NAMES]
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(cols)
    w.writerow([args.split, res["windows"]] + [repr(res[c]) for c in cols[2:]])
    return EXIT_OK


def _parse_bench_spec(text: str):
    try:
        parts = [int(p) for p in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad spec {text!r}, expected Ci,Co,k[,H,W]") from None
    if len(parts) == 3:
        parts += [32, 32]
    if len(parts) != 5 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"bad spec {text!r}, expected positive Ci,Co,k[,H,W]")
    return parts


def _time_forward(fn, iters):
    fn()
    t0 = time.perf_counter()
    for _ in range(iters):
        fn()
    return (time.perf_counter() - t0) / iters * 1e3


def cmd_bench(args) -> int:
    ci, co, k, h, w = args.spec
    spec = Conv2dSpec.square(ci, co, k)
    hx, real = hxconv_param_count(spec), real_conv_param_count(spec)
    row = {"ci": ci, "co": co, "k": k, "h": h, "w": w,
           "hx_params": hx, "real_params": real, "ratio": real / hx}
    if args.iters > 0:
        rng = Prng(args.seed)
        layer = hxconv_init(spec, rng)
        full = Conv2dSpec.square(16 * ci, 16 * co, k)
        weight = rng.normal(full.weight_shape, scale=0.01).astype(np.float32)
        x = rng.normal((1, 16 * ci, h, w)).astype(np.float32)
        row["hx_ms"] = f"{_time_forward(lambda: hxconv_forward(layer, x), args.iters):.3f}"
        row["real_ms"] = f"{_time_forward(lambda: conv2d(x, weight, full), args.iters):.3f}"
    wr = csv.DictWriter(sys.stdout, fieldnames=list(row), lineterminator="\n")
    wr.writeheader()
    wr.writerow(row)
    return EXIT_OK


def selftest_checks():
    """Yield ``(name, passed)`` for the algebra and layer oracles."""
    t16 = cayley_dickson_table(16)
    yield "table_16_matches_transcription", not t16.mismatches(paper_table_16())
    yield "latin_squares", all(cayley_dickson_table(d).is_latin_square() for d in SUPPORTED_DIMS)
    e = [HyperNumber.basis(k) for k in range(16)]
    minus_one = HyperNumber.basis(0) * -1.0
    yield "squares_are_minus_one", all(hyper_mul(e[k], e[k], t16) == minus_one for k in range(1, 16))
    yield "anticommuting_pairs", all(
        hyper_mul(e[i], e[j], t16) == -hyper_mul(e[j], e[i], t16)
        for i in range(1, 16) for j in range(i + 1, 16))
    lhs = hyper_mul(hyper_mul(e[1], e[2], t16), e[4], t16)
    rhs = hyper_mul(e[1], hyper_mul(e[2], e[4], t16), t16)
    yield "non_associative_witness", lhs != rhs
    pair = find_zero_divisor(t16)
    yield "zero_divisor_16", pair is not None and hyper_mul(pair[0], pair[1], t16).is_zero()
    yield "no_zero_divisor_below_16", all(find_zero_divisor(cayley_dickson_table(d)) is None for d in (1, 2, 4, 8))

    rng = np.random.default_rng(0)
    ok = True
    for _ in range(20):
        ci, co, k = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.choice([1, 3]))
        spec = Conv2dSpec.square(ci, co, k)
        layer = HxConvLayer(spec, rng.normal(size=(16,) + spec.weight_shape).astype(np.float32))
        big = np.zeros((16 * co, 16 * ci, k, k))
        for r in range(16):
            for c in range(16):
                s, m = t16.entry(r, c)
                big[r * co:(r + 1) * co, c * ci:(c + 1) * ci] = s * layer.banks[m]
        x = rng.normal(size=(int(rng.integers(1, 3)), 16 * ci, 8, 8)).astype(np.float32)
        ok &= bool(np.abs(hxconv_forward(layer, x) - conv2d(x.astype(np.float64), big, layer.full_spec)).max() <= 1e-4)
    yield "hxconv_block_matrix_oracle", ok
    yield "param_ratio_16", real_conv_param_count(Conv2dSpec.square(16, 16, 3)) == 16 * hxconv_param_count(
        Conv2dSpec.square(16, 16, 3))


def cmd_selftest(args) -> int:
    failed = 0
    for name, passed in selftest_checks():
        print(f"{'PASS' if passed else 'FAIL'} {name}")
        failed += not passed
    return EXIT_VERIFY if failed else EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sedunet", description="Sedenion U-Net toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("table", help="print a Cayley-Dickson multiplication table")
    s.add_argument("--dim", type=int, required=True, choices=SUPPORTED_DIMS)
    s.add_argument("--verify", action="store_true", help="check against the transcribed 16x16 table")
    s.set_defaults(fn=cmd_table)

    s = sub.add_parser("gen", help="generate a synthetic toy-city dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--height", type=int, default=16)
    s.add_argument("--width", type=int, default=16)
    s.add_argument("--days", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--lanes", type=int, default=6)
    s.add_argument("--incident-rate", type=float, default=0.002)
    s.add_argument("--val-days", type=int, default=1)
    s.add_argument("--depth", type=int, default=3, help="model depth whose 2^depth must divide H and W")
    s.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    s.set_defaults(fn=cmd_gen)

    s = sub.add_parser("train", help="train a model", epilog=config_help(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    s.add_argument("--config", help="run config JSON with sections model, train, data")
    s.add_argument("--data", help="dataset directory")
    s.add_argument("--out", required=True, help="output directory for checkpoints and metrics.csv")
    s.add_argument("--resume", help="checkpoint to resume from")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("predict", help="forecast one window and write a u8 [6,8,H,W] HXT1 tensor")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--day", type=int, required=True)
    s.add_argument("--t", type=int, required=True, help="first input frame of the window")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_predict)

    s = sub.add_parser("eval", help="per-horizon MSE of a checkpoint on a split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="val")
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--limit", type=int, default=None, help="evaluate an evenly spaced subset of windows")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("bench", help="hxconv vs real conv parameter counts and forward timing")
    s.add_argument("--spec", type=_parse_bench_spec, required=True, metavar="Ci,Co,k[,H,W]")
    s.add_argument("--iters", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("selftest", help="run the algebra and layer oracles")
    s.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ValueError, OSError, LookupError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
