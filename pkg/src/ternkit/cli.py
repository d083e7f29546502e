"""``ternkit`` command-line entry point.

Exit codes: 0 success, 2 usage or file errors, 3 semantic errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
from pathlib import Path

from .activations import ContinuationSchedule
from .errors import DomainError, IntegrityError, ModelFormatError, TrainingError

EXIT_OK, EXIT_USAGE, EXIT_SEMANTIC = 0, 2, 3
ARCHS = ("table1", "toy")


class ConfigError(Exception):
    """Malformed training config; carries ``path:line`` diagnostics."""


# ---------------------------------------------------------------------------
# training config files

_PRESETS = {"toy": dict(epochs=8, iters_per_epoch=50), "full": {}}


def _parse_schedule(text: str, epochs: int) -> ContinuationSchedule:
    kind, _, rest = text.partition(":")
    try:
        if kind == "fixed":
            return ContinuationSchedule.fixed(float(rest), epochs)
        if kind == "linear":
            start, end = (float(v) for v in rest.split(","))
            return ContinuationSchedule(start, end, epochs)
    except ValueError:
        pass
    raise ValueError(f"expected fixed:BETA or linear:START,END, got {text!r}")


def _coerce(field: dataclasses.Field, text: str):
    default = field.default
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float) or field.name == "sparsity":
        if field.name == "sparsity" and text.lower() == "none":
            return None
        return float(text)
    return text


def parse_config(text: str, source: str = "<config>"):
    """Build a ``TrainConfig`` from ``key = value`` lines (``#`` starts a comment).

    ``preset = toy|full`` picks the base (toy by default), ``schedule`` takes
    ``fixed:B`` or ``linear:B0,B1``; every other key is a ``TrainConfig`` field.
    """
    from .training import TrainConfig

    fields = {f.name: f for f in dataclasses.fields(TrainConfig)
              if f.name not in ("schedule", "adam_betas")}
    values, schedule, preset = {}, None, "toy"
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep or not key or not value:
            raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        if key == "preset":
            if value not in _PRESETS:
                raise ConfigError(f"{where}: unknown preset {value!r} (choose {', '.join(_PRESETS)})")
            preset = value
        elif key == "schedule":
            schedule = (lineno, value)
        elif key in fields:
            try:
                values[key] = _coerce(fields[key], value)
            except ValueError as exc:
                raise ConfigError(f"{where}: {key}: {exc}") from None
        else:
            raise ConfigError(f"{where}: unknown key {key!r}")
    env_seed = os.environ.get("TERNKIT_SEED")
    if env_seed is not None:
        try:
            values["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"TERNKIT_SEED: expected an integer, got {env_seed!r}") from None
    merged = {**_PRESETS[preset], **values}
    if schedule is not None:
        lineno, value = schedule
        try:
            merged["schedule"] = _parse_schedule(value, merged.get("epochs", 40))
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: schedule: {exc}") from None
    try:
        return TrainConfig(**merged)
    except DomainError as exc:
        raise ConfigError(f"{source}: {exc}") from None


# ---------------------------------------------------------------------------
# commands

def _arch(name: str, width: int | None = None, ternarize_input: bool = False):
    from .network import build_table1, build_toy

    if name == "table1":
        net = build_table1()
        return dataclasses.replace(net, ternarize_input=ternarize_input)
    return build_toy(width=width or 8, ternarize_input=ternarize_input)


def cmd_init(args) -> int:
    from .network import init_model, serialize

    model = init_model(_arch(args.arch, args.width, args.ternarize_input), args.seed)
    n = serialize(model, args.output)
    print(f"wrote {args.output} ({n} bytes, float32)")
    return EXIT_OK


def cmd_quantize(args) -> int:
    from .network import deserialize, quantize_model, serialize
    from .packed import PackedTernaryTensor

    model = deserialize(args.model)
    sparsity = args.sparsity
    if sparsity is not None and args.mode == "binary":
        raise DomainError("--sparsity applies to ternary quantisation only")
    q = quantize_model(model, args.mode, sparsity)
    total = serialize(q, args.output)
    payload = sum(w.payload_bytes for w in q.weights.values() if isinstance(w, PackedTernaryTensor))
    if args.mode == "binary":
        payload //= 2  # only the sign plane is stored
    print(f"wrote {args.output}: {args.mode}, weight payload {payload / 1e6:.3f} MB, file {total} bytes")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .network import deserialize, forward, predict_mask
    from .network.io import read_stack, write_pgm

    for path in (args.model, args.input):
        if not Path(path).is_file():
            print(f"ternkit infer: no such file: {path}", file=sys.stderr)
            return EXIT_USAGE
    model = deserialize(args.model)
    if args.ternarize_input:
        model = dataclasses.replace(model, spec=dataclasses.replace(model.spec, ternarize_input=True))
    x = read_stack(args.input)
    t0 = time.perf_counter()
    scores = forward(model, x, mode=args.mode, dense_sim=args.dense_sim, threads=args.threads)
    elapsed = time.perf_counter() - t0
    mask = predict_mask(scores)
    write_pgm(args.output, mask * 255)
    print(f"inference {elapsed * 1e3:.1f} ms, foreground {mask.mean():.4f}, wrote {args.output}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training.trainer import train

    if args.config is None:
        text, source = "", "<defaults>"
    else:
        path = Path(args.config)
        if not path.is_file():
            print(f"ternkit train: no such file: {path}", file=sys.stderr)
            return EXIT_USAGE
        text, source = path.read_text(), str(path)
    try:
        config = parse_config(text, source)
    except ConfigError as exc:
        print(f"ternkit train: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if not args.quiet:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    result = train(config, out_dir=args.out)
    print(f"final val dice {result.metrics[-1]['val_dice']:.4f}; outputs in {args.out}")
    return EXIT_OK


def cmd_flops(args) -> int:
    from .network import count_flops, count_params_memory

    net = _arch(args.arch)
    rows = count_flops(net)
    print(f"{'layer':<12}{'MFlops':>10}{'declared':>10}")
    # the toy layers are small enough that whole MFlops would round to zero
    digits = 0 if args.arch == "table1" else 3
    total = declared = 0
    for r in rows:
        m, d = round(r.mflops, digits), round(r.declared_mflops, digits)
        total, declared = round(total + m, digits), round(declared + d, digits)
        print(f"{r.name:<12}{m:>10.{digits}f}{d:>10.{digits}f}")
    print(f"{'total':<12}{total:>10.{digits}f}{declared:>10.{digits}f}")
    params, _ = count_params_memory(net)
    sizes = ", ".join(f"{p} {count_params_memory(net, p)[1] / 1e6:.3f} MB"
                      for p in ("float32", "ternary2bit", "binary1bit"))
    print(f"parameters {params}: {sizes}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import DEFAULT_SHAPES, bench, reports_to_csv

    shapes = DEFAULT_SHAPES
    if args.shape:
        shapes = [tuple(int(v) for v in s.split(",")) for s in args.shape]
        if any(len(s) != 3 or min(s) < 1 for s in shapes):
            print("ternkit bench: --shape takes ROWS,C,FILTERS with positive values", file=sys.stderr)
            return EXIT_USAGE
    reports = bench(shapes, args.repetitions, args.threads)
    text = reports_to_csv(reports)
    if args.csv:
        Path(args.csv).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ternkit", description="Ternary segmentation network toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", help="write a randomly initialised float model")
    s.add_argument("output")
    s.add_argument("--arch", choices=ARCHS, default="toy")
    s.add_argument("--width", type=int, default=None, help="toy network base width")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ternarize-input", action="store_true",
                   help="quantise the input too, so the first conv also runs the packed path")
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("quantize", help="quantise a float model file")
    s.add_argument("model")
    s.add_argument("output")
    s.add_argument("--mode", choices=("ternary", "binary"), default="ternary")
    s.add_argument("--sparsity", type=float, default=None,
                   help="zero exactly ceil(s*n) weights per filter instead of thresholding")
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("infer", help="segment one input stack")
    s.add_argument("model")
    s.add_argument("input", help="raw tensor (slices, H, W) or PGM")
    s.add_argument("output", help="output PGM mask")
    s.add_argument("--mode", default=None, help="float, ternary, binary or weights-only")
    s.add_argument("--dense-sim", action="store_true", help="dense convolution on the same codes")
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--ternarize-input", action="store_true", help="hard-quantise the input stack")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("train", help="train on the synthetic task")
    s.add_argument("config", nargs="?", default=None, help="key = value config file")
    s.add_argument("--out", default="runs/latest")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("flops", help="per-layer MFlops table")
    s.add_argument("--arch", choices=ARCHS, default="table1")
    s.set_defaults(func=cmd_flops)

    s = sub.add_parser("bench", help="ternary vs float GEMM throughput")
    s.add_argument("--shape", action="append", help="ROWS,C,FILTERS (repeatable)")
    s.add_argument("--repetitions", type=int, default=5)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--csv", default=None, help="also write the CSV here")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"ternkit {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ModelFormatError as exc:
        print(f"ternkit {args.command}: bad model file: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DomainError, IntegrityError, TrainingError) as exc:
        print(f"ternkit {args.command}: {exc}", file=sys.stderr)
        return EXIT_SEMANTIC


if __name__ == "__main__":
    sys.exit(main())
