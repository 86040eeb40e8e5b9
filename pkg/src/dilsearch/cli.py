"""Command-line interface: ``dilsearch <command> [options]``.

Exit codes: 0 ok, 1 usage or configuration error, 2 data error, 3 numeric failure.
"""

import argparse
import json
import sys
from pathlib import Path

from . import bench, checkpoint, presets
from .convert import convert_to_dilated
from .data import GenConfig, generate, load_dataset, save_dataset
from .errors import DataError, NumericError
from .gates import DilationAssignment, SearchConfig, apply_assignment, run_search, write_search_log
from .network import NetworkSpec, Parameters, build_network, init_params, output_stride, parameter_count
from .train import TrainConfig, evaluate, predict, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _write_json(path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _parse_dilations(text):
    """``layer3.0=2,layer4.1=8`` or a JSON object -> DilationAssignment."""
    if not text:
        return None
    if text.strip().startswith("{"):
        d = json.loads(text)
    elif Path(text).is_file():
        d = json.loads(Path(text).read_text())
    else:
        d = {}
        for part in text.split(","):
            name, _, val = part.partition("=")
            if not val:
                raise UsageError(f"bad dilation entry {part!r}; expected unit=rate")
            d[name.strip()] = int(val)
    d = d.get("dilations", d)
    return DilationAssignment({k: int(v) for k, v in d.items()})


def _load_model(path):
    arrays, meta = checkpoint.load(path)
    if "spec" not in meta:
        raise DataError(f"{path}: checkpoint has no network spec")
    return NetworkSpec.from_dict(meta["spec"]), Parameters.from_arrays(arrays), meta


def _dataset(args):
    if not args.data:
        raise UsageError("--data is required")
    if not Path(args.data).is_dir():
        raise DataError(f"dataset directory {args.data} does not exist")
    return load_dataset(args.data)


# ------------------------------------------------------------------ commands

def cmd_gen_data(args):
    cfg = GenConfig(
        task=args.task,
        height=args.height,
        width=args.width,
        num_classes=args.classes,
        count=args.count,
        seed=args.seed,
        planted_offset=args.offset,
    )
    ds = generate(cfg)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} {cfg.task} samples ({cfg.height}x{cfg.width}, C={cfg.num_classes}) to {args.out}")


def cmd_convert(args):
    spec = NetworkSpec.from_json(Path(args.spec).read_text()) if args.spec else build_network(args.variant, args.classes)
    conv = convert_to_dilated(spec)
    _write_json(Path(args.out) / "spec.json", conv.to_dict())
    print(f"{spec.variant}: output stride {output_stride(spec)} -> {output_stride(conv)}, "
          f"{parameter_count(conv)} parameters (unchanged)")


def _train_spec(args, num_classes):
    spec = convert_to_dilated(build_network(args.variant, num_classes))
    assignment = _parse_dilations(args.dilations)
    return apply_assignment(spec, assignment) if assignment else spec


def cmd_train(args):
    ds = _dataset(args)
    spec = _train_spec(args, ds.num_classes)
    cfg = TrainConfig.desk(
        base_lr=args.lr,
        batch_size=args.batch,
        crop_size=args.crop,
        total_steps=args.steps,
        num_classes=ds.num_classes,
        seed=args.seed,
        log_every=args.log_every,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train(spec, ds, cfg, log_path=out / "loss.csv", checkpoint_path=out / "model.ckpt")
    _write_json(out / "spec.json", spec.to_dict())
    print(f"trained {spec.variant} for {cfg.total_steps} steps; checkpoint {out / 'model.ckpt'}")


def cmd_search(args):
    ds = _dataset(args)
    base = convert_to_dilated(build_network(args.variant, ds.num_classes))
    cfg = SearchConfig(
        steps=args.steps,
        batch_size=args.batch,
        crop_size=args.crop,
        base_lr=args.lr,
        candidates=tuple(args.candidates),
        seed=args.seed,
        log_every=args.log_every,
    )
    res = run_search(base, ds, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_search_log(res, out / "search.csv")
    decoded = apply_assignment(res.spec, res.assignment)
    _write_json(out / "assignment.json", {"dilations": res.assignment.to_dict()})
    _write_json(out / "spec.json", decoded.to_dict())
    print("decoded dilations: " + ", ".join(f"{k}={v}" for k, v in res.assignment.dilations.items()))


def cmd_eval(args):
    spec, params, _ = _load_model(args.checkpoint)
    ds = _dataset(args)
    if ds.num_classes != spec.num_classes:
        raise DataError(f"dataset has {ds.num_classes} classes, checkpoint {spec.num_classes}")
    report = evaluate(spec, params, ds)
    report["model"] = args.label or spec.variant
    timing = None
    if args.time_iters:
        timing = bench.benchmark(spec, params, tuple(args.shape), args.warmup, args.time_iters, args.seed)
        report["latency"] = timing.to_dict()
    out = Path(args.out)
    _write_json(out / "eval.json", report)
    table = bench.format_table(
        [{"model": report["model"], "iou": report["mean_iou"], "time_ms": timing.median if timing else None}]
    )
    (out / "eval.txt").write_text(table + "\n")
    print(table)


def cmd_bench(args):
    shape = bench.FULL_INPUT if args.full else tuple(args.shape)
    entries = []
    for v in args.variants:
        spec = convert_to_dilated(build_network(v, args.classes))
        entries.append((v, spec, init_params(spec, args.seed)))
    reports = bench.benchmark_many(entries, shape, args.warmup, args.iters, args.seed)
    table = bench.write_reports(reports, args.out)
    print(table)
    for r in reports:
        print(f"{r.variant}: median {r.median:.2f} ms, p95 {r.p95:.2f} ms, {r.fps:.1f} FPS, {r.flops / 1e9:.2f} GMAC")


def cmd_overlay(args):
    spec, params, _ = _load_model(args.checkpoint)
    ds = _dataset(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    idx = args.index or list(range(min(len(ds), args.limit)))
    for i in idx:
        if not 0 <= i < len(ds):
            raise UsageError(f"sample index {i} out of range (dataset has {len(ds)})")
        s = ds[i]
        pred = predict(spec, params, s.image[None])[0]
        bench.render_overlay(s.image, pred, out / f"overlay_{s.id}.png", args.alpha)
    print(f"wrote {len(idx)} overlays to {out}")


# ------------------------------------------------------------------ parser

def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file whose keys override option defaults")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="runs", help="output directory")

    p = _Parser(prog="dilsearch", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--task", choices=["blobs", "planted_dilation"], default="blobs")
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--height", type=int, default=96)
    g.add_argument("--width", type=int, default=96)
    g.add_argument("--count", type=int, default=256)
    g.add_argument("--offset", type=int, default=8, help="planted partner offset in blocks")
    g.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("convert", parents=[common], help="convert a network to output stride 8")
    c.add_argument("--variant", choices=["standard", "light_v1", "light_v2"], default="light_v1")
    c.add_argument("--classes", type=int, default=2)
    c.add_argument("--spec", help="unconverted spec JSON (instead of --variant)")
    c.set_defaults(func=cmd_convert)

    t = sub.add_parser("train", parents=[common], help="train a converted network")
    t.add_argument("--data", required=False)
    t.add_argument("--variant", choices=["standard", "light_v1", "light_v2"], default="light_v1")
    t.add_argument("--dilations", help="unit=rate list, JSON object, or assignment.json from search")
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--crop", type=int, default=96, help="0 trains on full images")
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("search", parents=[common], help="Gumbel-Softmax dilation search")
    s.add_argument("--data")
    s.add_argument("--variant", choices=["standard", "light_v1", "light_v2"], default="light_v1")
    s.add_argument("--steps", type=int, default=presets.SEARCH_STEPS)
    s.add_argument("--batch", type=int, default=8)
    s.add_argument("--crop", type=int, default=0)
    s.add_argument("--lr", type=float, default=presets.SEARCH_LR)
    s.add_argument("--candidates", type=int, nargs="+", default=[1, 2, 4, 8, 16])
    s.add_argument("--log-every", type=int, default=50)
    s.set_defaults(func=cmd_search)

    e = sub.add_parser("eval", parents=[common], help="mean IoU of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--label", help="model name for the table")
    e.add_argument("--time-iters", type=int, default=0, help="also time inference (>= 30 iterations)")
    e.add_argument("--warmup", type=int, default=10)
    e.add_argument("--shape", type=int, nargs=4, default=list(bench.DESK_INPUT))
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", parents=[common], help="inference latency of converted variants")
    b.add_argument("--variants", nargs="+", default=["standard", "light_v1", "light_v2"])
    b.add_argument("--classes", type=int, default=2)
    b.add_argument("--shape", type=int, nargs=4, default=list(bench.DESK_INPUT))
    b.add_argument("--full", action="store_true", help=f"use {bench.FULL_INPUT}")
    b.add_argument("--warmup", type=int, default=10)
    b.add_argument("--iters", type=int, default=100)
    b.set_defaults(func=cmd_bench)

    o = sub.add_parser("overlay", parents=[common], help="render predicted masks over images")
    o.add_argument("--checkpoint", required=True)
    o.add_argument("--data")
    o.add_argument("--index", type=int, nargs="*")
    o.add_argument("--limit", type=int, default=8)
    o.add_argument("--alpha", type=float, default=0.5)
    o.set_defaults(func=cmd_overlay)
    return p


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(overrides, dict):
            raise UsageError(f"config {args.config} must hold a JSON object")
        overrides = {k.replace("-", "_"): v for k, v in overrides.items()}
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions} - {"help", "config"}
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {unknown}")
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)
    return args


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
        args.func(args)
    except UsageError as exc:
        print(f"dilsearch: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"dilsearch: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"dilsearch: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"dilsearch: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"dilsearch: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
