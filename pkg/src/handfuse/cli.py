"""Command-line entry point.

Exit codes: 0 success, 1 contract or usage error, 2 I/O or format error.
Option precedence: command-line flag > config file > built-in default.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .errors import FormatError, HandfuseError

log = logging.getLogger("handfuse")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _synth(args) -> None:
    from .synth import SynthConfig, generate
    from .training import parse_config_text

    values = {}
    if args.config:
        values = parse_config_text(Path(args.config).read_text())
    known = {f.name: f.type for f in fields(SynthConfig)}
    unknown = set(values) - set(known)
    if unknown:
        raise HandfuseError(f"unknown synth config keys: {sorted(unknown)}")
    kw = {k: (float(v) if k in ("smoothness", "occlusion", "noise") else int(v)) for k, v in values.items()}
    if args.seed is not None:
        kw["seed"] = args.seed
    for key in ("n_sequences", "M", "K", "L", "T"):
        if getattr(args, key, None) is not None:
            kw[key] = getattr(args, key)
    if args.smoothness is not None:
        kw["smoothness"] = args.smoothness
    cfg = SynthConfig(**kw)
    ds = generate(cfg)
    ds.save(args.out)
    print(f"wrote {ds.N} frames ({cfg.n_sequences} sequences x T={cfg.T}) to {args.out}")


def _convert(args) -> None:
    from .dataset import convert_directory
    from .preprocess import Intrinsics

    cam = Intrinsics(args.fx, args.fy, args.cx, args.cy)
    ds, clamped = convert_directory(args.input, M=args.size, L=args.L, T=args.T, cube_mm=args.cube_mm,
                                    camera=cam, sentinel=args.sentinel)
    ds.save(args.out)
    print(f"wrote {ds.N} frames to {args.out}; {clamped} joints clamped into the crop cube")


def _train(args) -> None:
    from .dataset import Dataset
    from .errors import DependencyError
    from .training import load_config, load_network, save_network, train_fusion, train_spatial, train_temporal

    overrides = {"seed": args.seed, "batch_size": args.batch_size}
    if args.iters is not None:
        overrides[f"iters_stage_{args.stage}"] = args.iters
    config, arch = load_config(args.config, overrides)
    data = Dataset.load(args.data)
    if args.stage == "spatial":
        net, tlog = train_spatial(data, config, arch)
    elif args.stage == "temporal":
        net, tlog = train_temporal(data, config, arch)
    else:
        if not args.spatial or not args.temporal:
            raise DependencyError("--stage fusion needs --spatial and --temporal checkpoints")
        for p in (args.spatial, args.temporal):
            if not Path(p).exists():
                raise DependencyError(f"missing checkpoint {p}")
        net, tlog = train_fusion(data, config, load_network(args.spatial), load_network(args.temporal), arch)
    save_network(args.out, net, config)
    if args.log:
        tlog.write_csv(args.log)
    final = tlog.losses(args.stage)
    print(f"{args.stage}: {len(final)} iterations, final loss {final[-1] if len(final) else float('nan'):.6f}, "
          f"{tlog.seconds.get(args.stage, 0.0):.1f}s -> {args.out}")


def _eval(args) -> None:
    from .metrics import DEFAULT_THRESHOLDS, evaluate, fixed_weight_fusion_sweep, read_poses

    import numpy as np

    pred, truth = read_poses(args.pred), read_poses(args.truth)
    thresholds = DEFAULT_THRESHOLDS if args.max_threshold is None else np.arange(0.0, args.max_threshold + args.step / 2, args.step)
    report = evaluate(pred, truth, thresholds)
    report.write_report(args.out)
    if args.curve:
        report.write_curve(args.curve)
    if args.svg:
        Path(args.svg).write_text(report.curve_svg())
    print(f"average error {report.average_error:.4f} mm over {len(pred)} frames")
    if args.sweep:
        if not (args.sweep_temporal and args.sweep_spatial):
            raise HandfuseError("--sweep needs --sweep-temporal and --sweep-spatial")
        rows = fixed_weight_fusion_sweep(read_poses(args.sweep_temporal), read_poses(args.sweep_spatial), truth)
        lines = ["w,average_error_mm"] + [f"{w:g},{e:.6f}" for w, e in rows]
        lines.append(f"learned,{report.average_error:.6f}")
        Path(args.sweep).write_text("\n".join(lines) + "\n")


def _load_three(args):
    from .errors import DependencyError
    from .training import load_network

    nets = []
    for name in ("spatial", "temporal", "fusion"):
        path = getattr(args, name)
        if not path or not Path(path).exists():
            raise DependencyError(f"missing {name} checkpoint {path!r}")
        net = load_network(path)
        if net.kind != name:
            raise DependencyError(f"{path} holds a {net.kind} network, expected {name}")
        nets.append(net)
    return nets


def sibling(path, tag: str) -> Path:
    p = Path(path)
    return p.with_name(f"{p.stem}.{tag}{p.suffix}")


def _predict(args) -> None:
    from .dataset import Dataset
    from .metrics import write_poses
    from .pipeline import predict

    spatial, temporal, fusion = _load_three(args)
    data = Dataset.load(args.data)
    p = predict(data, spatial, temporal, fusion)
    scale = args.cube_mm / 2
    write_poses(args.out, p.j_out * scale)
    write_poses(sibling(args.out, "temporal"), p.j_temp * scale)
    write_poses(sibling(args.out, "spatial"), p.j_spa * scale)
    if args.truth_out:
        write_poses(args.truth_out, p.truth * scale)
    print(f"wrote {len(p.j_out)} predictions to {args.out}")


def _gradcheck(args) -> int:
    from .gradcheck import run_checks

    results = run_checks(args.scope, args.seed, args.seeds)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed")
    return 1 if failed else 0


def _bench(args) -> None:
    from .dataset import Dataset
    from .pipeline import bench

    spatial, temporal, fusion = _load_three(args)
    data = Dataset.load(args.data)
    report = bench(data, spatial, temporal, fusion, passes=args.passes, threads=args.threads)
    print(json.dumps(report, indent=2))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="handfuse", description="Spatio-temporal hand pose estimation from depth sequences.")
    p.add_argument("--version", action="version", version=f"handfuse {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic HPD1 dataset")
    s.add_argument("--config", help="key=value file of generator settings")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--n-sequences", dest="n_sequences", type=int)
    s.add_argument("--M", type=int)
    s.add_argument("--K", type=int)
    s.add_argument("--L", type=int)
    s.add_argument("--T", type=int)
    s.add_argument("--smoothness", type=float)
    s.set_defaults(func=_synth)

    s = sub.add_parser("convert", help="PGM-16 depth + joint text directory -> HPD1")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--L", type=int, default=8)
    s.add_argument("--T", type=int, default=16)
    s.add_argument("--cube-mm", dest="cube_mm", type=float, default=300.0)
    s.add_argument("--sentinel", type=float, default=0.0)
    s.add_argument("--fx", type=float, default=588.03)
    s.add_argument("--fy", type=float, default=587.07)
    s.add_argument("--cx", type=float, default=320.0)
    s.add_argument("--cy", type=float, default=240.0)
    s.set_defaults(func=_convert)

    s = sub.add_parser("train", help="train one stage")
    s.add_argument("--stage", required=True, choices=("spatial", "temporal", "fusion"))
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--spatial", help="spatial checkpoint (fusion stage)")
    s.add_argument("--temporal", help="temporal checkpoint (fusion stage)")
    s.add_argument("--log", help="write the training log as CSV")
    s.add_argument("--seed", type=int)
    s.add_argument("--iters", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.set_defaults(func=_train)

    s = sub.add_parser("eval", help="metrics for a prediction file")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--out", required=True, help="per-joint report CSV")
    s.add_argument("--curve", help="threshold_mm,fraction CSV")
    s.add_argument("--svg", help="line plot of the curve")
    s.add_argument("--max-threshold", dest="max_threshold", type=float)
    s.add_argument("--step", type=float, default=1.0)
    s.add_argument("--sweep", help="fixed-weight fusion table CSV")
    s.add_argument("--sweep-temporal", dest="sweep_temporal")
    s.add_argument("--sweep-spatial", dest="sweep_spatial")
    s.set_defaults(func=_eval)

    s = sub.add_parser("predict", help="fused predictions in millimetres")
    for name in ("spatial", "temporal", "fusion"):
        s.add_argument(f"--{name}", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--truth-out", dest="truth_out")
    s.add_argument("--cube-mm", dest="cube_mm", type=float, default=300.0)
    s.set_defaults(func=_predict)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--scope", choices=("layer", "network", "all"), default="all")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--seeds", type=int, default=10)
    s.set_defaults(func=_gradcheck)

    s = sub.add_parser("bench", help="inference throughput")
    for name in ("spatial", "temporal", "fusion"):
        s.add_argument(f"--{name}", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--passes", type=int, default=5)
    s.add_argument("--threads", type=int, default=4)
    s.set_defaults(func=_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        code = args.func(args)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except HandfuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
