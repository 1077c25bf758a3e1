"""Command-line surface: synth, solve, eval, gradcheck, train-toy, bench.

Every invocation prints exactly one JSON document on stdout and writes a
replayable manifest.json into its output directory; human-readable notes
go to stderr. Exit codes: 0 success, 1 gradcheck tolerance failure,
2 usage, 3 I/O or file format, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .fileio import (
    CsvFormatError,
    PfmFormatError,
    atomic_write_text,
    read_depth_pfm,
    write_depth_pfm,
    write_pfm,
)
from .gradcheck import gradcheck, registered_ops
from .grid import ConfidenceField, DepthMap, GradientField, SceneSpec, synth_scene
from .manifest import RunManifest, write_manifest
from .metrics import evaluate, align_scale_shift
from .solver import (
    AnchorGauge,
    MeanGauge,
    SolveConfig,
    SolveError,
    TikhonovGauge,
    solve,
)
from .training import DatasetSpec, TrainConfig, save_checkpoint, train

EXIT_OK = 0
EXIT_GRADCHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _emit(doc: dict) -> None:
    json.dump(doc, sys.stdout)
    sys.stdout.write("\n")


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _error_json(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"size must look like 16x16: {exc}")


def _parse_range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(t) for t in text.split(","))
        return lo, hi
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"range must look like 1.0,5.0: {exc}")


def _parse_gauge(text: str):
    kind, _, rest = text.partition(":")
    try:
        if kind == "anchor":
            parts = rest.split(",")
            if len(parts) == 3:
                i, j, value = parts
                return AnchorGauge(int(i), int(j), float(value))
            i, j, value, weight = parts
            return AnchorGauge(int(i), int(j), float(value), float(weight))
        if kind == "mean":
            return MeanGauge(float(rest))
        if kind == "tikhonov":
            return TikhonovGauge(float(rest))
    except (ValueError, TypeError) as exc:
        raise argparse.ArgumentTypeError(f"bad gauge {text!r}: {exc}")
    raise argparse.ArgumentTypeError(
        f"unknown gauge {kind!r}; use anchor:i,j,value[,weight] | mean:value | tikhonov:mu"
    )


def _gauge_label(gauge) -> str:
    if isinstance(gauge, AnchorGauge):
        return f"anchor:{gauge.row},{gauge.col},{gauge.value:g},{gauge.weight:g}"
    if isinstance(gauge, MeanGauge):
        return f"mean:{gauge.value:g}"
    return f"tikhonov:{gauge.mu:g}"


def _build_parser() -> _Parser:
    parser = _Parser(prog="gradepth", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--size", type=_parse_size, required=True, metavar="HxW")
    p.add_argument("--planes", type=int, default=3)
    p.add_argument("--range", type=_parse_range, default=(1.0, 5.0), dest="depth_range")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--outlier-frac", type=float, default=0.0)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("solve", help="solve a weighted difference system")
    p.add_argument("--gx", required=True)
    p.add_argument("--gy", required=True)
    p.add_argument("--wx", required=True)
    p.add_argument("--wy", required=True)
    p.add_argument("--gauge", type=_parse_gauge, default=AnchorGauge())
    p.add_argument("--backend", choices=["direct", "cg"], default="direct")
    p.add_argument("--cg-tol", type=float, default=1e-10)
    p.add_argument("--cg-max-iters", type=int, default=None)
    p.add_argument("--weight-floor", type=float, default=1e-8)
    p.add_argument("--out", required=True, help="output depth PFM path")

    p = sub.add_parser("eval", help="evaluate a prediction against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--align", action="store_true",
                   help="fit a global scale/shift before evaluating")
    p.add_argument("--out-dir", default=".")

    p = sub.add_parser("gradcheck", help="finite-difference check a primitive")
    p.add_argument("--op", required=True, choices=registered_ops())
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--tolerance", type=float, default=None)
    p.add_argument("--out-dir", default=".")

    p = sub.add_parser("train-toy", help="train the toy pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("bench", help="time solves across grid sizes")
    p.add_argument("--sizes", default="16,32,64",
                   help="comma-separated square grid sizes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--out-dir", required=True)
    return parser


def _manifest(args, command: str, config: dict, seeds: dict) -> RunManifest:
    argv = list(getattr(args, "_argv", []))
    return RunManifest(
        command=command, argv=argv, config=config, seeds=seeds,
        tool_version=__version__,
    )


def _cmd_synth(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    start = time.perf_counter()
    height, width = args.size
    spec = SceneSpec(
        seed=args.seed, height=height, width=width, planes=args.planes,
        depth_range=args.depth_range, noise=args.noise,
        outlier_fraction=args.outlier_frac,
    )
    image, depth = synth_scene(spec)
    image_path = os.path.join(args.out_dir, "image.pfm")
    depth_path = os.path.join(args.out_dir, "depth.pfm")
    scene_path = os.path.join(args.out_dir, "scene.json")
    write_pfm(image_path, image)
    write_depth_pfm(depth_path, depth)
    scene_doc = {
        "seed": spec.seed, "height": spec.height, "width": spec.width,
        "planes": spec.planes, "depth_range": list(spec.depth_range),
        "noise": spec.noise, "outlier_fraction": spec.outlier_fraction,
    }
    atomic_write_text(scene_path, json.dumps(scene_doc, indent=2) + "\n")

    manifest = _manifest(args, "synth", scene_doc, {"scene": spec.seed})
    manifest.add_output("image", image_path)
    manifest.add_output("depth", depth_path)
    manifest.add_output("scene", scene_path)
    manifest.wall_s = time.perf_counter() - start
    write_manifest(args.out_dir, manifest)
    _emit({"out_dir": args.out_dir,
           "files": {"image": image_path, "depth": depth_path, "scene": scene_path}})
    return EXIT_OK


def _read_field_pair(gx_path, gy_path):
    from .fileio import read_pfm

    gx = read_pfm(gx_path).astype(np.float64)
    gy = read_pfm(gy_path).astype(np.float64)
    return gx, gy


def _cmd_solve(args) -> int:
    start = time.perf_counter()
    gx, gy = _read_field_pair(args.gx, args.gy)
    wx, wy = _read_field_pair(args.wx, args.wy)
    grad = GradientField(gx, gy)
    conf = ConfidenceField(wx, wy)
    cfg = SolveConfig(
        gauge=args.gauge, backend=args.backend, cg_tolerance=args.cg_tol,
        cg_max_iters=args.cg_max_iters, weight_floor=args.weight_floor,
    )
    depth, diag = solve(grad, conf, cfg)
    write_depth_pfm(args.out, depth)

    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    config = {
        "gauge": _gauge_label(args.gauge), "backend": args.backend,
        "cg_tolerance": args.cg_tol, "cg_max_iters": args.cg_max_iters,
        "weight_floor": args.weight_floor,
    }
    manifest = _manifest(args, "solve", config, {})
    for name, path in (("gx", args.gx), ("gy", args.gy), ("wx", args.wx), ("wy", args.wy)):
        manifest.add_input(name, path)
    manifest.add_output("z", args.out)
    manifest.wall_s = time.perf_counter() - start
    write_manifest(out_dir, manifest)
    _emit({
        "height": depth.height, "width": depth.width, "out": args.out,
        "backend": args.backend, "iterations": diag.iterations,
        "final_residual": diag.final_residual,
        "factorization_reused": diag.factorization_reused,
    })
    return EXIT_OK


def _cmd_eval(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    start = time.perf_counter()
    pred = read_depth_pfm(args.pred)
    gt = read_depth_pfm(args.gt)
    seeds: dict = {}
    config = {"align": bool(args.align)}
    if args.align:
        s, t, pred = align_scale_shift(pred, gt)
        config.update({"scale": s, "shift": t})
        _log(f"aligned prediction with scale {s:.6g}, shift {t:.6g}")
    report = evaluate(pred, gt)
    manifest = _manifest(args, "eval", config, seeds)
    manifest.add_input("pred", args.pred)
    manifest.add_input("gt", args.gt)
    manifest.wall_s = time.perf_counter() - start
    write_manifest(args.out_dir, manifest)
    _emit(report.to_dict())
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    start = time.perf_counter()
    report = gradcheck(args.op, seed=args.seed, step=args.step, tolerance=args.tolerance)
    manifest = _manifest(
        args, "gradcheck",
        {"op": args.op, "step": args.step, "tolerance": report.tolerance},
        {"instance": args.seed},
    )
    manifest.wall_s = time.perf_counter() - start
    write_manifest(args.out_dir, manifest)
    _emit(report.to_dict())
    return EXIT_OK if report.passed else EXIT_GRADCHECK_FAILED


def _load_train_config(path: str) -> tuple[TrainConfig, DatasetSpec, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != 1:
        raise ValueError("config.json must declare schema_version 1")
    tr = doc.get("train", {})
    da = doc.get("data", {})
    cfg = TrainConfig(
        epochs=tr.get("epochs", 50),
        batch_size=tr.get("batch_size", 4),
        lr_max=tr.get("lr_max", 3e-3),
        lr_min=tr.get("lr_min", 1e-3),
        seed=tr.get("seed", 0),
        mode=tr.get("mode", "v-layer"),
        features=tr.get("features", 8),
        channels=tr.get("channels", 4),
        alpha=tr.get("alpha", 0.85),
        lam=tr.get("lambda", 0.1),
        pool_factor=tr.get("pool_factor", 2),
        flip=tr.get("flip", True),
    )
    data = DatasetSpec(
        n_train=da.get("n_train", 32),
        n_heldout=da.get("n_heldout", 8),
        height=da.get("height", 24),
        width=da.get("width", 24),
        planes=da.get("planes", 4),
        depth_range=tuple(da.get("depth_range", (1.0, 5.0))),
        seed=da.get("seed", 0),
    )
    return cfg, data, doc


def _cmd_train_toy(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    start = time.perf_counter()
    cfg, data, doc = _load_train_config(args.config)
    result = train(cfg, data)

    ckpt_path = os.path.join(args.out_dir, "checkpoint.bin")
    curve_path = os.path.join(args.out_dir, "loss_curve.csv")
    metrics_path = os.path.join(args.out_dir, "heldout_metrics.json")
    save_checkpoint(ckpt_path, result.model, cfg.seed, doc)
    header = "epoch,lr,total,depth,variational"
    rows = [
        f"{e['epoch']},{e['lr']:.10g},{e['total']:.17g},{e['depth']:.17g},{e['variational']:.17g}"
        for e in result.loss_curve
    ]
    atomic_write_text(curve_path, "\n".join([header] + rows) + "\n")
    atomic_write_text(metrics_path, result.heldout.to_json() + "\n")

    manifest = _manifest(args, "train-toy", doc, {"train": cfg.seed, "data": data.seed})
    manifest.add_input("config", args.config)
    manifest.add_output("checkpoint", ckpt_path)
    manifest.add_output("loss_curve", curve_path)
    manifest.add_output("heldout_metrics", metrics_path)
    manifest.wall_s = time.perf_counter() - start
    write_manifest(args.out_dir, manifest)
    _emit({
        "out_dir": args.out_dir, "mode": result.mode, "n_params": result.n_params,
        "epochs": cfg.epochs, "final_train_loss": result.loss_curve[-1]["total"],
        "heldout": result.heldout.to_dict(), "wall_s": result.wall_s,
    })
    return EXIT_OK


def _cmd_bench(args) -> int:
    from .grid import exact_gradients, observe_gradients

    os.makedirs(args.out_dir, exist_ok=True)
    start = time.perf_counter()
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s]
    except ValueError as exc:
        raise _UsageError(f"bad --sizes: {exc}")
    rows = []
    for size in sizes:
        spec = SceneSpec(seed=args.seed, height=size, width=size, planes=4)
        _, depth = synth_scene(spec)
        grad, conf = observe_gradients(depth, noise=0.05, outlier_fraction=0.05,
                                       seed=args.seed)

        def timed(cfg):
            best = np.inf
            for _ in range(args.reps):
                t0 = time.perf_counter()
                _, diag = solve(grad, conf, cfg)
                best = min(best, time.perf_counter() - t0)
            return best, diag

        t_direct, _ = timed(SolveConfig(backend="direct"))
        t_cg, diag_cg = timed(SolveConfig(backend="cg", cg_tolerance=1e-10))
        rows.append({
            "size": size, "unknowns": size * size,
            "direct_s": t_direct, "cg_s": t_cg, "cg_iterations": diag_cg.iterations,
        })
        _log(f"size {size}: direct {t_direct * 1e3:.2f} ms, cg {t_cg * 1e3:.2f} ms")

    csv_path = os.path.join(args.out_dir, "bench.csv")
    header = "size,unknowns,direct_s,cg_s,cg_iterations"
    lines = [header] + [
        f"{r['size']},{r['unknowns']},{r['direct_s']:.6g},{r['cg_s']:.6g},{r['cg_iterations']}"
        for r in rows
    ]
    atomic_write_text(csv_path, "\n".join(lines) + "\n")
    manifest = _manifest(args, "bench", {"sizes": sizes, "reps": args.reps},
                         {"scene": args.seed})
    manifest.add_output("bench", csv_path)
    manifest.wall_s = time.perf_counter() - start
    write_manifest(args.out_dir, manifest)
    _emit({"csv": csv_path, "results": rows})
    return EXIT_OK


_HANDLERS = {
    "synth": _cmd_synth,
    "solve": _cmd_solve,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "train-toy": _cmd_train_toy,
    "bench": _cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        args._argv = argv
        return _HANDLERS[args.command](args)
    except _UsageError as exc:
        _error_json("usage", str(exc))
        return EXIT_USAGE
    except (PfmFormatError, CsvFormatError, OSError, json.JSONDecodeError) as exc:
        _error_json("io", str(exc))
        return EXIT_IO
    except (SolveError, ValueError, ArithmeticError) as exc:
        _error_json("numerical", str(exc))
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
