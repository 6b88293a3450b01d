"""Command-line surface.

Subcommands: phantom, register, warp, metrics, suite, render. Exit codes:
0 success, 2 usage error, 3 data/file error, 4 numerical abort.
"""

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .energy import MODES, LossWeights
from .engine import (
    AffineTransform,
    RegistrationConfig,
    apply_affine,
    register,
)
from .errors import DataError, NumericalAbortError
from .fields import IntegrationConfig, warp
from .grid import MASK, Volume3
from .io import read_volume, write_volume
from .metrics import MetricsReport, report as build_report
from .phantom import PhantomSpec, TumorSpec, gen_pair
from .render import render_slice

_TRACE_FILE = "loss_trace.json"
_MANIFEST_FILE = "manifest.json"


def _dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# phantom


def _cmd_phantom(args):
    spec_dict = _load_json(args.spec)
    plan = tuple(TumorSpec(center=tuple(t["center"]),
                           radius_t0=float(t.get("radius_t0", 0.0)),
                           radius_t1=float(t.get("radius_t1", 0.0)),
                           kind=t.get("kind", "stable"))
                 for t in spec_dict.get("tumor_plan", []))
    spec = PhantomSpec(
        seed=int(spec_dict.get("seed", 0)),
        dims=tuple(spec_dict.get("dims", (64, 64, 64))),
        deform_amplitude=float(spec_dict.get("deform_amplitude", 6.0)),
        tumor_plan=plan,
        noise_sigma=float(spec_dict.get("noise_sigma", 0.01)),
        effusion=bool(spec_dict.get("effusion", False)),
    )
    pair = gen_pair(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_volume(pair.image_a, out / "image_a.nii")
    write_volume(pair.image_b, out / "image_b.nii")
    write_volume(pair.mask_a, out / "mask_a.nii", dtype="uint8")
    write_volume(pair.mask_b, out / "mask_b.nii", dtype="uint8")
    write_volume(pair.tumor_a, out / "tumor_a.nii", dtype="uint8")
    write_volume(pair.tumor_b, out / "tumor_b.nii", dtype="uint8")
    write_volume(pair.phi_gt, out / "phi_gt.nii")
    echo = dict(spec_dict)
    echo["seed"] = spec.seed
    _dump_json(echo, out / "spec.json")
    print(f"phantom pair written to {out}")
    return 0


# ---------------------------------------------------------------------------
# register


def _parse_weights(text):
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 4:
        raise DataError("--weights needs four comma-separated values")
    return LossWeights(*parts)


def _config_from_args(args):
    return RegistrationConfig(
        mode=args.mode,
        weights=_parse_weights(args.weights),
        learn_rate=args.lr,
        max_iters=args.max_iters,
        patience=args.patience,
        rel_tol=args.rel_tol,
        integration=IntegrationConfig(args.steps),
        seed=args.seed,
        dtype=args.dtype,
    )


def _config_to_dict(cfg, run_affine):
    w = cfg.weights
    return {
        "mode": cfg.mode,
        "weights": {"alpha": w.alpha, "beta": w.beta, "gamma": w.gamma,
                    "mu": w.mu},
        "learn_rate": cfg.learn_rate,
        "max_iters": cfg.max_iters,
        "patience": cfg.patience,
        "rel_tol": cfg.rel_tol,
        "squaring_steps": cfg.integration.squaring_steps,
        "seed": cfg.seed,
        "dtype": cfg.dtype,
        "affine": bool(run_affine),
    }


def _config_from_dict(d):
    return RegistrationConfig(
        mode=d["mode"],
        weights=LossWeights(**d["weights"]),
        learn_rate=d["learn_rate"],
        max_iters=d["max_iters"],
        patience=d["patience"],
        rel_tol=d["rel_tol"],
        integration=IntegrationConfig(d["squaring_steps"]),
        seed=d["seed"],
        dtype=d.get("dtype", "float64"),
    ), d["affine"]


def _run_registration(moving_path, fixed_path, cfg, run_affine, out_dir):
    s_a = read_volume(moving_path, kind=MASK)
    s_b = read_volume(fixed_path, kind=MASK)
    t0 = time.perf_counter()
    result = register(s_a, s_b, cfg, run_affine=run_affine)
    wall = time.perf_counter() - t0

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {}

    def save(obj, name, dtype="float32"):
        write_volume(obj, out / name, dtype=dtype)
        outputs[name.split(".")[0]] = name

    save(result.warped_mask, "warped_mask.nii")
    save(result.composed_forward, "composed_forward.nii")
    for i, f in enumerate(result.forward_fields):
        save(f, f"forward_{i}.nii")
    if result.composed_backward is not None:
        save(result.composed_backward, "composed_backward.nii")
        save(result.cyclic_mask, "cyclic_mask.nii")
        for i, f in enumerate(result.backward_fields):
            save(f, f"backward_{i}.nii")

    trace = [bd.as_dict() for bd in result.loss_trace]
    _dump_json(trace, out / _TRACE_FILE)
    outputs["loss_trace"] = _TRACE_FILE

    manifest = {
        "tool": "cycreg",
        "version": __version__,
        "command": "register",
        "inputs": {"moving_mask": str(Path(moving_path).resolve()),
                   "fixed_mask": str(Path(fixed_path).resolve())},
        "config": _config_to_dict(cfg, run_affine),
        "affine_result": {
            "linear": result.affine.linear.tolist(),
            "translation": result.affine.translation.tolist(),
        },
        "outputs": outputs,
        "iterations_run": result.iterations_run,
        "best_total": result.best_total,
        "wall_time_s": wall,
    }
    _dump_json(manifest, out / _MANIFEST_FILE)
    print(f"registered in {result.iterations_run} iterations "
          f"(best total {result.best_total:.6f}); outputs in {out}")
    return 0


def _cmd_register(args):
    if args.from_manifest:
        manifest = _load_json(args.from_manifest)
        cfg, run_affine = _config_from_dict(manifest["config"])
        return _run_registration(manifest["inputs"]["moving_mask"],
                                 manifest["inputs"]["fixed_mask"],
                                 cfg, run_affine, args.out)
    if not args.moving_mask or not args.fixed_mask:
        raise DataError("register needs --moving-mask and --fixed-mask "
                        "(or --from-manifest)")
    cfg = _config_from_args(args)
    return _run_registration(args.moving_mask, args.fixed_mask, cfg,
                             args.affine, args.out)


# ---------------------------------------------------------------------------
# warp / metrics / suite / render


def _cmd_warp(args):
    vol = read_volume(args.input)
    field = read_volume(args.field)
    write_volume(warp(vol, field), args.out,
                 dtype="uint8" if args.binary else "float32")
    print(f"warped volume written to {args.out}")
    return 0


class _StoredResult:
    """Duck-typed registration result reloaded from an output directory."""

    def __init__(self, result_dir):
        d = Path(result_dir)
        manifest = _load_json(d / _MANIFEST_FILE)
        aff = manifest["affine_result"]
        self.affine = AffineTransform(np.array(aff["linear"]),
                                      np.array(aff["translation"]))
        self.warped_mask = read_volume(d / "warped_mask.nii", kind=MASK)
        self.composed_forward = read_volume(d / "composed_forward.nii")
        self.composed_backward = None
        self.cyclic_mask = None
        if (d / "composed_backward.nii").exists():
            self.composed_backward = read_volume(d / "composed_backward.nii")
            self.cyclic_mask = read_volume(d / "cyclic_mask.nii", kind=MASK)


class _PairFiles:
    def __init__(self, args):
        self.mask_a = read_volume(args.moving_mask, kind=MASK)
        self.mask_b = read_volume(args.fixed_mask, kind=MASK)
        self.image_a = read_volume(args.moving_image) if args.moving_image else None
        self.image_b = read_volume(args.fixed_image) if args.fixed_image else None
        self.tumor_a = read_volume(args.tumors_moving, kind=MASK) \
            if args.tumors_moving else None
        self.tumor_b = read_volume(args.tumors_fixed, kind=MASK) \
            if args.tumors_fixed else None


def _cmd_metrics(args):
    result = _StoredResult(args.result)
    pair = _PairFiles(args)
    rep = build_report(pair, result)
    with open(args.out, "w") as fh:
        fh.write(rep.to_json())
        fh.write("\n")
    print(f"metrics written to {args.out}")
    return 0


def _cmd_suite(args):
    pairs = _load_json(args.pairs)
    modes = args.modes.split(",")
    for m in modes:
        if m not in MODES:
            raise DataError(f"unknown mode {m!r}")
    cfg = RegistrationConfig(
        mode=modes[0], weights=_parse_weights(args.weights),
        learn_rate=args.lr, max_iters=args.max_iters, patience=args.patience,
        rel_tol=args.rel_tol, integration=IntegrationConfig(args.steps),
        seed=args.seed, dtype=args.dtype)
    rows = []
    out_root = Path(args.out_dir) if args.out_dir else None
    for pair_idx, entry in enumerate(pairs):
        class _Pair:
            pass
        pair = _Pair()
        pair.mask_a = read_volume(entry["moving_mask"], kind=MASK)
        pair.mask_b = read_volume(entry["fixed_mask"], kind=MASK)
        pair.image_a = read_volume(entry["moving_image"]) \
            if entry.get("moving_image") else None
        pair.image_b = read_volume(entry["fixed_image"]) \
            if entry.get("fixed_image") else None
        pair.tumor_a = read_volume(entry["tumors_moving"], kind=MASK) \
            if entry.get("tumors_moving") else None
        pair.tumor_b = read_volume(entry["tumors_fixed"], kind=MASK) \
            if entry.get("tumors_fixed") else None
        for mode in modes:
            result = register(pair.mask_a, pair.mask_b,
                              replace(cfg, mode=mode), run_affine=args.affine)
            rep = build_report(pair, result)
            row = {"pair": entry.get("name", f"pair_{pair_idx}"),
                   "mode": mode,
                   "iterations_run": result.iterations_run,
                   "best_total": result.best_total}
            row.update(rep.to_json_dict())
            rows.append(row)
            if out_root is not None:
                pdir = out_root / row["pair"] / mode
                pdir.mkdir(parents=True, exist_ok=True)
                write_volume(result.warped_mask, pdir / "warped_mask.nii")
                write_volume(result.composed_forward,
                             pdir / "composed_forward.nii")
    _dump_json(rows, args.out)
    print(f"suite table with {len(rows)} rows written to {args.out}")
    return 0


def _parse_overlay(text):
    if ":" in text:
        path, color = text.rsplit(":", 1)
        rgb = tuple(int(c) for c in color.split(","))
        if len(rgb) != 3:
            raise DataError(f"overlay color must be r,g,b, got {color!r}")
    else:
        path, rgb = text, (255, 64, 64)
    return read_volume(path, kind=MASK), rgb


def _cmd_render(args):
    vol = read_volume(args.input)
    overlays = [_parse_overlay(o) for o in args.overlay or []]
    data = render_slice(vol, overlays, axis=args.axis, index=args.index)
    with open(args.out, "wb") as fh:
        fh.write(data)
    print(f"slice written to {args.out}")
    return 0


# ---------------------------------------------------------------------------


def _add_register_opts(p):
    p.add_argument("--mode", default="diffeocyc_inc2", choices=MODES)
    p.add_argument("--weights", default="1,0.8,1,0.4",
                   help="alpha,beta,gamma,mu (default: 1,0.8,1,0.4)")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--patience", type=int, default=25)
    p.add_argument("--rel-tol", type=float, default=1e-4)
    p.add_argument("--steps", type=int, default=7,
                   help="scaling-and-squaring steps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", default="float64", choices=("float64", "float32"))
    p.add_argument("--affine", action="store_true",
                   help="run affine pre-alignment first")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cycreg",
        description="Cyclic incremental diffeomorphic registration of "
                    "longitudinal liver segmentation masks")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic longitudinal pair")
    p.add_argument("--spec", required=True, help="phantom spec JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("register", help="register a moving mask onto a fixed mask")
    p.add_argument("--moving-mask")
    p.add_argument("--fixed-mask")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--from-manifest", help="reproduce a run from its manifest")
    _add_register_opts(p)
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("warp", help="apply a displacement field to a volume")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--binary", action="store_true",
                   help="store the result as uint8")
    p.set_defaults(func=_cmd_warp)

    p = sub.add_parser("metrics", help="evaluate a finished registration")
    p.add_argument("--result", required=True, help="register output directory")
    p.add_argument("--moving-mask", required=True)
    p.add_argument("--fixed-mask", required=True)
    p.add_argument("--moving-image")
    p.add_argument("--fixed-image")
    p.add_argument("--tumors-moving")
    p.add_argument("--tumors-fixed")
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("suite", help="run several modes over a pair list")
    p.add_argument("--pairs", required=True, help="pair list JSON")
    p.add_argument("--modes", required=True, help="comma-separated mode names")
    p.add_argument("--out", required=True, help="table JSON path")
    p.add_argument("--out-dir", help="optional directory for per-run outputs")
    p.add_argument("--weights", default="1,0.8,1,0.4")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--patience", type=int, default=25)
    p.add_argument("--rel-tol", type=float, default=1e-4)
    p.add_argument("--steps", type=int, default=7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", default="float64", choices=("float64", "float32"))
    p.add_argument("--affine", action="store_true")
    p.set_defaults(func=_cmd_suite)

    p = sub.add_parser("render", help="render a slice with mask overlays to PPM")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--overlay", action="append",
                   help="mask path, optionally path:r,g,b; repeatable")
    p.add_argument("--axis", default="z", choices=("x", "y", "z"))
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_render)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalAbortError as exc:
        print(f"error: numerical abort: {exc}", file=sys.stderr)
        return 4
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
