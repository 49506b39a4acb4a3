"""Command line front end: train, calibrate, monitor, simulate, benchmark.

Exit codes: 0 ok, 2 usage, 3 I/O, 4 bad data, 5 config mismatch.  Every
output artifact is written atomically and carries the effective
parameters, so reruns with identical inputs and seeds are byte-identical.
"""

from __future__ import annotations

import os

# Pin BLAS threading before numpy loads so results do not depend on how
# work is split across processes.  setdefault keeps user overrides.
for _v in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_v, "1")

import argparse
import glob
import json
import sys
import zipfile

import numpy as np

from .errors import ConfigMismatchError, DataError, InsufficientPhaseIError
from .util import atomic_write_bytes, atomic_write_text, dump_json, sha256_hex

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DATA = 4
EXIT_CONFIG = 5


def _fail(code: int, kind: str, msg: str) -> int:
    print(f"texspc: error: {kind}: {msg}", file=sys.stderr)
    return code


def read_config_file(path) -> dict:
    """Flat key=value file; '#' starts a comment; later keys win."""
    out = {}
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad config line (want key=value): {line!r}")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def merge_config(args, config: dict, casts: dict) -> None:
    """Fill argparse values that were left at None from the config file.

    casts maps key -> conversion from the config's string value.
    Explicit flags always win; unknown config keys are an error.
    """
    unknown = set(config) - set(casts)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for key, cast in casts.items():
        if getattr(args, key, None) is None and key in config:
            setattr(args, key, cast(config[key]))


def _parse_l_candidates(text: str):
    text = text.strip()
    if ".." in text:
        a, b = text.split("..", 1)
        return tuple(range(int(a), int(b) + 1))
    return tuple(int(t) for t in text.split(",") if t)


def _parse_charts(text: str):
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        kind, w = part.split(":", 1)
        out.append((kind.strip(), int(w)))
    return tuple(out)


def _parse_sizes(text: str):
    out = []
    for part in text.split(","):
        part = part.strip()
        if part:
            r, c = part.lower().split("x", 1)
            out.append((int(r), int(c)))
    return tuple(out)


def _parse_size(text: str):
    r, c = text.lower().split("x", 1)
    return (int(r), int(c))


def _parse_center(text: str):
    r, c = text.split(",", 1)
    return (int(r), int(c))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="texspc",
                                description="texture monitoring pipeline")
    p.add_argument("--version", action="version", version="texspc 1.0")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fit the texture model from an image")
    t.add_argument("input", help="training image (PNG)")
    t.add_argument("-o", "--out", required=True, help="model file to write")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--l", type=int, default=None,
                   help="fixed neighborhood half-width (skips selection)")
    t.add_argument("--l-candidates", type=_parse_l_candidates, default=None,
                   help="candidates for cross-validation, e.g. 1..20 or 1,2,3")
    t.add_argument("--min-leaf", type=int, default=None)
    t.add_argument("--max-depth", type=int, default=None)
    t.add_argument("--cv-folds", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--report", default=None,
                   help="where to write the JSON report (default OUT.json)")

    c = sub.add_parser("calibrate", help="set control limits from in-control images")
    c.add_argument("--model", default=None, help="trained model file")
    c.add_argument("--phase1", required=True,
                   help="directory of in-control PNG images")
    c.add_argument("-o", "--out", required=True, help="bundle file to write")
    c.add_argument("--config", help="key=value config file")
    c.add_argument("--stat", choices=["ad", "bp", "epwma", "epwmv"], default=None)
    c.add_argument("--w", type=int, default=None)
    c.add_argument("--alpha", type=float, default=None)
    c.add_argument("--nd", type=int, default=None,
                   help="target noise pixels per in-control diagnostic image")
    c.add_argument("--threads", type=int, default=None)
    c.add_argument("--cdf-image", default=None,
                   help="fit the reference CDF from this image's residuals "
                        "instead of the pooled Phase I residuals")
    c.add_argument("--cl-exceedances", type=int, default=None,
                   help="set the control limit as the (K+1)-th largest Phase I "
                        "statistic instead of the (1-alpha) quantile")
    c.add_argument("--window-shape", choices=["disk", "square"], default=None)

    m = sub.add_parser("monitor", help="score images against a bundle")
    m.add_argument("--bundle", required=True)
    m.add_argument("images", nargs="+", help="image files or a directory")
    m.add_argument("-o", "--out", default=None,
                   help="directory for reports and diagnostic images")
    m.add_argument("--diag-always", action="store_true",
                   help="write a diagnostic image even without an alarm")

    s = sub.add_parser("simulate", help="generate synthetic textured images")
    s.add_argument("-o", "--out", required=True, help="output directory")
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--rows", type=int, default=250)
    s.add_argument("--cols", type=int, default=250)
    s.add_argument("--phi1", type=float, default=0.6)
    s.add_argument("--phi2", type=float, default=0.35)
    s.add_argument("--sigma", type=float, default=1.0)
    s.add_argument("--burn-in", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--defect", default="none",
                   choices=["none", "white_noise_ellipse", "milder_ar_ellipse",
                            "black_square", "white_noise_square"])
    s.add_argument("--defect-size", type=_parse_size, default=None,
                   help="defect size RxC")
    s.add_argument("--defect-center", type=_parse_center, default=None,
                   help="defect center row,col (default random)")
    s.add_argument("--defect-sigma", type=float, default=None,
                   help="white-noise defect sd (default: match the field)")

    b = sub.add_parser("benchmark", help="run the seeded power experiment")
    b.add_argument("-o", "--out", required=True, help="CSV file to write")
    b.add_argument("--config", help="key=value config file")
    b.add_argument("--desk-scale", action="store_true",
                   help="reduced acceptance-sized experiment")
    b.add_argument("--replicates", type=int, default=None)
    b.add_argument("--phase1", type=int, default=None)
    b.add_argument("--phase2", type=int, default=None)
    b.add_argument("--incontrol", type=int, default=None)
    b.add_argument("--alpha", type=float, default=None)
    b.add_argument("--l", type=int, default=None)
    b.add_argument("--charts", type=_parse_charts, default=None,
                   help="comma list of kind:w, e.g. bp:5,ad:15")
    b.add_argument("--sizes", type=_parse_sizes, default=None,
                   help="defect sizes, e.g. 5x5,9x21")
    b.add_argument("--seed", type=int, default=None)
    b.add_argument("--threads", type=int, default=None)
    return p


def cmd_train(args) -> int:
    from .image import build_training_matrix, load_image, standardize
    from .tree import FitConfig, fit_tree, select_neighborhood
    from .util import array_digest

    if args.config:
        merge_config(args, read_config_file(args.config), {
            "l": int, "l_candidates": _parse_l_candidates, "min_leaf": int,
            "max_depth": int, "cv_folds": int, "seed": int,
        })
    seed = 0 if args.seed is None else args.seed
    cfg = FitConfig(
        min_leaf_size=30 if args.min_leaf is None else args.min_leaf,
        max_depth=20 if args.max_depth is None else args.max_depth,
        cv_folds=5 if args.cv_folds is None else args.cv_folds,
        l_candidates=args.l_candidates or tuple(range(1, 21)),
    )
    img = load_image(args.input)
    std = standardize(img)
    cv_entries = None
    if args.l is not None:
        l = args.l
        selected_by = "fixed"
    else:
        l, report = select_neighborhood(std, cfg, seed=seed)
        selected_by = "cv"
        cv_entries = [{"l": e.l, "cv_mse": e.cv_mse, "cv_sse": e.cv_sse,
                       "n_rows": e.n_rows, "skipped": e.skipped}
                      for e in report.entries]
    tree = fit_tree(build_training_matrix(std, l), cfg)
    digest = array_digest(std)
    blob = tree.to_bytes({"fit_config": cfg.to_dict(), "seed": seed,
                          "training_digest": digest})
    atomic_write_bytes(args.out, blob)
    report_path = args.report or (args.out + ".json")
    atomic_write_text(report_path, dump_json({
        "schema_version": SCHEMA_VERSION,
        "command": "train",
        "input": os.path.basename(args.input),
        "l": l,
        "selected_by": selected_by,
        "cv": cv_entries,
        "seed": seed,
        "fit": cfg.to_dict(),
        "n_nodes": tree.n_nodes,
        "n_leaves": tree.n_leaves,
        "model_sha256": sha256_hex(blob),
        "training_digest": digest,
    }))
    print(f"model written: {args.out} (l={l}, {tree.n_leaves} leaves)")
    return EXIT_OK


def _load_dir(path):
    from .image import load_image
    files = sorted(glob.glob(os.path.join(path, "*.png")))
    return files, [load_image(f) for f in files]


def cmd_calibrate(args) -> int:
    from .image import load_image, standardize
    from .monitor import calibrate, save_bundle
    from .refcdf import fit_reference_cdf
    from .sms import SmsConfig
    from .tree import load_tree, residual_image

    if args.config:
        merge_config(args, read_config_file(args.config), {
            "stat": str, "w": int, "alpha": float, "nd": int, "threads": int,
            "model": str, "cdf_image": str, "cl_exceedances": int,
            "window_shape": str,
        })
    stat = args.stat or "bp"
    w = 15 if args.w is None else args.w
    alpha = 0.003 if args.alpha is None else args.alpha
    n_d = 10 if args.nd is None else args.nd
    threads = args.threads or 1
    cfg = SmsConfig(kind=stat, w=w,
                    window_shape=args.window_shape or "disk")
    tree = None
    if stat in ("ad", "bp"):
        if not args.model:
            raise ValueError("--model is required for the residual charts")
        tree, _meta = load_tree(args.model)
    files, images = _load_dir(args.phase1)
    if not images:
        raise InsufficientPhaseIError(f"no PNG images in {args.phase1}")
    cdf = None
    if stat == "ad" and args.cdf_image:
        ref = standardize(load_image(args.cdf_image))
        cdf = fit_reference_cdf(residual_image(tree, ref).values.ravel())
    bundle = calibrate(
        images, cfg, alpha=alpha, n_d=n_d, tree=tree, cdf=cdf,
        threads=threads, cl_exceedances=args.cl_exceedances,
        extra={
            "phase1_files": [os.path.basename(f) for f in files],
            "model_file": os.path.basename(args.model) if args.model else None,
            "cdf_source": (os.path.basename(args.cdf_image)
                           if args.cdf_image else "pooled-phase1"),
        })
    save_bundle(bundle, args.out)
    print(f"bundle written: {args.out} (N={bundle.n_phase1}, "
          f"CL={bundle.control_limit:.6g})")
    return EXIT_OK


def cmd_monitor(args) -> int:
    from .image import load_image
    from .monitor import load_bundle, monitor_image, save_diagnostic_png

    bundle = load_bundle(args.bundle)
    paths = []
    for item in args.images:
        if os.path.isdir(item):
            paths.extend(sorted(glob.glob(os.path.join(item, "*.png"))))
        else:
            paths.append(item)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
    summary = ["file,s,alarmed"]
    used_stems = set()
    for path in paths:
        img = load_image(path)
        rep = monitor_image(bundle, img, diag_always=args.diag_always)
        stem = os.path.splitext(os.path.basename(path))[0]
        # inputs from different directories may share a basename
        if stem in used_stems:
            k = 2
            while f"{stem}_{k}" in used_stems:
                k += 1
            stem = f"{stem}_{k}"
        used_stems.add(stem)
        diag_path = None
        if rep.diagnostic is not None and args.out:
            diag_path = os.path.join(args.out, stem + "_diag.png")
            save_diagnostic_png(rep.diagnostic, rep.sms.offset,
                                rep.source_shape, diag_path)
        report = {
            "schema_version": SCHEMA_VERSION,
            "file": os.path.basename(path),
            "s": rep.s_value,
            "cl": bundle.control_limit,
            "lcl": bundle.lcl,
            "ucl": bundle.ucl,
            "alarmed": rep.alarmed,
            "kind": bundle.cfg.kind,
            "w": bundle.cfg.w,
            "diag_path": os.path.basename(diag_path) if diag_path else None,
            "n_black": rep.n_black,
            "diag_threshold": bundle.diag_threshold,
            "diag_offset": list(rep.sms.offset),
            "source_shape": list(rep.source_shape),
        }
        print(json.dumps(report, sort_keys=True))
        if args.out:
            atomic_write_text(os.path.join(args.out, stem + ".json"),
                              dump_json(report))
        summary.append(f"{os.path.basename(path)},{rep.s_value!r},{int(rep.alarmed)}")
    if args.out and len(paths) > 1:
        atomic_write_text(os.path.join(args.out, "summary.csv"),
                          "\n".join(summary) + "\n")
    return EXIT_OK


def _rle(mask) -> list:
    flat = np.asarray(mask, dtype=bool).ravel()
    idx = np.flatnonzero(np.diff(np.concatenate(([False], flat, [False]))))
    return [[int(s), int(e - s)] for s, e in zip(idx[::2], idx[1::2])]


def cmd_simulate(args) -> int:
    from .image import save_image_png
    from .simulate import DefectSpec, SarParams, make_image
    from .util import substream

    params = SarParams(phi1=args.phi1, phi2=args.phi2, sigma=args.sigma,
                       burn_in=args.burn_in)
    defect = None
    if args.defect != "none":
        if not args.defect_size:
            raise ValueError("--defect-size is required with --defect")
        defect = DefectSpec(kind=args.defect, size=args.defect_size,
                            center=args.defect_center,
                            sigma=args.defect_sigma)
    os.makedirs(args.out, exist_ok=True)
    entries = []
    for i in range(args.count):
        rng = substream(args.seed, 0, i)
        img, mask = make_image(args.rows, args.cols, params, rng, defect=defect)
        name = f"img_{i:05d}.png"
        save_image_png(img, os.path.join(args.out, name))
        entries.append({
            "file": name,
            "spawn_key": [0, i],
            "defect": None if defect is None else {
                "kind": defect.kind, "size": list(defect.size),
                "center": list(defect.center) if defect.center else None,
                "sigma": defect.sigma,
            },
            "mask_rle": None if mask is None else _rle(mask),
        })
    atomic_write_text(os.path.join(args.out, "manifest.json"), dump_json({
        "schema_version": SCHEMA_VERSION,
        "command": "simulate",
        "params": {"phi1": params.phi1, "phi2": params.phi2,
                   "sigma": params.sigma, "burn_in": params.burn_in,
                   "rows": args.rows, "cols": args.cols},
        "seed": args.seed,
        "count": args.count,
        "images": entries,
    }))
    print(f"{args.count} image(s) written to {args.out}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    from .power import (
        PowerConfig,
        desk_scale_config,
        ellipse_defects,
        run_power_experiment,
        write_power_csv,
    )

    if args.config:
        merge_config(args, read_config_file(args.config), {
            "replicates": int, "phase1": int, "phase2": int, "incontrol": int,
            "alpha": float, "l": int, "charts": _parse_charts,
            "sizes": _parse_sizes, "seed": int, "threads": int,
        })
    seed = 0 if args.seed is None else args.seed
    threads = args.threads or 1
    base = desk_scale_config() if args.desk_scale else PowerConfig()
    cfg = PowerConfig(
        replicates=base.replicates if args.replicates is None else args.replicates,
        n_phase1=base.n_phase1 if args.phase1 is None else args.phase1,
        n_phase2=base.n_phase2 if args.phase2 is None else args.phase2,
        n_incontrol=base.n_incontrol if args.incontrol is None else args.incontrol,
        alpha=base.alpha if args.alpha is None else args.alpha,
        l=base.l if args.l is None else args.l,
        charts=base.charts if args.charts is None else args.charts,
        defects=base.defects if args.sizes is None else ellipse_defects(args.sizes),
        image_size=base.image_size, train_size=base.train_size,
        sar=base.sar, fit=base.fit,
    )
    rows = run_power_experiment(cfg, seed=seed, threads=threads)
    write_power_csv(rows, args.out)
    atomic_write_text(args.out + ".json", dump_json({
        "schema_version": SCHEMA_VERSION,
        "command": "benchmark",
        "seed": seed,
        "config": {
            "replicates": cfg.replicates, "n_phase1": cfg.n_phase1,
            "n_phase2": cfg.n_phase2, "n_incontrol": cfg.n_incontrol,
            "alpha": cfg.alpha, "l": cfg.l,
            "charts": [list(c) for c in cfg.charts],
            "defects": [{"kind": d.kind, "size": list(d.size)}
                        for d in cfg.defects],
            "image_size": list(cfg.image_size),
            "train_size": list(cfg.train_size),
        },
    }))
    print(f"power table written: {args.out}")
    return EXIT_OK


_COMMANDS = {
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "monitor": cmd_monitor,
    "simulate": cmd_simulate,
    "benchmark": cmd_benchmark,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigMismatchError as e:
        return _fail(EXIT_CONFIG, "config", str(e))
    except DataError as e:
        return _fail(EXIT_DATA, "data", str(e))
    except zipfile.BadZipFile as e:
        return _fail(EXIT_DATA, "data", f"bad bundle file: {e}")
    except OSError as e:
        return _fail(EXIT_IO, "io", str(e))
    except ValueError as e:
        return _fail(EXIT_USAGE, "usage", str(e))


if __name__ == "__main__":
    sys.exit(main())
