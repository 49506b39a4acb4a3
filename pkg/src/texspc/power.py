"""Seeded Monte Carlo power study over simulated textured surfaces.

Each replicate runs the whole pipeline from scratch: fit the texture
model on a fresh training image, calibrate every chart on a fresh
in-control Phase I set, then score defect images and count alarms.
Every random draw comes from a substream keyed by (replicate, role,
image index), so results are bit-identical for a given master seed no
matter how the work is spread over processes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import parallel
from .image import build_training_matrix, standardize
from .monitor import chart_calibration, chart_extremes, compute_sms
from .refcdf import fit_reference_cdf
from .simulate import DefectSpec, SarParams, make_image
from .sms import SmsConfig
from .tree import (
    FitConfig,
    ResidualImage,
    fit_tree,
    residual_image,
    select_neighborhood,
)
from .util import atomic_write_text, substream

_ROLE_TRAIN = 0
_ROLE_PHASE1 = 1
_ROLE_INCONTROL = 2
_ROLE_DEFECT = 3  # + defect index

DEFAULT_DEFECT_SIZES = ((5, 5), (5, 21), (9, 21), (15, 21))


def ellipse_defects(sizes=DEFAULT_DEFECT_SIZES, sigma: float | None = None):
    return tuple(DefectSpec(kind="white_noise_ellipse", size=s, sigma=sigma)
                 for s in sizes)


@dataclass(frozen=True)
class PowerConfig:
    replicates: int = 3
    n_phase1: int = 300
    n_phase2: int = 50
    n_incontrol: int = 0
    alpha: float = 0.003
    image_size: tuple[int, int] = (250, 250)
    train_size: tuple[int, int] = (500, 500)
    l: int | None = 1              # None selects l by cross-validation
    charts: tuple[tuple[str, int], ...] = (("bp", 5), ("ad", 15), ("ad", 25))
    defects: tuple[DefectSpec, ...] = field(default_factory=ellipse_defects)
    sar: SarParams = field(default_factory=SarParams)
    fit: FitConfig = field(default_factory=FitConfig)


def desk_scale_config() -> PowerConfig:
    """Reduced experiment sized for an acceptance run on a workstation.

    The tree here uses much smaller leaves than the library default.
    With a 300-image Phase I set the control limit is the sample
    maximum, so a single image whose deepest excursion falls outside
    the training range would otherwise set the limit; tiny leaves let
    the deepest leaves follow the training support edge, which costs
    some per-leaf noise but keeps the in-control tail short.
    """
    return PowerConfig(
        replicates=3, n_phase1=300, n_phase2=50, l=1,
        charts=(("bp", 5), ("ad", 15), ("ad", 25),
                ("epwma", 5), ("epwma", 15), ("epwma", 25),
                ("epwmv", 15), ("epwmv", 25)),
        fit=FitConfig(min_leaf_size=3, max_depth=40),
    )


def full_scale_config() -> PowerConfig:
    """The complete protocol (hours of compute)."""
    return PowerConfig(
        replicates=10, n_phase1=1000, n_phase2=400, l=None,
        charts=tuple((k, w) for k in ("ad", "bp") for w in (5, 15, 25))
        + tuple((k, w) for k in ("epwma", "epwmv") for w in (5, 15, 25)),
    )


@dataclass(frozen=True)
class PowerRow:
    defect: str
    statistic: str
    w: int
    power: float
    mc_se: float
    replicates: int
    n_trials: int


def defect_label(spec: DefectSpec) -> str:
    return f"{spec.kind}_{spec.size[0]}x{spec.size[1]}"


def _gen_phase1(j):
    ctx = parallel.get_context()
    rng = substream(ctx["seed"], ctx["rep"], _ROLE_PHASE1, j)
    img, _ = make_image(*ctx["size"], ctx["sar"], rng)
    std = standardize(img)
    res = residual_image(ctx["tree"], std)
    return std, res.values


def _sms_values(cfg, std, res, cdf):
    sms = compute_sms(cfg, std_img=std, res=res, cdf=cdf)
    return chart_extremes(cfg, sms)


def _score_phase1(j):
    ctx = parallel.get_context()
    res = ResidualImage(values=ctx["res"][j], l=ctx["l"],
                        source_shape=tuple(ctx["size"]))
    std = ctx["std"][j]
    return [_sms_values(cfg, std, res, ctx["cdf"]) for cfg in ctx["configs"]]


def _score_phase2(task):
    d_idx, j = task
    ctx = parallel.get_context()
    if d_idx < 0:
        rng = substream(ctx["seed"], ctx["rep"], _ROLE_INCONTROL, j)
        defect = None
    else:
        rng = substream(ctx["seed"], ctx["rep"], _ROLE_DEFECT + d_idx, j)
        defect = ctx["defects"][d_idx]
    img, _ = make_image(*ctx["size"], ctx["sar"], rng, defect=defect)
    std = standardize(img)
    res = residual_image(ctx["tree"], std)
    return [_sms_values(cfg, std, res, ctx["cdf"]) for cfg in ctx["configs"]]


def run_replicate(cfg: PowerConfig, seed: int, rep: int, threads: int = 1):
    """One full pipeline pass; returns alarm booleans per chart/defect.

    Output maps defect label -> (n_charts, n_images) boolean array; the
    in-control batch (if any) is under label "none".
    """
    rng = substream(seed, rep, _ROLE_TRAIN, 0)
    train_img, _ = make_image(*cfg.train_size, cfg.sar, rng)
    train_std = standardize(train_img)
    if cfg.l is None:
        l, _report = select_neighborhood(train_std, cfg.fit, seed=seed + rep)
    else:
        l = cfg.l
    tree = fit_tree(build_training_matrix(train_std, l), cfg.fit)

    configs = [SmsConfig(kind=k, w=w) for k, w in cfg.charts]
    base_ctx = {"seed": seed, "rep": rep, "size": cfg.image_size,
                "sar": cfg.sar, "tree": tree}
    pairs = parallel.map_tasks(_gen_phase1, range(cfg.n_phase1), threads,
                               ctx=base_ctx)
    std_stack = np.stack([p[0] for p in pairs])
    res_stack = np.stack([p[1] for p in pairs])
    del pairs
    cdf = None
    if any(c.kind == "ad" for c in configs):
        cdf = fit_reference_cdf(res_stack.ravel())

    score_ctx = dict(base_ctx, std=std_stack, res=res_stack, l=l,
                     cdf=cdf, configs=configs, defects=cfg.defects)
    p1 = parallel.map_tasks(_score_phase1, range(cfg.n_phase1), threads,
                            ctx=score_ctx)
    limits = []
    for c, chart in enumerate(configs):
        hi = np.array([row[c][0] for row in p1])
        lo = np.array([row[c][1] for row in p1])
        cl, center, _stats, _rule = chart_calibration(chart, hi, lo, cfg.alpha)
        limits.append((cl, center))

    tasks = [(d, j) for d in range(len(cfg.defects)) for j in range(cfg.n_phase2)]
    tasks += [(-1, j) for j in range(cfg.n_incontrol)]
    p2 = parallel.map_tasks(_score_phase2, tasks, threads, ctx=score_ctx)

    out = {}
    for d_idx, spec in [(i, s) for i, s in enumerate(cfg.defects)] + [(-1, None)]:
        idx = [t for t, (d, _j) in enumerate(tasks) if d == d_idx]
        if not idx:
            continue
        alarms = np.zeros((len(configs), len(idx)), dtype=bool)
        for c, chart in enumerate(configs):
            cl, center = limits[c]
            for col, t in enumerate(idx):
                hi, lo = p2[t][c]
                s = hi if center is None else max(hi - center, center - lo)
                alarms[c, col] = s > cl
        out["none" if spec is None else defect_label(spec)] = alarms
    return out


def run_power_experiment(cfg: PowerConfig, seed: int = 0,
                         threads: int = 1) -> list[PowerRow]:
    per_rep = [run_replicate(cfg, seed, r, threads)
               for r in range(cfg.replicates)]
    rows = []
    labels = [defect_label(s) for s in cfg.defects]
    if cfg.n_incontrol > 0:
        labels.append("none")
    for d, label in enumerate(labels):
        stacked = np.concatenate([rep[label] for rep in per_rep], axis=1)
        for c, (kind, w) in enumerate(cfg.charts):
            n = stacked.shape[1]
            p = float(stacked[c].mean())
            se = float(np.sqrt(p * (1.0 - p) / n))
            rows.append(PowerRow(defect=label, statistic=kind, w=w,
                                 power=p, mc_se=se,
                                 replicates=cfg.replicates, n_trials=n))
    return rows


def write_power_csv(rows, path) -> None:
    import io
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["defect", "statistic", "w", "power", "mc_se", "replicates"])
    for r in rows:
        writer.writerow([r.defect, r.statistic, r.w,
                         repr(r.power), repr(r.mc_se), r.replicates])
    atomic_write_text(path, buf.getvalue())


def power_table(rows) -> dict:
    """(defect, statistic, w) -> power, for easy lookup in tests."""
    return {(r.defect, r.statistic, r.w): r.power for r in rows}
