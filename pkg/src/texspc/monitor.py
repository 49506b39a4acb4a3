"""Phase I calibration, Phase II scoring, and diagnostic images.

Calibration scores every Phase I image, sets the control limit at the
(1 - alpha) empirical quantile of the image statistics, and sets the
diagnostic threshold so that on average n_d pixels per in-control image
exceed it.  The residual charts (ad, bp) alarm one-sided on the image
maximum; the intensity baselines (epwma, epwmv) chart both extremes
against symmetric limits around a Phase I centerline, so their stored
per-image statistic is the worst-side deviation from that centerline.
"""

from __future__ import annotations

import io
import json
import warnings
import zipfile
from dataclasses import dataclass

import numpy as np

from . import parallel
from .baselines import epwma_sms, epwmv_sms
from .errors import (
    ConfigMismatchError,
    DimensionMismatchError,
    InsufficientPhaseIError,
)
from .image import standardize
from .refcdf import ReferenceCdf, fit_reference_cdf
from .sms import SmsConfig, SmsImage, ad_sms, bp_sms, image_statistic
from .tree import RegressionTree, ResidualImage, residual_image
from .util import array_digest, atomic_write_bytes, empirical_quantile

SCHEMA_VERSION = 1


def compute_sms(cfg: SmsConfig, std_img=None, res=None, cdf=None) -> SmsImage:
    """Dispatch one statistic map from whichever input it needs."""
    if cfg.kind == "ad":
        return ad_sms(res, cdf, cfg.w)
    if cfg.kind == "bp":
        return bp_sms(res, cfg.w, method=cfg.bp_method)
    if cfg.kind == "epwma":
        return epwma_sms(std_img, cfg.w)
    return epwmv_sms(std_img, cfg.w, window_shape=cfg.window_shape)


def chart_extremes(cfg: SmsConfig, sms: SmsImage) -> tuple[float, float]:
    """(high, low) charted values of one image.

    One-sided charts only use the maximum; epwmv charts the square root
    of the moving variance.
    """
    hi = image_statistic(sms)
    lo = float(np.min(sms.values))
    if cfg.kind == "epwmv":
        return float(np.sqrt(hi)), float(np.sqrt(lo))
    return hi, lo


@dataclass
class CalibrationBundle:
    cfg: SmsConfig
    alpha: float
    n_d: int
    tree: RegressionTree | None
    model_digest: str | None
    cdf: ReferenceCdf | None
    phase1_stats: np.ndarray      # sorted ascending; the monitored statistic
    control_limit: float
    diag_threshold: float
    m_sms: int                    # SMS values per Phase I image
    n_phase1: int
    image_shape: tuple[int, int]
    centerline: float | None = None   # two-sided charts only
    cl_rule: str = "quantile"
    extra: dict | None = None

    @property
    def lcl(self):
        if self.centerline is None:
            return None
        return self.centerline - self.control_limit

    @property
    def ucl(self):
        if self.centerline is None:
            return None
        return self.centerline + self.control_limit

    def manifest(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": self.cfg.kind,
            "w": self.cfg.w,
            "window_shape": self.cfg.window_shape,
            "bp_method": self.cfg.bp_method,
            "alpha": self.alpha,
            "n_d": self.n_d,
            "control_limit": self.control_limit,
            "centerline": self.centerline,
            "lcl": self.lcl,
            "ucl": self.ucl,
            "diag_threshold": self.diag_threshold,
            "m_sms": self.m_sms,
            "n_phase1": self.n_phase1,
            "image_rows": self.image_shape[0],
            "image_cols": self.image_shape[1],
            "model_digest": self.model_digest,
            "has_model": self.tree is not None,
            "has_cdf": self.cdf is not None,
            "cl_rule": self.cl_rule,
            "extra": self.extra,
        }


def save_bundle(bundle: CalibrationBundle, path) -> None:
    """Write the bundle as a deterministic (byte-stable) zip archive."""
    buf = io.BytesIO()
    stamp = (1980, 1, 1, 0, 0, 0)
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        def add(name, data):
            info = zipfile.ZipInfo(name, date_time=stamp)
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)
        add("manifest.json",
            json.dumps(bundle.manifest(), sort_keys=True, indent=2) + "\n")
        if bundle.tree is not None:
            add("model.bin", bundle.tree.to_bytes())
        if bundle.cdf is not None:
            add("refcdf.bin", bundle.cdf.to_bytes())
        add("phase1.bin", np.ascontiguousarray(
            bundle.phase1_stats, dtype="<f8").tobytes())
    atomic_write_bytes(path, buf.getvalue())


def load_bundle(path) -> CalibrationBundle:
    with zipfile.ZipFile(path, "r") as zf:
        man = json.loads(zf.read("manifest.json").decode("utf-8"))
        tree = None
        if man["has_model"]:
            tree, _ = RegressionTree.from_bytes(zf.read("model.bin"))
        cdf = None
        if man["has_cdf"]:
            cdf = ReferenceCdf.from_bytes(zf.read("refcdf.bin"))
        stats = np.frombuffer(zf.read("phase1.bin"), dtype="<f8").astype(np.float64)
    cfg = SmsConfig(kind=man["kind"], w=man["w"],
                    window_shape=man["window_shape"], bp_method=man["bp_method"])
    return CalibrationBundle(
        cfg=cfg, alpha=man["alpha"], n_d=man["n_d"], tree=tree,
        model_digest=man["model_digest"], cdf=cdf, phase1_stats=stats,
        control_limit=man["control_limit"], diag_threshold=man["diag_threshold"],
        m_sms=man["m_sms"], n_phase1=man["n_phase1"],
        image_shape=(man["image_rows"], man["image_cols"]),
        centerline=man["centerline"], cl_rule=man["cl_rule"],
        extra=man["extra"],
    )


def _as_stack(images) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float64) if not isinstance(images, np.ndarray) \
        else images.astype(np.float64, copy=False)
    if arr.ndim == 2:
        arr = arr[None, :, :]
    if arr.ndim != 3:
        raise DimensionMismatchError("expected a stack of 2-d images")
    return arr


def check_same_shape(images) -> np.ndarray:
    try:
        return _as_stack(images)
    except ValueError:
        raise DimensionMismatchError(
            "all Phase I images must have identical dimensions") from None


def _residual_worker(i):
    ctx = parallel.get_context()
    std = standardize(ctx["stack"][i])
    return residual_image(ctx["tree"], std).values


def phase1_residuals(tree: RegressionTree, images, threads: int = 1) -> np.ndarray:
    """Residual maps of every Phase I image, stacked (N, ih, iw)."""
    stack = check_same_shape(images)
    vals = parallel.map_tasks(_residual_worker, range(len(stack)), threads,
                              ctx={"stack": stack, "tree": tree})
    return np.ascontiguousarray(np.stack(vals))


def _score_worker(i):
    """Per-image statistics for every requested chart configuration."""
    ctx = parallel.get_context()
    res_stack = ctx.get("residuals")
    std_stack = ctx.get("std")
    cdf = ctx.get("cdf")
    res = None
    if res_stack is not None:
        res = ResidualImage(values=res_stack[i], l=ctx["l"],
                            source_shape=ctx["source_shape"])
    out = []
    for cfg in ctx["configs"]:
        sms = compute_sms(cfg, std_img=None if std_stack is None else std_stack[i],
                          res=res, cdf=cdf)
        hi, lo = chart_extremes(cfg, sms)
        topk = None
        if ctx["n_keep"]:
            flat = sms.values.ravel()
            k = min(ctx["n_keep"], flat.size)
            topk = np.partition(flat, flat.size - k)[flat.size - k:].copy()
        out.append((hi, lo, sms.values.size, topk))
    return out


def _control_limit(stats_sorted: np.ndarray, alpha: float,
                   cl_exceedances: int | None):
    if cl_exceedances is None:
        return empirical_quantile(stats_sorted, 1.0 - alpha), "quantile"
    k = int(cl_exceedances)
    if k < 0 or k >= len(stats_sorted):
        raise ValueError("cl_exceedances must be in [0, N)")
    # limit = (k+1)-th largest, so at most k Phase I statistics exceed it
    return float(stats_sorted[len(stats_sorted) - 1 - k]), f"exceedances:{k}"


def _diag_threshold(topk_list, n_d: int, n_images: int) -> float:
    """Exact pooled (1 - n_d/m_sms) quantile from per-image top values.

    The wanted order statistic has 1-based rank n_d*N + 1 from the top
    of the pooled per-pixel sample; the global top-(n_d*N + 1) values
    are always contained in the union of each image's top-(n_d*N + 1),
    so only those need pooling.
    """
    pooled = np.concatenate(topk_list)
    rank = n_d * n_images + 1
    if rank >= pooled.size:
        return float(pooled.min())
    return float(np.partition(pooled, pooled.size - rank)[pooled.size - rank])


def calibrate_scores(configs, stack=None, tree=None, residuals=None,
                     cdf=None, n_keep=0, threads: int = 1):
    """Score every Phase I image under each chart config in one pass.

    Returns per config: (hi array, lo array, m_sms, list of per-image
    top-value arrays).  residuals (N, ih, iw) drive ad/bp; stack of
    standardized images drives the baselines.
    """
    n = len(residuals) if residuals is not None else len(stack)
    ctx = {
        "configs": list(configs),
        "std": stack,
        "residuals": residuals,
        "cdf": cdf,
        "n_keep": n_keep,
        "l": tree.l if tree is not None else 0,
        "source_shape": None,
    }
    if tree is not None and stack is not None:
        ctx["source_shape"] = stack.shape[1:]
    elif residuals is not None:
        # only used for bookkeeping inside ResidualImage
        ih, iw = residuals.shape[1:]
        l = ctx["l"]
        ctx["source_shape"] = (ih + l, iw + 2 * l)
    rows = parallel.map_tasks(_score_worker, range(n), threads, ctx=ctx)
    out = []
    for c in range(len(ctx["configs"])):
        hi = np.array([r[c][0] for r in rows])
        lo = np.array([r[c][1] for r in rows])
        m_sms = rows[0][c][2]
        topk = [r[c][3] for r in rows] if n_keep else None
        out.append((hi, lo, m_sms, topk))
    return out


def chart_calibration(cfg: SmsConfig, hi, lo, alpha,
                      cl_exceedances: int | None = None):
    """Limits from per-image extremes: (limit, centerline, stats, rule).

    One-sided charts monitor hi directly.  Two-sided charts monitor the
    worst-side deviation from a centerline halfway between the medians
    of the two extremes, which makes the stored limit the half-width of
    a symmetric (LCL, UCL) band.
    """
    centerline = None
    if cfg.two_sided:
        c = 0.5 * (empirical_quantile(np.sort(hi), 0.5)
                   + empirical_quantile(np.sort(lo), 0.5))
        stats = np.maximum(hi - c, c - lo)
        centerline = float(c)
    else:
        stats = np.asarray(hi, dtype=np.float64)
    stats_sorted = np.sort(stats)
    cl, rule = _control_limit(stats_sorted, alpha, cl_exceedances)
    return float(cl), centerline, stats_sorted, rule


def assemble_bundle(cfg: SmsConfig, hi, lo, m_sms, topk, alpha, n_d,
                    image_shape, tree=None, cdf=None,
                    cl_exceedances=None, extra=None) -> CalibrationBundle:
    """Turn one config's Phase I scores into a calibration bundle."""
    n = len(hi)
    if n == 0:
        raise InsufficientPhaseIError("no Phase I images")
    if n < int(np.ceil(1.0 / alpha)):
        warnings.warn(
            f"only {n} Phase I images for alpha={alpha}; "
            "the control limit is the sample maximum")
    cl, centerline, stats_sorted, rule = chart_calibration(
        cfg, hi, lo, alpha, cl_exceedances)
    thr = _diag_threshold(topk, n_d, n)
    return CalibrationBundle(
        cfg=cfg, alpha=alpha, n_d=n_d, tree=tree,
        model_digest=None if tree is None else array_digest(tree.value),
        cdf=cdf if cfg.kind == "ad" else None,
        phase1_stats=stats_sorted, control_limit=cl,
        diag_threshold=thr, m_sms=m_sms, n_phase1=n,
        image_shape=tuple(image_shape), centerline=centerline,
        cl_rule=rule, extra=extra,
    )


def calibrate(images, cfg: SmsConfig, alpha: float = 0.003, n_d: int = 10,
              tree: RegressionTree | None = None,
              cdf: ReferenceCdf | None = None,
              threads: int = 1, cl_exceedances: int | None = None,
              extra: dict | None = None) -> CalibrationBundle:
    """Full Phase I calibration for a single chart configuration.

    For the residual charts the reference CDF, unless supplied, is fit
    from the pooled residuals of all Phase I images.
    """
    if len(images) == 0:
        raise InsufficientPhaseIError("no Phase I images")
    stack = check_same_shape(images)
    image_shape = stack.shape[1:]
    n_keep = n_d * len(stack) + 1
    if cfg.kind in ("ad", "bp"):
        if tree is None:
            raise ValueError("residual charts require a fitted tree")
        residuals = phase1_residuals(tree, stack, threads)
        if cfg.kind == "ad" and cdf is None:
            cdf = fit_reference_cdf(residuals.ravel())
        (scores,) = calibrate_scores([cfg], tree=tree, residuals=residuals,
                                     cdf=cdf, n_keep=n_keep, threads=threads)
    else:
        std = np.stack([standardize(img) for img in stack])
        (scores,) = calibrate_scores([cfg], stack=std, n_keep=n_keep,
                                     threads=threads)
    hi, lo, m_sms, topk = scores
    return assemble_bundle(cfg, hi, lo, m_sms, topk, alpha, n_d, image_shape,
                           tree=tree, cdf=cdf, cl_exceedances=cl_exceedances,
                           extra=extra)


@dataclass
class MonitorReport:
    s_value: float
    alarmed: bool
    sms: SmsImage
    diagnostic: np.ndarray | None    # boolean valid-region mask, black=True
    n_black: int | None
    source_shape: tuple[int, int]


def monitor_image(bundle: CalibrationBundle, img: np.ndarray,
                  diag_always: bool = False,
                  n_d: int | None = None) -> MonitorReport:
    """Score one image against the bundle and, on alarm, diagnose it.

    n_d here only documents intent; the threshold is fixed at
    calibration time, so overriding n_d is not supported and raises.
    """
    if n_d is not None and n_d != bundle.n_d:
        raise ConfigMismatchError(
            "n_d is baked into the calibrated diagnostic threshold")
    img = np.asarray(img, dtype=np.float64)
    # the limit is a max over a fixed number of windows, so a different
    # image size would change the false alarm rate
    if img.shape != bundle.image_shape:
        raise ConfigMismatchError(
            f"bundle calibrated for {bundle.image_shape[0]}x"
            f"{bundle.image_shape[1]} images, got {img.shape[0]}x{img.shape[1]}")
    std = standardize(img)
    cfg = bundle.cfg
    if cfg.kind in ("ad", "bp"):
        res = residual_image(bundle.tree, std)
        sms = compute_sms(cfg, res=res, cdf=bundle.cdf)
    else:
        sms = compute_sms(cfg, std_img=std)
    hi, lo = chart_extremes(cfg, sms)
    if cfg.two_sided:
        s = max(hi - bundle.centerline, bundle.centerline - lo)
    else:
        s = hi
    alarmed = s > bundle.control_limit
    diag = None
    n_black = None
    if alarmed or diag_always:
        diag = diagnostic_image(sms, bundle)
        n_black = int(diag.sum())
    return MonitorReport(s_value=float(s), alarmed=bool(alarmed), sms=sms,
                         diagnostic=diag, n_black=n_black,
                         source_shape=img.shape)


def diagnostic_image(sms: SmsImage, bundle: CalibrationBundle) -> np.ndarray:
    """Boolean mask over the SMS valid region; True = flagged (black)."""
    if sms.statistic != bundle.cfg.kind or sms.w != bundle.cfg.w:
        raise ConfigMismatchError(
            f"bundle is for {bundle.cfg.kind} w={bundle.cfg.w}, "
            f"map is {sms.statistic} w={sms.w}")
    return sms.values > bundle.diag_threshold


def render_diagnostic(mask: np.ndarray, offset: tuple[int, int],
                      source_shape: tuple[int, int],
                      full_size: bool = True) -> np.ndarray:
    """uint8 render of a diagnostic mask (0 = flagged, 255 = clear).

    full_size pads the margins white and places the valid region at its
    source coordinates.
    """
    if full_size:
        out = np.full(source_shape, 255, dtype=np.uint8)
        r0, c0 = offset
        h, w = mask.shape
        out[r0:r0 + h, c0:c0 + w] = np.where(mask, 0, 255).astype(np.uint8)
        return out
    return np.where(mask, 0, 255).astype(np.uint8)


def save_diagnostic_png(mask, offset, source_shape, path,
                        full_size: bool = True) -> None:
    from PIL import Image
    arr = render_diagnostic(mask, offset, source_shape, full_size=full_size)
    img = Image.fromarray(arr, mode="L").convert("1", dither=Image.NONE)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())
