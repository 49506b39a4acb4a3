"""Regression-tree model of the conditional pixel mean, plus
cross-validated neighborhood selection and residual images.

The tree is plain greedy CART with variance-reduction (SSE) splitting.
Split search is histogram-based: each predictor is pre-binned into at
most 256 bins whose boundaries are actual data values, and candidate
thresholds are midpoints between consecutive distinct values (all of
them when a predictor has <= 256 distinct values, otherwise the 255
empirical-quantile midpoints).  Because every boundary is a data value
and thresholds sit strictly between distinct values, the binned search
is exact for its candidate set, and a fit is deterministic: ties in SSE
gain resolve to the lowest predictor index, then the lowest threshold.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DataError,
    DimensionMismatchError,
    ImageTooSmallError,
)
from .image import TrainingMatrix, build_training_matrix, interior_shape
from .util import array_digest

# Histogram split search: 255 empirical quantile cuts cover the bulk of
# each predictor; an extra 24 value-spaced cuts per tail keep resolution
# in the distribution extremes, where quantile cuts alone lump everything
# beyond the outer 1/256 quantile into one bin.  That lumping makes the
# tree saturate on rare deep excursions of the field and leaves large
# spatially correlated residual patches there.
_QUANT_BINS = 256
_TAIL_CUTS = 24
_MAX_BINS = _QUANT_BINS + 2 * _TAIL_CUTS
_LEAF = -1


@dataclass(frozen=True)
class FitConfig:
    min_leaf_size: int = 30
    max_depth: int = 20
    # Absolute SSE decrease a split must achieve; None means
    # 1e-7 * total SSE of the data being fit.
    min_split_improvement: float | None = None
    cv_folds: int = 5
    l_candidates: tuple[int, ...] = tuple(range(1, 21))
    # Relative tolerance for treating candidate CV errors as tied during
    # neighborhood selection (0.0 = exact minimum wins).
    cv_tie_tol: float = 0.0

    def __post_init__(self):
        if self.min_leaf_size < 1:
            raise ValueError("min_leaf_size must be >= 1")
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be >= 2")

    def to_dict(self) -> dict:
        return {
            "min_leaf_size": self.min_leaf_size,
            "max_depth": self.max_depth,
            "min_split_improvement": self.min_split_improvement,
            "cv_folds": self.cv_folds,
            "l_candidates": list(self.l_candidates),
            "cv_tie_tol": self.cv_tie_tol,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        return cls(
            min_leaf_size=d["min_leaf_size"],
            max_depth=d["max_depth"],
            min_split_improvement=d["min_split_improvement"],
            cv_folds=d["cv_folds"],
            l_candidates=tuple(d["l_candidates"]),
            cv_tie_tol=d.get("cv_tie_tol", 0.0),
        )


@dataclass
class RegressionTree:
    """Flat node-table representation of a fitted CART.

    feature[i] == -1 marks a leaf; value[i] is then the mean response of
    the training rows routed to that leaf and count[i] their number.
    Internal nodes route x to left[i] iff x[feature[i]] <= threshold[i].
    """

    feature: np.ndarray      # int32, -1 for leaves
    threshold: np.ndarray    # float64, 0.0 for leaves
    left: np.ndarray         # int32, -1 for leaves
    right: np.ndarray        # int32, -1 for leaves
    value: np.ndarray        # float64, leaf prediction (0.0 internal)
    count: np.ndarray        # int64, training rows through the node
    n_predictors: int
    l: int

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature == _LEAF))

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row of X."""
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        if X.shape[1] != self.n_predictors:
            raise DimensionMismatchError(
                f"expected {self.n_predictors} predictors, got {X.shape[1]}"
            )
        node = np.zeros(X.shape[0], dtype=np.int32)
        while True:
            feat = self.feature[node]
            active = feat != _LEAF
            if not active.any():
                break
            idx = np.nonzero(active)[0]
            f = feat[idx]
            go_left = X[idx, f] <= self.threshold[node[idx]]
            node[idx] = np.where(go_left, self.left[node[idx]], self.right[node[idx]])
        return node[0:1] if single else node

    def predict(self, X: np.ndarray):
        """Conditional-mean prediction; float for a single vector."""
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        leaves = self.apply(X)
        out = self.value[leaves]
        return float(out[0]) if single else out

    def to_bytes(self, meta: dict | None = None) -> bytes:
        header = {"format": 1, "n_nodes": self.n_nodes,
                  "n_predictors": self.n_predictors, "l": self.l}
        if meta:
            header.update(meta)
        hb = json.dumps(header, sort_keys=True).encode("utf-8")
        parts = [b"TXSPCTRE", struct.pack("<I", len(hb)), hb]
        parts.append(np.ascontiguousarray(self.feature, dtype="<i4").tobytes())
        parts.append(np.ascontiguousarray(self.threshold, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(self.left, dtype="<i4").tobytes())
        parts.append(np.ascontiguousarray(self.right, dtype="<i4").tobytes())
        parts.append(np.ascontiguousarray(self.value, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(self.count, dtype="<i8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> tuple["RegressionTree", dict]:
        if data[:8] != b"TXSPCTRE":
            raise ValueError("not a tree model file")
        (hlen,) = struct.unpack("<I", data[8:12])
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
        n = header["n_nodes"]
        off = 12 + hlen
        def take(dtype, size):
            nonlocal off
            arr = np.frombuffer(data[off:off + size * n], dtype=dtype)
            if len(arr) != n:
                raise ValueError("tree model file truncated")
            off += size * n
            return arr
        tree = cls(
            feature=take("<i4", 4).astype(np.int32),
            threshold=take("<f8", 8).astype(np.float64),
            left=take("<i4", 4).astype(np.int32),
            right=take("<i4", 4).astype(np.int32),
            value=take("<f8", 8).astype(np.float64),
            count=take("<i8", 8).astype(np.int64),
            n_predictors=header["n_predictors"],
            l=header["l"],
        )
        return tree, header


def save_tree(tree: RegressionTree, path, cfg: FitConfig | None = None,
              seed: int | None = None, training_digest: str | None = None) -> None:
    from .util import atomic_write_bytes
    meta = {"fit_config": cfg.to_dict() if cfg else None,
            "seed": seed, "training_digest": training_digest}
    atomic_write_bytes(path, tree.to_bytes(meta))


def load_tree(path) -> tuple[RegressionTree, dict]:
    with open(path, "rb") as f:
        return RegressionTree.from_bytes(f.read())


def _bin_predictor(col: np.ndarray):
    """Bin one predictor column.

    Returns (codes, thresholds): codes[i] <= b exactly when
    col[i] <= boundary value b, and thresholds[b] is the midpoint between
    boundary b and the next distinct data value, so splitting the binned
    codes at b is identical to splitting the raw values at thresholds[b].
    """
    svals = np.sort(col)
    n = len(svals)
    distinct_mask = np.empty(n, dtype=bool)
    distinct_mask[0] = True
    np.not_equal(svals[1:], svals[:-1], out=distinct_mask[1:])
    uniq = svals[distinct_mask]
    if len(uniq) <= _MAX_BINS:
        boundaries = uniq[:-1]
        thresholds = 0.5 * (uniq[:-1] + uniq[1:])
    else:
        # 255 interior empirical quantiles (project convention: 1-based
        # index ceil(q*n)); computed in integer arithmetic so the index
        # is exact.
        i = np.arange(1, _QUANT_BINS)
        idx = (i * n + _QUANT_BINS - 1) // _QUANT_BINS - 1
        edge_vals = svals[idx]
        # value-spaced tail cuts between the data extremes and the outer
        # quantile cuts, snapped down to actual data values
        lo = np.linspace(uniq[0], edge_vals[0], _TAIL_CUTS + 2)[1:-1]
        hi = np.linspace(edge_vals[-1], uniq[-1], _TAIL_CUTS + 2)[1:-1]
        cuts = np.concatenate([lo, hi])
        snapped = uniq[np.searchsorted(uniq, cuts, side="right") - 1]
        boundaries = np.unique(np.concatenate([edge_vals, snapped]))
        boundaries = boundaries[boundaries < svals[-1]]
        nxt = svals[np.searchsorted(svals, boundaries, side="right")]
        thresholds = 0.5 * (boundaries + nxt)
    codes = np.searchsorted(boundaries, col, side="left").astype(np.uint16)
    return codes, thresholds


def _best_split_for_node(codes_sub, y_sub, thresholds, bin_mask, min_leaf, offs):
    """Exhaustive gain search over all (predictor, bin boundary) pairs.

    Gain is the SSE decrease of the split: sumL^2/nL + sumR^2/nR -
    sum^2/n (the constant sum of y^2 cancels).  All predictors are
    histogrammed in one combined-key bincount (chunked so temporaries
    stay bounded); the flat argmax over predictor-major gains makes ties
    resolve to the lowest predictor index, then the lowest threshold.
    """
    n, p = codes_sub.shape
    counts = np.zeros(p * _MAX_BINS, dtype=np.int64)
    sums = np.zeros(p * _MAX_BINS, dtype=np.float64)
    chunk = max(256, (1 << 22) // p)
    for s0 in range(0, n, chunk):
        sub = codes_sub[s0:s0 + chunk]
        keys = (sub.astype(np.int32) + offs).ravel()
        counts += np.bincount(keys, minlength=p * _MAX_BINS)
        sums += np.bincount(keys, weights=np.repeat(y_sub[s0:s0 + chunk], p),
                            minlength=p * _MAX_BINS)
    counts = counts.reshape(p, _MAX_BINS)
    sums = sums.reshape(p, _MAX_BINS)

    total_sum = float(y_sub.sum())
    base = total_sum * total_sum / n
    n_l = np.cumsum(counts[:, :_MAX_BINS - 1], axis=1)
    s_l = np.cumsum(sums[:, :_MAX_BINS - 1], axis=1)
    n_r = n - n_l
    ok = (n_l >= min_leaf) & (n_r >= min_leaf) & bin_mask
    if not ok.any():
        return -np.inf, -1, 0.0, None
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = s_l * s_l / n_l + (total_sum - s_l) ** 2 / n_r - base
    gain[~ok] = -np.inf
    flat = int(np.argmax(gain))
    j, b = divmod(flat, _MAX_BINS - 1)
    g = float(gain[j, b])
    if not np.isfinite(g):
        return -np.inf, -1, 0.0, None
    return g, j, float(thresholds[j][b]), b


def fit_tree(data: TrainingMatrix, cfg: FitConfig = FitConfig()) -> RegressionTree:
    """Fit a CART to the training matrix.

    Recursion stops at max_depth, when a node has fewer than
    2*min_leaf_size rows, or when the best split improves SSE by less
    than min_split_improvement.  Constant responses yield a valid
    single-leaf tree.
    """
    y = np.ascontiguousarray(data.response, dtype=np.float64)
    X = data.predictors
    n, p = X.shape
    if n < 1:
        raise DataError("cannot fit a tree to an empty training matrix")

    total_sse = float(np.sum((y - y.mean()) ** 2))
    min_gain = cfg.min_split_improvement
    if min_gain is None:
        min_gain = 1e-7 * total_sse

    codes = np.empty((n, p), dtype=np.uint16)
    thresholds = []
    n_bins = np.empty(p, dtype=np.int64)
    for j in range(p):
        codes[:, j], thr = _bin_predictor(np.ascontiguousarray(X[:, j]))
        thresholds.append(thr)
        n_bins[j] = len(thr) + 1
    # boundary bin b splits codes <= b; only b < n_bins - 1 is a real cut
    bin_mask = np.arange(_MAX_BINS - 1)[None, :] < (n_bins[:, None] - 1)
    offs = (np.arange(p, dtype=np.int32) * _MAX_BINS)[None, :]

    feature, thresh, left, right, value, count = [], [], [], [], [], []

    def new_node():
        feature.append(_LEAF)
        thresh.append(0.0)
        left.append(_LEAF)
        right.append(_LEAF)
        value.append(0.0)
        count.append(0)
        return len(feature) - 1

    root = new_node()
    # DFS with an explicit stack; left child processed first so node ids
    # follow preorder (deterministic layout for serialization).
    stack = [(root, np.arange(n, dtype=np.int64), 0)]
    while stack:
        node_id, rows, depth = stack.pop()
        y_sub = y[rows]
        count[node_id] = len(rows)
        make_leaf = (
            depth >= cfg.max_depth
            or len(rows) < 2 * cfg.min_leaf_size
            # a pure node cannot improve, whatever min_gain says
            or y_sub.min() == y_sub.max()
        )
        if not make_leaf:
            codes_sub = codes[rows]
            gain, j, t, b = _best_split_for_node(
                codes_sub, y_sub, thresholds, bin_mask, cfg.min_leaf_size, offs
            )
            if j < 0 or gain < min_gain:
                make_leaf = True
        if make_leaf:
            value[node_id] = float(y_sub.mean())
            continue
        go_left = codes_sub[:, j] <= b
        left_id = new_node()
        right_id = new_node()
        feature[node_id] = j
        thresh[node_id] = t
        left[node_id] = left_id
        right[node_id] = right_id
        # push right first so the left subtree is laid out next
        stack.append((right_id, rows[~go_left], depth + 1))
        stack.append((left_id, rows[go_left], depth + 1))

    return RegressionTree(
        feature=np.array(feature, dtype=np.int32),
        threshold=np.array(thresh, dtype=np.float64),
        left=np.array(left, dtype=np.int32),
        right=np.array(right, dtype=np.int32),
        value=np.array(value, dtype=np.float64),
        count=np.array(count, dtype=np.int64),
        n_predictors=p,
        l=data.l,
    )


@dataclass(frozen=True)
class CvEntry:
    l: int
    cv_mse: float            # held-out SSE per row (comparable across l)
    cv_sse: float            # total held-out SSE
    n_rows: int
    skipped: bool = False
    message: str = ""


@dataclass(frozen=True)
class CvReport:
    chosen_l: int
    seed: int
    entries: tuple[CvEntry, ...] = field(default_factory=tuple)


def cross_validate(data: TrainingMatrix, cfg: FitConfig, rng: np.random.Generator):
    """k-fold CV of fit_tree on the matrix; returns total held-out SSE.

    Fold assignment is a seeded shuffle of the row indices split into
    cv_folds contiguous chunks.
    """
    n = data.n_rows
    perm = rng.permutation(n)
    folds = np.array_split(perm, cfg.cv_folds)
    sse = 0.0
    for k in range(cfg.cv_folds):
        test_idx = folds[k]
        train_idx = np.concatenate([folds[i] for i in range(cfg.cv_folds) if i != k])
        sub = TrainingMatrix(
            response=data.response[train_idx],
            predictors=np.ascontiguousarray(data.predictors[train_idx]),
            l=data.l,
            source_shape=data.source_shape,
        )
        tree = fit_tree(sub, cfg)
        pred = tree.predict(data.predictors[test_idx])
        sse += float(np.sum((data.response[test_idx] - pred) ** 2))
    return sse


def select_neighborhood(img: np.ndarray, cfg: FitConfig = FitConfig(),
                        seed: int = 0) -> tuple[int, CvReport]:
    """Choose the neighborhood half-width by k-fold cross-validation.

    Scores each candidate l by mean held-out squared error (per-row, so
    candidates with different interior sizes are comparable) and returns
    the smallest l whose error is within cv_tie_tol (relative) of the
    minimum.  Candidates too large for the image are skipped with a
    warning; it is an error only if every candidate is skipped.
    """
    if not cfg.l_candidates:
        raise ValueError("l_candidates must be non-empty")
    entries = []
    for l in sorted(set(cfg.l_candidates)):
        try:
            data = build_training_matrix(img, l)
        except ImageTooSmallError as e:
            warnings.warn(f"skipping l={l}: {e}")
            entries.append(CvEntry(l=l, cv_mse=np.inf, cv_sse=np.inf, n_rows=0,
                                   skipped=True, message=str(e)))
            continue
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(l,)))
        sse = cross_validate(data, cfg, rng)
        entries.append(CvEntry(l=l, cv_mse=sse / data.n_rows, cv_sse=sse,
                               n_rows=data.n_rows))
    usable = [e for e in entries if not e.skipped]
    if not usable:
        raise ImageTooSmallError("image too small for every candidate l")
    best = min(e.cv_mse for e in usable)
    chosen = next(e.l for e in usable if e.cv_mse <= best * (1.0 + cfg.cv_tie_tol))
    return chosen, CvReport(chosen_l=chosen, seed=seed, entries=tuple(entries))


@dataclass(frozen=True)
class ResidualImage:
    """Residuals (pixel minus predicted conditional mean) on the interior.

    values[r, c] belongs to source pixel (r + l, c + l); the interior is
    (rows - l) x (cols - 2l) of the source image.
    """

    values: np.ndarray
    l: int
    source_shape: tuple[int, int]

    @property
    def offset_row(self) -> int:
        return self.l

    @property
    def offset_col(self) -> int:
        return self.l


def residual_image(tree: RegressionTree, img: np.ndarray) -> ResidualImage:
    """Residuals of a (standardized) image under the fitted tree.

    Works in blocks of interior rows to bound memory for large l.
    """
    img = np.asarray(img, dtype=np.float64)
    rows, cols = img.shape
    l = tree.l
    ih, iw = interior_shape(rows, cols, l)
    if ih < 1 or iw < 1:
        raise ImageTooSmallError(f"{rows}x{cols} image too small for model with l={l}")
    out = np.empty((ih, iw), dtype=np.float64)
    p = tree.n_predictors
    block = max(1, int(4e6 // max(iw * p, 1)))
    for r0 in range(0, ih, block):
        r1 = min(r0 + block, ih)
        # source rows [r0, r1 + l) cover every neighborhood in the block
        sub = build_training_matrix(img[r0:r1 + l, :], l)
        pred = tree.predict(sub.predictors)
        out[r0:r1] = (sub.response - pred).reshape(r1 - r0, iw)
    return ResidualImage(values=out, l=l, source_shape=(rows, cols))


def training_digest(img: np.ndarray) -> str:
    return array_digest(img)
