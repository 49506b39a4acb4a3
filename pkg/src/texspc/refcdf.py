"""Reference distribution of in-control residuals.

The empirical CDF of a large residual sample is a step function with
bounded support, so a goodness-of-fit statistic that takes logs of it
blows up as soon as a new residual lands outside the observed range.  To
keep every evaluation finite we splice exponentially decaying tails onto
the empirical CDF F:

    phi(r) = p * exp((r - r_p) / lambda_lower)            for r <= r_p
    phi(r) = F(r)                                         for r_p < r < r_{1-p}
    phi(r) = 1 - p * exp(-(r - r_{1-p}) / lambda_upper)   for r >= r_{1-p}

where r_p and r_{1-p} are the extreme p / 1-p quantiles of the sample and
the rates are maximum-likelihood fits of shifted exponentials to the
observations at or beyond the (less extreme) q_lower / q_upper quantiles:

    lambda_lower = r_{q_lower}  - mean{r : r <= r_{q_lower}}
    lambda_upper = mean{r : r >= r_{1-q_upper}} - r_{1-q_upper}

The patch quantile p is deliberately far smaller than the fitting
quantiles, so the exponential pieces only take over in the extreme tails
while being estimated from a few hundred observations each.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateTailError, InsufficientTailError
from .util import empirical_quantile

# Defaults, as fractions of the residual count M: the fitting quantiles
# target ~400 observations per tail and the patch point sits at the 5th
# most extreme observation.
TAIL_FIT_COUNT = 400.0
PATCH_COUNT = 5.0


@dataclass(frozen=True)
class ReferenceCdf:
    sorted_residuals: np.ndarray
    q_lower: float
    q_upper: float
    p: float
    lambda_lower: float
    lambda_upper: float
    r_p: float
    r_1mp: float
    r_ql: float
    r_1mqu: float

    @property
    def count(self) -> int:
        return len(self.sorted_residuals)

    def eval(self, r):
        """phi(r): strictly inside (0, 1) for every finite r.

        Vectorized; a scalar argument returns a float.  The middle branch
        is the empirical CDF clamped to [p, 1-p]; the clamp is a no-op
        under the quantile convention but guards duplicated boundary
        values.  Far out in the tails the exponential terms underflow,
        so the result is pinned one ulp inside (0, 1) to keep the
        strict-inequality contract in float arithmetic.
        """
        scalar = np.isscalar(r) or np.ndim(r) == 0
        rr = np.atleast_1d(np.asarray(r, dtype=np.float64))
        n = self.count
        frac = np.searchsorted(self.sorted_residuals, rr, side="right") / n
        out = np.clip(frac, self.p, 1.0 - self.p)
        lower = rr <= self.r_p
        upper = rr >= self.r_1mp
        if np.any(lower):
            out[lower] = self.p * np.exp((rr[lower] - self.r_p) / self.lambda_lower)
        if np.any(upper):
            out[upper] = 1.0 - self.p * np.exp(-(rr[upper] - self.r_1mp) / self.lambda_upper)
        np.clip(out, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0), out=out)
        return float(out[0]) if scalar else out.reshape(np.shape(r))

    def log_eval(self, r):
        """ln phi(r), branch-wise so it stays finite for any finite r.

        eval itself saturates in float arithmetic once an exponential
        tail term drops below 1 ulp; the log of the lower tail is just
        ln(p) + (r - r_p) / lambda, which never underflows, and the
        upper tail goes through log1p.  This is what keeps the windowed
        Anderson-Darling statistic finite on wildly out-of-distribution
        residuals.
        """
        scalar = np.isscalar(r) or np.ndim(r) == 0
        rr = np.atleast_1d(np.asarray(r, dtype=np.float64))
        n = self.count
        frac = np.searchsorted(self.sorted_residuals, rr, side="right") / n
        out = np.log(np.clip(frac, self.p, 1.0 - self.p))
        lower = rr <= self.r_p
        upper = rr >= self.r_1mp
        if np.any(lower):
            out[lower] = np.log(self.p) + (rr[lower] - self.r_p) / self.lambda_lower
        if np.any(upper):
            out[upper] = np.log1p(
                -self.p * np.exp(-(rr[upper] - self.r_1mp) / self.lambda_upper))
        return float(out[0]) if scalar else out.reshape(np.shape(r))

    def log_sf(self, r):
        """ln(1 - phi(r)), the survival-function mirror of log_eval."""
        scalar = np.isscalar(r) or np.ndim(r) == 0
        rr = np.atleast_1d(np.asarray(r, dtype=np.float64))
        n = self.count
        frac = np.searchsorted(self.sorted_residuals, rr, side="right") / n
        out = np.log1p(-np.clip(frac, self.p, 1.0 - self.p))
        lower = rr <= self.r_p
        upper = rr >= self.r_1mp
        if np.any(lower):
            out[lower] = np.log1p(
                -self.p * np.exp((rr[lower] - self.r_p) / self.lambda_lower))
        if np.any(upper):
            out[upper] = np.log(self.p) - (rr[upper] - self.r_1mp) / self.lambda_upper
        return float(out[0]) if scalar else out.reshape(np.shape(r))

    def to_bytes(self) -> bytes:
        header = {
            "format": 1,
            "q_lower": self.q_lower,
            "q_upper": self.q_upper,
            "p": self.p,
            "lambda_lower": self.lambda_lower,
            "lambda_upper": self.lambda_upper,
            "r_p": self.r_p,
            "r_1mp": self.r_1mp,
            "r_ql": self.r_ql,
            "r_1mqu": self.r_1mqu,
            "count": self.count,
        }
        hb = json.dumps(header, sort_keys=True).encode("utf-8")
        body = np.ascontiguousarray(self.sorted_residuals, dtype="<f8").tobytes()
        return b"TXSPCCDF" + struct.pack("<I", len(hb)) + hb + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "ReferenceCdf":
        if data[:8] != b"TXSPCCDF":
            raise ValueError("not a reference-cdf block")
        (hlen,) = struct.unpack("<I", data[8:12])
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
        body = np.frombuffer(data[12 + hlen:], dtype="<f8")
        if len(body) != header["count"]:
            raise ValueError("reference-cdf block truncated")
        return cls(
            sorted_residuals=body.astype(np.float64),
            q_lower=header["q_lower"],
            q_upper=header["q_upper"],
            p=header["p"],
            lambda_lower=header["lambda_lower"],
            lambda_upper=header["lambda_upper"],
            r_p=header["r_p"],
            r_1mp=header["r_1mp"],
            r_ql=header["r_ql"],
            r_1mqu=header["r_1mqu"],
        )


def fit_reference_cdf(residuals: np.ndarray,
                      q_lower: float | None = None,
                      q_upper: float | None = None,
                      p: float | None = None) -> ReferenceCdf:
    """Fit the tail-patched reference CDF to a residual sample.

    q_lower/q_upper default to ~400/M (tail-fitting sample of about 400
    observations each); p defaults to 5/M.  Requires p <= min(q_lower,
    q_upper) and at least one observation in each fitting tail.
    """
    r = np.sort(np.asarray(residuals, dtype=np.float64).ravel())
    m = len(r)
    if m < 2:
        raise InsufficientTailError("need at least 2 residuals to fit a reference cdf")
    if q_lower is None:
        q_lower = min(TAIL_FIT_COUNT / m, 0.25)
    if q_upper is None:
        q_upper = min(TAIL_FIT_COUNT / m, 0.25)
    if p is None:
        p = min(PATCH_COUNT / m, q_lower, q_upper)
    if not (0.0 < p <= min(q_lower, q_upper)):
        raise ValueError(
            f"patch probability p={p} must be in (0, min(q_lower, q_upper)]"
        )
    if q_lower >= 0.5 or q_upper >= 0.5:
        raise ValueError("tail-fitting probabilities must be < 0.5")
    if m * min(q_lower, q_upper) < 1.0:
        raise InsufficientTailError(
            f"{m} residuals leave an empty tail at q={min(q_lower, q_upper)}"
        )

    r_ql = empirical_quantile(r, q_lower)
    r_1mqu = empirical_quantile(r, 1.0 - q_upper)
    r_p = empirical_quantile(r, p)
    r_1mp = empirical_quantile(r, 1.0 - p)

    lower_tail = r[r <= r_ql]
    upper_tail = r[r >= r_1mqu]
    lam_l = r_ql - lower_tail.mean()
    lam_u = upper_tail.mean() - r_1mqu
    if lam_l <= 0.0:
        raise DegenerateTailError("lower tail observations are identical; rate is zero")
    if lam_u <= 0.0:
        raise DegenerateTailError("upper tail observations are identical; rate is zero")
    if not r_p < r_1mp:
        raise DegenerateTailError("patch quantiles coincide; residual sample is degenerate")

    return ReferenceCdf(
        sorted_residuals=r,
        q_lower=float(q_lower),
        q_upper=float(q_upper),
        p=float(p),
        lambda_lower=float(lam_l),
        lambda_upper=float(lam_u),
        r_p=float(r_p),
        r_1mp=float(r_1mp),
        r_ql=float(r_ql),
        r_1mqu=float(r_1mqu),
    )
