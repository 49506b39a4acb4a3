import math

import numpy as np
import pytest

from texspc.errors import WindowTooLargeError
from texspc.refcdf import ReferenceCdf, fit_reference_cdf
from texspc.sms import (SmsImage, ad_sms, ad_window_statistic, bp_sms,
                        epanechnikov, image_statistic, kernel_matrix, load_sms,
                        save_sms)
from texspc.tree import ResidualImage

from oracles import naive_ad_sms, naive_bp_sms


def _res(rng, rows=40, cols=40, l=1):
    vals = rng.normal(scale=0.5, size=(rows, cols))
    return ResidualImage(values=vals, l=l, source_shape=(rows + l, cols + 2 * l))


def _median_half_cdf():
    # empirical step puts mass {-3,-1,1,3}; phi(0) = 0.5, no clamping there
    return ReferenceCdf(
        sorted_residuals=np.array([-3.0, -1.0, 1.0, 3.0]),
        q_lower=0.25, q_upper=0.25, p=0.25,
        lambda_lower=1.0, lambda_upper=1.0,
        r_p=-3.0, r_1mp=3.0, r_ql=-3.0, r_1mqu=3.0)


def test_ad_single_point_window():
    # n = 1 at the median: -1 - (ln 1/2 + ln 1/2) = 2 ln 2 - 1
    cdf = _median_half_cdf()
    got = ad_window_statistic(np.array([0.0]), cdf)
    assert got == pytest.approx(2.0 * math.log(2.0) - 1.0, abs=1e-12)


def test_ad_lower_bound(rng):
    # each summand is nonpositive, so the statistic can never drop
    # below -n
    cdf = fit_reference_cdf(rng.normal(size=5000))
    for n in (1, 4, 25):
        win = rng.normal(scale=3.0, size=n)
        assert ad_window_statistic(win, cdf) >= -float(n)


def test_ad_window_order_invariance(rng):
    cdf = fit_reference_cdf(rng.normal(size=5000))
    win = rng.normal(size=25)
    a = ad_window_statistic(win, cdf)
    b = ad_window_statistic(win[::-1].copy(), cdf)
    assert a == b


def test_ad_matches_naive(rng):
    cdf = fit_reference_cdf(rng.normal(scale=0.5, size=8000))
    res = _res(rng, 18, 16)
    fast = ad_sms(res, cdf, 5)
    slow = naive_ad_sms(res.values, 5, cdf)
    assert fast.values.shape == slow.shape
    assert np.max(np.abs(fast.values - slow)) <= 1e-12


def test_ad_finite_with_wild_outlier(rng):
    cdf = fit_reference_cdf(rng.normal(scale=0.5, size=8000))
    res = _res(rng, 18, 16)
    res.values[9, 8] = -40.0
    vals = ad_sms(res, cdf, 5).values
    assert np.all(np.isfinite(vals))
    slow = naive_ad_sms(res.values, 5, cdf)
    assert np.max(np.abs(vals - slow)) <= 1e-9


def test_ad_geometry(rng):
    res = _res(rng, 30, 26, l=2)
    cdf = fit_reference_cdf(rng.normal(size=5000))
    sms = ad_sms(res, cdf, 7)
    assert sms.margin == 3
    assert sms.values.shape == (30 - 6, 26 - 6)
    # window centre maps back through the residual offset
    assert sms.offset == (2 + 3, 2 + 3)


def test_bp_matches_naive(rng):
    res = _res(rng, 40, 40)
    fast = bp_sms(res, 5)
    slow = naive_bp_sms(res.values, 5)
    assert fast.values.shape == slow.shape
    assert np.max(np.abs(fast.values - slow)) <= 1e-9


def test_bp_direct_equals_fft(rng):
    res = _res(rng, 50, 44)
    a = bp_sms(res, 7, method="direct").values
    b = bp_sms(res, 7, method="fft").values
    assert np.max(np.abs(a - b)) <= 1e-9


def test_bp_quartic_scaling(rng):
    # every covariance is quadratic in the residuals, so T scales as c^4
    res = _res(rng, 36, 36)
    base = bp_sms(res, 5).values
    scaled = bp_sms(ResidualImage(values=3.0 * res.values, l=1,
                                  source_shape=res.source_shape), 5).values
    assert np.allclose(scaled, 81.0 * base, rtol=1e-12)


def test_bp_sign_invariance(rng):
    res = _res(rng, 36, 36)
    base = bp_sms(res, 5).values
    flip = bp_sms(ResidualImage(values=-res.values, l=1,
                                source_shape=res.source_shape), 5).values
    assert np.array_equal(base, flip)


def test_bp_geometry(rng):
    res = _res(rng, 40, 36)
    sms = bp_sms(res, 5)
    assert sms.margin == 5
    assert sms.values.shape == (40 - 10, 36 - 10)
    assert sms.offset == (1 + 5, 1 + 5)


def test_kernel_identities():
    # exhaustive over the widest window used anywhere
    w = 25
    R = (w + 1) / 2.0
    assert epanechnikov(0, 0, w) == 0.75
    for h in range(-13, 14):
        for m in range(-13, 14):
            k = epanechnikov(h, m, w)
            assert k == epanechnikov(m, h, w)
            assert k == epanechnikov(-h, -m, w)
            if h * h + m * m >= R * R:
                assert k == 0.0
            else:
                assert k > 0.0


def test_kernel_matrix_shape():
    km = kernel_matrix(5)
    assert km.shape == (7, 7)
    assert km[3, 3] == 0.75
    # the outermost ring sits exactly on the support boundary
    assert np.all(km[0, :] == 0.0)
    assert np.all(km[:, 0] == 0.0)


def test_rejects_even_or_tiny_w(rng):
    res = _res(rng)
    cdf = fit_reference_cdf(rng.normal(size=5000))
    for w in (4, 2, 1, -3):
        with pytest.raises(ValueError):
            bp_sms(res, w)
        with pytest.raises(ValueError):
            ad_sms(res, cdf, w)


def test_window_too_large(rng):
    res = _res(rng, 12, 12)
    with pytest.raises(WindowTooLargeError):
        bp_sms(res, 7)  # needs > 2w per side
    cdf = fit_reference_cdf(rng.normal(size=5000))
    with pytest.raises(WindowTooLargeError):
        ad_sms(res, cdf, 13)


def test_save_load_round_trip(tmp_path, rng):
    sms = bp_sms(_res(rng), 5)
    path = tmp_path / "map.sms"
    save_sms(sms, path)
    back = load_sms(path)
    assert np.array_equal(back.values, sms.values)
    assert back.w == sms.w
    assert back.statistic == sms.statistic
    assert back.margin == sms.margin
    assert back.offset == sms.offset


def test_image_statistic_is_max(rng):
    sms = bp_sms(_res(rng), 5)
    assert image_statistic(sms) == sms.values.max()
