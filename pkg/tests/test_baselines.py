import numpy as np
import pytest

from texspc.baselines import epwma_sms, epwmv_sms
from texspc.errors import WindowTooLargeError

from oracles import naive_epwma, naive_epwmv


def test_epwma_constant_image():
    img = np.full((20, 20), 3.25)
    sms = epwma_sms(img, 5)
    assert np.allclose(sms.values, 3.25, atol=1e-12)


def test_epwma_linear_ramp():
    # symmetric weights reproduce the centre value of a linear ramp
    i = np.arange(24, dtype=np.float64)
    img = np.tile(i[:, None], (1, 24))
    sms = epwma_sms(img, 5)
    R = 3
    expect = np.tile(i[R:24 - R, None], (1, 24 - 2 * R))
    assert np.allclose(sms.values, expect, atol=1e-10)


def test_epwma_matches_naive(rng):
    img = rng.normal(size=(30, 28))
    sms = epwma_sms(img, 5)
    slow = naive_epwma(img, 5)
    assert sms.values.shape == slow.shape
    assert np.max(np.abs(sms.values - slow)) <= 1e-9


def test_epwmv_matches_naive_disk(rng):
    img = rng.normal(size=(30, 28))
    sms = epwmv_sms(img, 5, window_shape="disk")
    slow = naive_epwmv(img, 5, window_shape="disk")
    assert np.max(np.abs(sms.values - slow)) <= 1e-9


def test_epwmv_matches_naive_square(rng):
    img = rng.normal(size=(26, 30))
    sms = epwmv_sms(img, 5, window_shape="square")
    slow = naive_epwmv(img, 5, window_shape="square")
    assert np.max(np.abs(sms.values - slow)) <= 1e-9


def test_epwmv_constant_is_zero():
    img = np.full((20, 20), -1.5)
    sms = epwmv_sms(img, 5)
    assert np.allclose(sms.values, 0.0, atol=1e-12)
    assert np.all(sms.values >= 0.0)


def test_epwmv_quadratic_scaling(rng):
    img = rng.normal(size=(24, 24))
    base = epwmv_sms(img, 5).values
    scaled = epwmv_sms(4.0 * img, 5).values
    assert np.allclose(scaled, 16.0 * base, rtol=1e-9, atol=1e-12)


def test_baseline_geometry(rng):
    img = rng.normal(size=(30, 26))
    for sms in (epwma_sms(img, 5), epwmv_sms(img, 5)):
        assert sms.margin == 3
        assert sms.offset == (3, 3)
        assert sms.values.shape == (24, 20)


def test_baseline_window_too_large(rng):
    img = rng.normal(size=(10, 10))
    with pytest.raises(WindowTooLargeError):
        epwma_sms(img, 9)
    with pytest.raises(WindowTooLargeError):
        epwmv_sms(img, 9)


def test_epwmv_rejects_unknown_window_shape(rng):
    with pytest.raises(ValueError):
        epwmv_sms(rng.normal(size=(20, 20)), 5, window_shape="diamond")
