import numpy as np
import pytest

from texspc.errors import (ConfigMismatchError, DimensionMismatchError,
                           InsufficientPhaseIError)
from texspc.image import build_training_matrix, standardize
from texspc.monitor import (calibrate, diagnostic_image, load_bundle,
                            monitor_image, render_diagnostic,
                            save_bundle, save_diagnostic_png)
from texspc.simulate import DefectSpec, SarParams, generate_sar, inject_defect
from texspc.sms import SmsConfig
from texspc.tree import FitConfig, fit_tree


@pytest.fixture(scope="module")
def pipeline():
    rng = np.random.default_rng(811)
    par = SarParams()
    train = standardize(generate_sar(200, 200, par, rng))
    tree = fit_tree(build_training_matrix(train, 1), FitConfig())
    phase1 = [generate_sar(80, 80, par, rng) for _ in range(40)]
    bundle = calibrate(phase1, SmsConfig(kind="bp", w=5), alpha=0.02,
                       n_d=10, tree=tree)
    return par, tree, phase1, bundle


def test_phase1_stats_sorted_and_limit(pipeline):
    _par, _tree, phase1, bundle = pipeline
    s = bundle.phase1_stats
    assert len(s) == len(phase1)
    assert np.all(np.diff(s) >= 0.0)
    # ceil(0.98 * 40) = 40: the limit is the sample maximum, so no
    # Phase I statistic exceeds it
    assert bundle.control_limit == s[-1]
    assert np.sum(s > bundle.control_limit) == 0


def test_quantile_consistency_on_rescore(pipeline):
    _par, _tree, phase1, bundle = pipeline
    for img in phase1[:5]:
        rep = monitor_image(bundle, img)
        assert not rep.alarmed
    # re-scored Phase I values reproduce the calibration stats exactly
    got = sorted(monitor_image(bundle, img).s_value for img in phase1)
    assert np.allclose(got, bundle.phase1_stats, rtol=0, atol=0)


def test_exceedance_rule(pipeline):
    par, tree, phase1, _ = pipeline
    bundle = calibrate(phase1, SmsConfig(kind="bp", w=5), alpha=0.02,
                       n_d=10, tree=tree, cl_exceedances=2)
    assert np.sum(bundle.phase1_stats > bundle.control_limit) <= 2
    assert bundle.cl_rule == "exceedances:2"


def test_bundle_round_trip_bit_exact(tmp_path, pipeline):
    _par, _tree, phase1, bundle = pipeline
    path = tmp_path / "chart.bundle"
    save_bundle(bundle, path)
    back = load_bundle(path)
    assert back.control_limit == bundle.control_limit
    assert back.diag_threshold == bundle.diag_threshold
    assert np.array_equal(back.phase1_stats, bundle.phase1_stats)
    a = monitor_image(bundle, phase1[3])
    b = monitor_image(back, phase1[3])
    assert a.s_value == b.s_value
    assert np.array_equal(a.sms.values, b.sms.values)


def test_save_is_deterministic(tmp_path, pipeline):
    _par, _tree, _phase1, bundle = pipeline
    p1, p2 = tmp_path / "a.bundle", tmp_path / "b.bundle"
    save_bundle(bundle, p1)
    save_bundle(bundle, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_defect_alarms_and_diagnoses(pipeline):
    par, _tree, _phase1, bundle = pipeline
    rng = np.random.default_rng(4242)
    field = generate_sar(80, 80, par, rng)
    big, mask = inject_defect(field, DefectSpec(kind="black_square",
                                                size=(15, 15)), rng)
    rep = monitor_image(bundle, big)
    assert rep.alarmed
    assert rep.diagnostic is not None
    assert rep.n_black == rep.diagnostic.sum() > 0


def test_diag_threshold_targets_nd(pipeline):
    par, _tree, _phase1, bundle = pipeline
    rng = np.random.default_rng(5)
    counts = []
    for _ in range(30):
        img = generate_sar(80, 80, par, rng)
        rep = monitor_image(bundle, img, diag_always=True)
        counts.append(rep.n_black)
    mean = np.mean(counts)
    # exceedance counts are overdispersed (overlapping windows), so the
    # band around the n_d = 10 target is wide
    assert 3.0 <= mean <= 20.0


def test_diagnostic_monotone_in_sms(pipeline):
    _par, _tree, phase1, bundle = pipeline
    rep = monitor_image(bundle, phase1[0], diag_always=True)
    sms = rep.sms
    bumped = type(sms)(values=sms.values + 0.5, w=sms.w,
                       statistic=sms.statistic, margin=sms.margin,
                       offset=sms.offset)
    base = diagnostic_image(sms, bundle)
    more = diagnostic_image(bumped, bundle)
    assert np.all(more[base])  # flipping on never flips off


def test_config_mismatch_rejected(pipeline):
    _par, _tree, phase1, bundle = pipeline
    rep = monitor_image(bundle, phase1[0], diag_always=True)
    wrong = type(rep.sms)(values=rep.sms.values, w=15,
                          statistic="bp", margin=rep.sms.margin,
                          offset=rep.sms.offset)
    with pytest.raises(ConfigMismatchError):
        diagnostic_image(wrong, bundle)
    with pytest.raises(ConfigMismatchError):
        monitor_image(bundle, phase1[0], n_d=5)
    with pytest.raises(ConfigMismatchError):
        monitor_image(bundle, phase1[0][:64, :])


def test_mixed_phase1_sizes_rejected(pipeline):
    par, tree, _phase1, _bundle = pipeline
    rng = np.random.default_rng(6)
    imgs = [generate_sar(80, 80, par, rng), generate_sar(64, 80, par, rng)]
    with pytest.raises(DimensionMismatchError):
        calibrate(imgs, SmsConfig(kind="bp", w=5), tree=tree)


def test_empty_phase1_rejected(pipeline):
    _par, tree, _phase1, _bundle = pipeline
    with pytest.raises(InsufficientPhaseIError):
        calibrate([], SmsConfig(kind="bp", w=5), tree=tree)


def test_render_full_size_places_valid_region(pipeline):
    _par, _tree, phase1, bundle = pipeline
    rep = monitor_image(bundle, phase1[0], diag_always=True)
    mask = rep.diagnostic
    out = render_diagnostic(mask, rep.sms.offset, rep.source_shape)
    assert out.shape == rep.source_shape
    r0, c0 = rep.sms.offset
    h, w = mask.shape
    assert np.all(out[:r0, :] == 255)  # margins render white
    inner = out[r0:r0 + h, c0:c0 + w]
    assert np.array_equal(inner == 0, mask)


def test_diag_png_round_trip(tmp_path, pipeline):
    from PIL import Image
    _par, _tree, phase1, bundle = pipeline
    rep = monitor_image(bundle, phase1[0], diag_always=True)
    path = tmp_path / "diag.png"
    save_diagnostic_png(rep.diagnostic, rep.sms.offset, rep.source_shape, path)
    img = Image.open(path)
    assert img.mode == "1"
    arr = np.asarray(img.convert("L"))
    want = render_diagnostic(rep.diagnostic, rep.sms.offset, rep.source_shape)
    assert np.array_equal(arr, want)


def test_baseline_chart_two_sided(pipeline):
    par, _tree, phase1, _bundle = pipeline
    bundle = calibrate(phase1, SmsConfig(kind="epwma", w=5), alpha=0.02,
                       n_d=10)
    assert bundle.centerline is not None
    assert bundle.lcl < bundle.centerline < bundle.ucl
    rep = monitor_image(bundle, phase1[0])
    assert not rep.alarmed
    assert np.sum(bundle.phase1_stats > bundle.control_limit) == 0
