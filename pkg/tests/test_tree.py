import numpy as np
import pytest

from texspc.errors import ImageTooSmallError
from texspc.image import TrainingMatrix, build_training_matrix
from texspc.tree import (FitConfig, ResidualImage, cross_validate, fit_tree,
                         load_tree, residual_image, save_tree,
                         select_neighborhood)

from oracles import brute_force_split


def _matrix(rng, n=400, p=4, sd=1.0):
    x = rng.normal(size=(n, p))
    y = x @ np.array([0.5, -0.2, 0.0, 0.3][:p]) + sd * rng.normal(size=n)
    return TrainingMatrix(response=y, predictors=x, l=1, source_shape=(0, 0))


def test_constant_response_single_leaf(rng):
    x = rng.normal(size=(100, 4))
    tm = TrainingMatrix(response=np.full(100, 7.5), predictors=x, l=1,
                        source_shape=(0, 0))
    tree = fit_tree(tm, FitConfig())
    assert tree.n_leaves == 1
    assert tree.predict(rng.normal(size=(5, 4))) == pytest.approx(7.5)


def test_binary_predictor_perfect_split():
    x = np.array([[0.0]] * 6 + [[1.0]] * 6)
    y = 10.0 * x[:, 0]
    tm = TrainingMatrix(response=y, predictors=x, l=1, source_shape=(0, 0))
    tree = fit_tree(tm, FitConfig(min_leaf_size=1))
    assert tree.n_leaves == 2
    assert 0.0 < tree.threshold[0] < 1.0
    assert tree.predict(np.array([[0.0]]))[0] == pytest.approx(0.0)
    assert tree.predict(np.array([[1.0]]))[0] == pytest.approx(10.0)


def test_root_split_matches_brute_force(rng):
    # 50 rows keeps every predictor below the binning cutoff, so the
    # fast path must agree with trying every midpoint
    x = rng.normal(size=(50, 3))
    y = rng.normal(size=50)
    tm = TrainingMatrix(response=y, predictors=x, l=1, source_shape=(0, 0))
    tree = fit_tree(tm, FitConfig(min_leaf_size=5, max_depth=1,
                                  min_split_improvement=0.0))
    _gain, feat, thr = brute_force_split(x, y, 5)
    assert tree.feature[0] == feat
    assert tree.threshold[0] == pytest.approx(thr, abs=1e-12)


def test_leaf_means_replay(rng):
    tm = _matrix(rng, n=600)
    tree = fit_tree(tm, FitConfig(min_leaf_size=20))
    leaves = tree.apply(tm.predictors)
    for leaf in np.unique(leaves):
        got = tree.value[leaf]
        want = tm.response[leaves == leaf].mean()
        assert got == pytest.approx(want, abs=1e-9)
        assert tree.count[leaf] == np.sum(leaves == leaf)


def test_predictions_bounded_by_response_range(rng):
    tm = _matrix(rng, n=500)
    tree = fit_tree(tm, FitConfig())
    pred = tree.predict(rng.normal(scale=10.0, size=(200, 4)))
    assert pred.min() >= tm.response.min()
    assert pred.max() <= tm.response.max()


def test_training_sse_beats_root_baseline(rng):
    tm = _matrix(rng, n=800, sd=0.3)
    tree = fit_tree(tm, FitConfig(min_leaf_size=10))
    pred = tree.predict(tm.predictors)
    sse = np.sum((tm.response - pred) ** 2)
    root = np.sum((tm.response - tm.response.mean()) ** 2)
    assert sse < root


def test_min_leaf_respected(rng):
    tm = _matrix(rng, n=300)
    tree = fit_tree(tm, FitConfig(min_leaf_size=25))
    assert tree.count[tree.feature == -1].min() >= 25


def test_max_depth_one_gives_stump(rng):
    tm = _matrix(rng, n=300, sd=0.1)
    tree = fit_tree(tm, FitConfig(max_depth=1, min_leaf_size=10))
    assert tree.n_leaves == 2


def test_serialize_round_trip(tmp_path, rng):
    tm = _matrix(rng, n=500)
    tree = fit_tree(tm, FitConfig())
    path = tmp_path / "model.tree"
    save_tree(tree, path, FitConfig())
    back, meta = load_tree(path)
    for f in ("feature", "threshold", "left", "right", "value", "count"):
        assert np.array_equal(getattr(back, f), getattr(tree, f))
    assert back.l == tree.l and back.n_predictors == tree.n_predictors
    x = rng.normal(size=(50, 4))
    assert np.array_equal(back.predict(x), tree.predict(x))


def test_fit_deterministic(rng):
    tm = _matrix(rng, n=500)
    a = fit_tree(tm, FitConfig())
    b = fit_tree(tm, FitConfig())
    assert np.array_equal(a.threshold, b.threshold)
    assert np.array_equal(a.feature, b.feature)


def test_cv_prefers_informative_l(rng):
    # checkerboard-free smooth field: the immediate causal neighbors
    # carry nearly all the signal, so l = 1 should win over l = 2, 3
    from texspc.simulate import SarParams, generate_sar
    img = generate_sar(160, 160, SarParams(), rng)
    img = (img - img.mean()) / img.std()
    cfg = FitConfig(cv_folds=2, l_candidates=(1, 2, 3), min_leaf_size=30)
    chosen, report = select_neighborhood(img, cfg, seed=4)
    assert chosen == 1
    errs = {e.l: e.cv_mse for e in report.entries}
    assert errs[1] <= min(errs.values()) * (1 + 1e-12)


def test_cv_tie_tolerance_prefers_small_l(rng):
    # pure white noise: every l is equally (un)informative; with a loose
    # tie tolerance the smallest candidate must win
    img = rng.normal(size=(100, 100))
    cfg = FitConfig(cv_folds=2, l_candidates=(1, 2), min_leaf_size=50,
                    cv_tie_tol=0.05)
    chosen, _ = select_neighborhood(img, cfg, seed=0)
    assert chosen == 1


def test_select_neighborhood_skips_oversized_l(rng):
    img = rng.normal(size=(14, 14))
    cfg = FitConfig(cv_folds=2, l_candidates=(1, 50), min_leaf_size=5)
    with pytest.warns(UserWarning):
        chosen, report = select_neighborhood(img, cfg, seed=0)
    assert chosen == 1
    assert [e.skipped for e in report.entries] == [False, True]


def test_residuals_match_training_matrix(rng):
    from texspc.simulate import SarParams, generate_sar
    img = generate_sar(80, 80, SarParams(), rng)
    img = (img - img.mean()) / img.std()
    tm = build_training_matrix(img, 1)
    tree = fit_tree(tm, FitConfig(min_leaf_size=10))
    res = residual_image(tree, img)
    want = tm.response - tree.predict(tm.predictors)
    assert np.allclose(res.values.ravel(), want, atol=1e-12)
    assert res.values.shape == (79, 78)


def test_residual_whiteness(rng):
    # fitted-model residuals on an in-control image should be close to
    # white noise in the raster direction
    from texspc.simulate import SarParams, generate_sar
    train = generate_sar(300, 300, SarParams(), rng)
    train = (train - train.mean()) / train.std()
    tree = fit_tree(build_training_matrix(train, 1), FitConfig())
    fresh = generate_sar(250, 250, SarParams(), rng)
    fresh = (fresh - fresh.mean()) / fresh.std()
    r = residual_image(tree, fresh).values
    x = r - r.mean()
    rho = np.mean(x[1:, :] * x[:-1, :]) / x.var()
    assert abs(rho) < 0.1


def test_residual_image_too_small(rng):
    tm = _matrix(rng, n=200)
    tree = fit_tree(tm, FitConfig())
    with pytest.raises(ImageTooSmallError):
        residual_image(tree, rng.normal(size=(1, 3)))


def test_cross_validate_reproducible(rng):
    tm = _matrix(rng, n=400)
    cfg = FitConfig(cv_folds=3)
    a = cross_validate(tm, cfg, np.random.default_rng(11))
    b = cross_validate(tm, cfg, np.random.default_rng(11))
    assert a == b
