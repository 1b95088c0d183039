import numpy as np
import pytest
from sklearn.base import clone

from hdcaseg import HDCASegmenter
from hdcaseg.synthdata import SceneSpec, generate_scene

SMALL = dict(stem_channels=8, stage_channels=(8, 8, 16), out_channels=16, reduced_channels=8,
             context_channels=4, crop=32, batch_size=2)


@pytest.fixture(scope="module")
def data():
    spec = SceneSpec(size=32, seed=5)
    samples = [generate_scene(spec, i) for i in range(6)]
    return np.stack([s.image for s in samples]), np.stack([s.labels for s in samples])


@pytest.fixture(scope="module")
def fitted(data):
    X, y = data
    return HDCASegmenter(levels=(2, 4), num_classes=6, iters=8, **SMALL).fit(X, y)


def test_params_round_trip():
    est = HDCASegmenter(levels=(2, 4), iters=5)
    params = est.get_params()
    assert params["levels"] == (2, 4) and params["iters"] == 5
    c = clone(est).set_params(iters=9)
    assert c.iters == 9 and est.iters == 5


def test_fit_predict_transform_score(fitted, data):
    X, y = data
    assert fitted.n_classes_ == 6 and len(fitted.loss_curve_) == 8
    pred = fitted.predict(X[:2])
    assert pred.shape == (2, 32, 32) and pred.min() >= 0 and pred.max() < 6
    proba = fitted.predict_proba(X[:2])
    np.testing.assert_allclose(proba.sum(axis=1), 1, atol=1e-5)
    assert fitted.transform(X[:2]).shape == (2, 8, 4, 4)
    maps = fitted.region_maps(X[:1])
    assert [m.max() < s for m, s in zip(maps, (2, 4))] == [True, True]
    assert 0 <= fitted.score(X, y) <= 1


def test_accepts_uint8_images(fitted, data):
    X, _ = data
    X8 = np.rint(X * 255).astype(np.uint8)
    assert fitted.predict(X8).shape == (6, 32, 32)


def test_unfitted_raises(data):
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        HDCASegmenter().predict(data[0])


@pytest.mark.parametrize("X, message", [(np.zeros((1, 4, 32, 32)), r"\(n, 3, H, W\)"),
                                        (np.zeros((1, 3, 30, 32)), "divisible by 8"),
                                        (np.full((1, 3, 32, 32), np.nan), "NaN")])
def test_image_validation(X, message):
    with pytest.raises(ValueError, match=message):
        HDCASegmenter(iters=1).fit(X, np.zeros((1,) + X.shape[2:], int))


def test_label_validation(data):
    X, y = data
    with pytest.raises(ValueError, match="do not match"):
        HDCASegmenter(iters=1).fit(X, y[:3])
    with pytest.raises(ValueError, match="outside"):
        HDCASegmenter(iters=1, num_classes=3).fit(X, y)
    with pytest.raises(ValueError, match="strictly increasing"):
        HDCASegmenter(levels=(4, 2), iters=1).fit(X, y)


def test_baseline_has_no_region_maps(data):
    X, y = data
    est = HDCASegmenter(levels=(), num_classes=6, iters=2, **SMALL).fit(X, y)
    assert est.region_maps(X[:1]) == []
    assert est.transform(X[:1]).shape == (1, 8, 4, 4)
