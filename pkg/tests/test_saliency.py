import numpy as np
import pytest

from semadv.models import Classifier
from semadv.saliency import grad_cam, interpretation_map, simple_fullgrad, top_fraction_iou


@pytest.fixture
def clf():
    return Classifier(width=4, seed=11)


@pytest.fixture
def img():
    return np.random.default_rng(0).uniform(-1, 1, (1, 1, 16, 16)).astype(np.float32)


@pytest.mark.parametrize("method", ["gradcam", "simplefullgrad"])
def test_maps_are_normalized_and_deterministic(clf, img, method):
    a = interpretation_map(method, clf, img, 1)
    b = interpretation_map(method, clf, img[0], 1)
    assert a.values.shape == (16, 16) and a.method == method and a.label == 1
    assert a.values.min() >= 0 and a.values.max() <= 1
    assert np.array_equal(a.values, b.values)


def test_unknown_method(clf, img):
    with pytest.raises(ValueError):
        interpretation_map("lime", clf, img, 0)


def test_batch_is_rejected(clf):
    with pytest.raises(ValueError):
        grad_cam(clf, np.zeros((2, 1, 16, 16), np.float32), 0)


def test_fullgrad_nonzero_on_random_net(clf, img):
    assert simple_fullgrad(clf, img, 0).values.max() == 1.0


def test_iou_hand_values():
    v = np.arange(10, dtype=float).reshape(2, 5)
    region = np.zeros((2, 5), bool)
    region[1, 4] = True
    assert top_fraction_iou(v, region, 0.1) == 1.0
    region[1, 3] = True
    assert top_fraction_iou(v, region, 0.1) == 0.5
    assert top_fraction_iou(v, np.zeros((2, 5), bool), 0.0) == 0.0


def test_gradcam_finds_glyph_on_trained_target(bench):
    ious = [top_fraction_iou(grad_cam(bench.target, bench.test.images[i], int(bench.test.labels[i])).values,
                             bench.test.regions[i]) for i in range(20)]
    assert np.mean(ious) > 0.2
