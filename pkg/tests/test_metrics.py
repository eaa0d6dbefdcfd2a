import math

import numpy as np
import pytest

from mcpm import metrics
from mcpm import networks as nw
from mcpm import data


def masks(*rows):
    return np.array(rows, dtype=bool)


@pytest.mark.trivial
def test_trivial_values():
    a = masks([1, 1, 0, 0])
    b = masks([0, 1, 1, 0])
    assert metrics.iou(a, b) == pytest.approx(1 / 3)
    assert metrics.dice(a, b) == pytest.approx(0.5)
    p, q = np.zeros((6, 6), bool), np.zeros((6, 6), bool)
    p[0, 0] = q[3, 4] = True
    assert metrics.hausdorff(p, q) == pytest.approx(5.0)


def test_empty_conventions():
    z = np.zeros((3, 4), bool)
    o = z.copy()
    o[1, 1] = True
    assert metrics.iou(z, z) == 1.0 and metrics.dice(z, z) == 1.0
    assert metrics.hausdorff(z, z) == 0.0
    assert metrics.hausdorff(z, o) == pytest.approx(5.0)  # diagonal of 3x4
    assert metrics.iou(z, o) == 0.0


def test_dice_iou_identity():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        a = rng.random((8, 8)) < rng.random()
        b = rng.random((8, 8)) < rng.random()
        if not (a.any() or b.any()):
            continue
        i, d = metrics.iou(a, b), metrics.dice(a, b)
        assert abs(d - 2 * i / (1 + i)) <= 4 * np.finfo(float).eps


def _brute_hausdorff(a, b):
    pa, pb = np.argwhere(a), np.argwhere(b)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return max(d.min(axis=1).max(), d.min(axis=0).max())


def test_hausdorff_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(100):
        a = rng.random((10, 12)) < 0.15
        b = rng.random((10, 12)) < 0.15
        a[0, 0] = b[9, 11] = True
        assert metrics.hausdorff(a, b) == pytest.approx(_brute_hausdorff(a, b), abs=1e-12)


def test_symmetry_and_identity():
    rng = np.random.default_rng(2)
    for _ in range(50):
        a = rng.random((8, 8)) < 0.3
        b = rng.random((8, 8)) < 0.3
        a[2, 2] = b[5, 5] = True
        for f in (metrics.iou, metrics.dice, metrics.hausdorff):
            assert f(a, b) == f(b, a)
        assert metrics.iou(a, a) == 1.0 and metrics.dice(a, a) == 1.0
        assert metrics.hausdorff(a, a) == 0.0


@pytest.mark.trivial
def test_threshold_convention():
    assert not metrics.binarize(0.5)
    assert metrics.binarize(np.nextafter(0.5, 1))


@pytest.mark.trivial
def test_constant_half_predictor_scores_empty(tmp_path):
    train, _, _ = data.generate(data.SyntheticSpec(n_train=3, n_meta=0, n_test=0, h=8, w=8,
                                                   radius=(1.5, 2.5)))
    W = nw.zeros_like(nw.init_seg_params(np.random.default_rng(0), depth=1, base=2))
    rep = metrics.evaluate(W, train)
    assert rep.miou == 0.0
    assert np.allclose(rep.hausdorff, math.hypot(8, 8))


def test_report_perfect_predictor_and_csv(tmp_path):
    rng = np.random.default_rng(3)
    true = rng.random((4, 1, 6, 6)) < 0.4
    rep = metrics.report(true, true)
    assert rep.miou == 1.0 and rep.mean_dice == 1.0 and rep.mean_hausdorff == 0.0
    rep.to_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "sample,iou,dice,hausdorff"
    assert lines[-1].startswith("mean,1.0,1.0,0.0")
    assert len(lines) == 6


def test_report_averages_channels():
    pred = np.zeros((1, 2, 2, 2), bool)
    true = np.zeros((1, 2, 2, 2), bool)
    pred[0, 0, 0, 0] = true[0, 0, 0, 0] = True  # channel 0 perfect
    true[0, 1, 1, 1] = True  # channel 1 missed
    rep = metrics.report(pred, true)
    assert rep.iou[0] == pytest.approx(0.5)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        metrics.iou(np.zeros((2, 2)), np.zeros((3, 3)))


@pytest.mark.trivial
def test_disjoint_and_identical():
    a = masks([1, 0, 0], [0, 0, 0])
    b = masks([0, 0, 1], [0, 0, 0])
    assert metrics.iou(a, b) == 0.0 and metrics.dice(a, b) == 0.0
    assert metrics.iou(a, a) == 1.0 and metrics.dice(a, a) == 1.0
    assert metrics.hausdorff(a, a) == 0.0


@pytest.mark.trivial
def test_perfect_predictor_from_saturated_logits():
    train, _, _ = data.generate(data.SyntheticSpec(n_train=5, n_meta=0, n_test=0, h=16, w=16,
                                                   radius=(2.0, 4.0)))
    y = train.labels(clean=True)
    prob = 1 / (1 + np.exp(-50.0 * (2 * y - 1)))
    rep = metrics.report(metrics.binarize(prob), y > 0.5)
    assert rep.miou == 1.0 and rep.mean_dice == 1.0 and rep.mean_hausdorff == 0.0


@pytest.mark.trivial
def test_report_means_are_means_of_samples():
    rng = np.random.default_rng(4)
    pred = rng.random((7, 1, 8, 8)) < 0.4
    true = rng.random((7, 1, 8, 8)) < 0.4
    rep = metrics.report(pred, true)
    assert rep.miou == np.mean([metrics.iou(p, t) for p, t in zip(pred, true)])
    assert rep.mean_dice == np.mean([metrics.dice(p, t) for p, t in zip(pred, true)])
    assert rep.mean_hausdorff == np.mean([metrics.hausdorff(p, t) for p, t in zip(pred, true)])
