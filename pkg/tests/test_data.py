import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcpm import data

SMALL = data.SyntheticSpec(n_train=10, n_meta=4, n_test=5, h=16, w=16, radius=(2.0, 4.0), seed=1)


@pytest.mark.trivial
def test_noise_free_image_equals_label():
    spec = data.SyntheticSpec(n_train=5, n_meta=0, n_test=0, fg_mean=1.0, bg_mean=0.0,
                              noise_std=0.0)
    train, _, _ = data.generate(spec)
    for s in train.samples:
        assert np.array_equal(s.image, s.label)


@pytest.mark.trivial
def test_generation_deterministic_and_seeded():
    a = data.generate(SMALL)
    b = data.generate(SMALL)
    c = data.generate(data.with_seed(SMALL, 2))
    for da, db in zip(a, b):
        for sa, sb in zip(da.samples, db.samples):
            assert np.array_equal(sa.image, sb.image) and np.array_equal(sa.label, sb.label)
    assert not np.array_equal(a[0][0].image, c[0][0].image)


def test_sample_shapes_and_ranges():
    train, meta, test = data.generate(SMALL)
    assert (len(train), len(meta), len(test)) == (10, 4, 5)
    s = train[0]
    assert s.image.shape == (1, 16, 16) and s.label.shape == (1, 16, 16)
    assert s.image.min() >= 0 and s.image.max() <= 1
    assert set(np.unique(s.label)) <= {0.0, 1.0}
    assert not s.corrupted and not s.band.any()


def test_foreground_fraction():
    spec = data.SyntheticSpec(n_train=1000, n_meta=0, n_test=0)
    train, _, _ = data.generate(spec)
    frac = train.labels().mean(axis=(1, 2, 3))
    assert frac.min() > 0
    assert 0.03 <= frac.mean() <= 0.5


def test_spec_validation():
    with pytest.raises(ValueError):
        data.generate(data.SyntheticSpec(h=4, w=4))
    with pytest.raises(ValueError):
        data.generate(data.SyntheticSpec(n_train=0, n_meta=0, n_test=0))
    with pytest.raises(ValueError):
        data.Dataset([], "validation")


# -- dilation -----------------------------------------------------------------

def _brute_dilate(mask, r):
    h, w = mask.shape
    out = np.zeros_like(mask)
    pts = np.argwhere(mask)
    for i in range(h):
        for j in range(w):
            if len(pts) and (((pts - [i, j]) ** 2).sum(1) <= r * r).any():
                out[i, j] = True
    return out


@pytest.mark.trivial
def test_dilate_radius_zero_is_identity():
    m = np.random.default_rng(0).random((9, 9)) < 0.2
    assert np.array_equal(data.dilate(m, 0), m)


def test_dilate_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(20):
        m = rng.random((12, 10)) < 0.05
        r = int(rng.integers(0, 5))
        assert np.array_equal(data.dilate(m, r), _brute_dilate(m, r))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), r=st.integers(0, 6))
def test_dilate_superset_and_monotone(seed, r):
    m = np.random.default_rng(seed).random((16, 16)) < 0.05
    d = data.dilate(m, r)
    assert d.shape == m.shape
    assert np.all(d >= m)
    assert np.all(data.dilate(m, r + 1) >= d)


@pytest.mark.trivial
def test_dilate_single_pixel_radius_one_is_plus():
    m = np.zeros((5, 5), bool)
    m[2, 2] = True
    plus = np.zeros((5, 5), bool)
    plus[2, 1:4] = plus[1:4, 2] = True
    assert np.array_equal(data.dilate(m, 1), plus)


def test_dilate_single_pixel_is_disk():
    m = np.zeros((11, 11), bool)
    m[5, 5] = True
    assert np.array_equal(data.dilate(m, 3)[2:9, 2:9], data.disk(3))
    with pytest.raises(ValueError):
        data.dilate(m, -1)


# -- elastic --------------------------------------------------------------------

IDENTITY = data.ElasticParams(sigma=0.0, rotation=(0, 0), translation=(0, 0), dilation=(0, 0))


@pytest.mark.trivial
def test_elastic_identity():
    m = np.random.default_rng(2).random((16, 16)) < 0.3
    assert np.array_equal(data.elastic(m, IDENTITY, 0), m)


@pytest.mark.trivial
def test_elastic_pure_translation():
    m = np.zeros((16, 16), bool)
    m[5:8, 4:9] = True
    m[14:, 0] = True  # pushed past the bottom border
    shift = data.ElasticParams(sigma=0.0, rotation=(0, 0), translation=((2, 2), (0, 0)),
                               dilation=(0, 0))
    expected = np.zeros_like(m)
    expected[2:] = m[:-2]
    assert np.array_equal(data.elastic(m, shift, 0), expected)


def test_elastic_shared_translation_range():
    m = np.zeros((16, 16), bool)
    m[5:8, 4:9] = True
    shift = data.ElasticParams(sigma=0.0, rotation=(0, 0), translation=(2, 2), dilation=(0, 0))
    assert np.array_equal(data.elastic(m, shift, 0), np.roll(np.roll(m, 2, 0), 2, 1))


def test_elastic_area_stays_bounded():
    spec = data.SyntheticSpec(n_train=100, n_meta=0, n_test=0, seed=4)
    train, _, _ = data.generate(spec)
    for i, s in enumerate(train.samples):
        m = s.clean_label[0] > 0
        out = data.elastic(m, data.ElasticParams(), i)
        assert 0.5 * m.sum() <= out.sum() <= 3 * m.sum()


# -- label corruption -----------------------------------------------------------

@pytest.mark.trivial
@pytest.mark.parametrize("r,expected", [(0.0, 0), (1.0, 10), (0.4, 4), (0.25, 3), (0.05, 1)])
def test_corrupt_count(r, expected):
    train, _, _ = data.generate(SMALL)
    out = data.corrupt(train, data.CorruptionSpec(r=r, radius=(1, 3), seed=0))
    assert sum(s.corrupted for s in out.samples) == expected


def test_corrupt_bookkeeping():
    train, _, _ = data.generate(SMALL)
    out = data.corrupt(train, data.CorruptionSpec(r=0.5, radius=(1, 3), seed=0))
    for before, after in zip(train.samples, out.samples):
        assert np.array_equal(after.clean_label, before.clean_label)
        assert np.array_equal(after.image, before.image)
        if after.corrupted:
            assert np.all(after.label >= after.clean_label)  # dilation only grows
            assert after.band.any()
        else:
            assert np.array_equal(after.label, after.clean_label)
            assert not after.band.any()


@pytest.mark.trivial
def test_corrupt_r_zero_is_identity():
    train, _, _ = data.generate(SMALL)
    out = data.corrupt(train, data.CorruptionSpec(r=0.0))
    for a, b in zip(train.samples, out.samples):
        assert np.array_equal(a.label, b.label)


def test_corrupt_elastic_kind():
    train, _, _ = data.generate(SMALL)
    out = data.corrupt(train, data.CorruptionSpec(r=1.0, kind="elastic", seed=0))
    assert all(s.corrupted for s in out.samples)
    assert set(np.unique(out.labels())) <= {0.0, 1.0}


@pytest.mark.parametrize("r", [-0.1, 1.5])
def test_corrupt_rejects_bad_fraction(r):
    train, _, _ = data.generate(SMALL)
    with pytest.raises(ValueError):
        data.corrupt(train, data.CorruptionSpec(r=r))


def test_meta_split_must_be_clean():
    train, _, _ = data.generate(SMALL)
    out = data.corrupt(train, data.CorruptionSpec(r=1.0, radius=(1, 1)))
    with pytest.raises(ValueError):
        data.Dataset(out.samples, "meta")


def test_round_half_away():
    assert data.round_half_away(2.5) == 3
    assert data.round_half_away(0.5) == 1
    assert data.round_half_away(-2.5) == -3
    assert data.round_half_away(2.4) == 2


# -- container ------------------------------------------------------------------

def test_container_roundtrip(tmp_path):
    train, meta, test = data.generate(SMALL)
    corr = data.CorruptionSpec(r=0.4, radius=(1, 2), seed=5)
    train = data.corrupt(train, corr)
    data.save(tmp_path, {"train": train, "meta": meta, "test": test}, SMALL, corr)
    splits, manifest = data.load(tmp_path)
    assert manifest["counts"] == {"train": 10, "meta": 4, "test": 5}
    assert manifest["r"] == 0.4 and manifest["seed"] == 1
    assert manifest["image_shape"] == [1, 16, 16]
    for name, ds in (("train", train), ("meta", meta), ("test", test)):
        for a, b in zip(ds.samples, splits[name].samples):
            assert np.array_equal(a.image, b.image)
            assert np.array_equal(a.label, b.label)
            assert np.array_equal(a.clean_label, b.clean_label)
            assert a.corrupted == b.corrupted
    flags = (tmp_path / "train" / "flags.csv").read_text().splitlines()
    assert flags[0] == "index,corrupted" and len(flags) == 11
    json.loads((tmp_path / "manifest.json").read_text())
