import warnings

import numpy as np
import pytest

from gear.data import (
    DataError,
    Dataset,
    SyntheticPairSpec,
    corrupt_labels,
    fold_indices,
    generate_synthetic_pair,
    load_csv,
    write_csv,
)


def test_synthetic_pair_deterministic_and_sized():
    spec = SyntheticPairSpec(n_source=50, n_target=20, seed=4)
    a, b = generate_synthetic_pair(spec), generate_synthetic_pair(spec)
    np.testing.assert_array_equal(a.source.x, b.source.x)
    np.testing.assert_array_equal(a.target.y, b.target.y)
    assert len(a.source) == 50 and len(a.target) == 20
    np.testing.assert_array_equal(a.source.x[:20], a.target.x)


def test_identical_heads_without_noise_give_identical_labels():
    pair = generate_synthetic_pair(SyntheticPairSpec(noise=(0.0, 0.0), similarity=1.0, n_source=30, n_target=30))
    np.testing.assert_array_equal(pair.source.y, pair.target.y)


def test_default_pair_labels_correlate():
    pair = generate_synthetic_pair()
    assert pair.correlation > 0.5
    assert np.corrcoef(pair.source.y[:200], pair.target.y)[0, 1] > 0.5


@pytest.mark.parametrize("kw", [{"n_source": 0}, {"n_target": -1}, {"noise": (-0.1, 0.1)}, {"similarity": 1.5}])
def test_synthetic_spec_validation(kw):
    with pytest.raises(ValueError):
        SyntheticPairSpec(**kw)


def test_csv_normalizes_columns(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("feature_0,feature_1,label\n1,2,0\n3,4,1\n")
    ds = load_csv(p)
    np.testing.assert_allclose(ds.x.mean(axis=0), 0.0, atol=1e-15)
    np.testing.assert_allclose(ds.x.std(axis=0), 1.0)
    np.testing.assert_allclose(ds.denormalize_y(ds.y), [0.0, 1.0], atol=1e-12)


def test_csv_round_trip_denormalize(tmp_path, rng):
    x, y = rng.normal(size=(30, 3)), 5 + 2 * rng.normal(size=30)
    p = tmp_path / "r.csv"
    write_csv(p, x, y)
    ds = load_csv(p)
    np.testing.assert_allclose(ds.denormalize_y(ds.normalize_y(y)), y, atol=1e-12)
    np.testing.assert_allclose(ds.denormalize_y(ds.y), y, atol=1e-12)


def test_csv_train_rows_statistics(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("feature_0,label\n0,0\n2,2\n100,100\n")
    ds = load_csv(p, train_rows=[0, 1])
    assert ds.y_mean == 1.0 and ds.y_std == 1.0
    assert ds.y[2] == 99.0


@pytest.mark.parametrize(
    "text, line",
    [
        ("1,2,3\n", ":1:"),
        ("feature_0,label\n1,2\n3\n", ":3:"),
        ("feature_0,label\n1,abc\n", ":2:"),
    ],
)
def test_csv_parse_errors_name_line(tmp_path, text, line):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(DataError, match=line):
        load_csv(p)


def test_fold_indices_partition():
    folds = fold_indices(8, 4, seed=3)
    assert [len(f) for f in folds] == [2, 2, 2, 2]
    np.testing.assert_array_equal(np.sort(np.concatenate(folds)), np.arange(8))
    with pytest.raises(ValueError):
        fold_indices(3, 4, 0)


def test_corrupt_hand_example():
    ds = Dataset(np.zeros((3, 1)), np.array([3.0, -3.0, 0.1]))
    # population std is 2.449; the sample std (3.0) would leave nothing eligible
    assert np.std(ds.y) == pytest.approx(2.449, abs=1e-3)
    c = corrupt_labels(ds, 1.0, seed=0)
    np.testing.assert_array_equal(c.indices, [0, 1])
    np.testing.assert_array_equal(c.injected.y, [-3.0, 3.0])
    np.testing.assert_array_equal(c.train.y, [3.0, -3.0, 0.1, -3.0, 3.0])


def test_corrupt_fraction_zero_is_identity():
    ds = Dataset(np.zeros((3, 1)), np.array([3.0, -3.0, 0.1]))
    c = corrupt_labels(ds, 0.0)
    assert len(c.indices) == 0 and c.warning is None
    np.testing.assert_array_equal(c.train.y, ds.y)


def test_corrupt_nothing_eligible_warns():
    ds = Dataset(np.zeros((4, 1)), np.array([1.0, -1.0, 1.0, -1.0]))
    with pytest.warns(RuntimeWarning):
        c = corrupt_labels(ds, 0.5)
    assert len(c.indices) == 0 and c.warning


def twenty_rows():
    # population std of these labels is 2.0; rows 3, 7, 11, 15 and 19 exceed it
    y = np.array([0.5, -0.5, 1.0, 5.0, 0.0, 1.5, -1.0, -4.5, 0.2, -0.2, 1.2, 3.9, -1.2, 0.8, -0.8, -3.1, 0.3, -0.3, 1.9, 2.6])
    return Dataset(np.arange(40.0).reshape(20, 2), y)


def test_corrupt_twenty_row_fixture():
    ds = twenty_rows()
    std = float(np.std(ds.y))
    expected_eligible = np.flatnonzero(np.abs(ds.y) > std)
    c = corrupt_labels(ds, 0.1, seed=7)
    np.testing.assert_array_equal(c.eligible, expected_eligible)
    assert len(c.indices) == 2 and set(c.indices) <= set(expected_eligible)
    np.testing.assert_array_equal(c.clean_labels, ds.y[c.indices])
    np.testing.assert_array_equal(c.injected.y, -ds.y[c.indices])
    np.testing.assert_array_equal(c.injected.x, ds.x[c.indices])
    assert len(c.train) == 22
    np.testing.assert_array_equal(c.train.y[20:], -ds.y[c.indices])


def test_corrupt_respects_test_partition():
    ds = twenty_rows()
    test_idx = np.arange(10)
    train = ds.subset(np.arange(10, 20))
    c = corrupt_labels(ds, 0.2, seed=1, test_idx=test_idx, train=train)
    assert set(c.indices) <= {3, 7}
    assert len(c.indices) == 2 and len(c.train) == 12
