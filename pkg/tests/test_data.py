import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amalgam.data import (
    GaussianMixtureConfig,
    LabeledDataset,
    LabelPartition,
    UnlabeledDataset,
    class_means,
    concat_datasets,
    dumps_dataset,
    generate_gaussian_mixture,
    loads_dataset,
    partition_labels,
    restrict,
    save_dataset,
    strip_labels,
)
from amalgam.nn_core import ModelSpec
from amalgam.teachers import TrainConfig, train_classifier


def small(**kw):
    base = dict(num_classes=4, input_dim=6, train_per_class=100, val_per_class=20, test_per_class=20)
    base.update(kw)
    return GaussianMixtureConfig(**base)


def test_split_sizes():
    train, val, test = generate_gaussian_mixture(small())
    assert len(train) == 400 and len(val) == 80 and len(test) == 80
    assert np.all(np.bincount(train.labels) == 100)


def test_carved_validation():
    train, val, _ = generate_gaussian_mixture(small(val_per_class=0))
    assert len(val) == 20 and len(train) == 380
    assert np.all(np.bincount(val.labels) == 5)


def test_same_seed_same_bytes(tmp_path):
    for name in ("a", "b"):
        save_dataset(tmp_path / f"{name}.csv", generate_gaussian_mixture(small(seed=3))[0])
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    other = generate_gaussian_mixture(small(seed=4))[0]
    assert not np.array_equal(other.features, loads_dataset((tmp_path / "a.csv").read_text()).features)


def test_csv_round_trip_is_exact():
    ds = generate_gaussian_mixture(small())[1]
    back = loads_dataset(dumps_dataset(ds))
    assert np.array_equal(back.features, ds.features) and np.array_equal(back.labels, ds.labels)
    assert back.num_classes == ds.num_classes


def test_bad_csv_header():
    with pytest.raises(ValueError, match="line 1"):
        loads_dataset("label,x\n0,1.0\n")


def test_means_respect_separation():
    cfg = GaussianMixtureConfig(separation=3.0, cov_scale=1.5)
    m = class_means(cfg)
    d = np.linalg.norm(m[:, None] - m[None], axis=-1)
    assert d[np.triu_indices(len(m), 1)].min() >= 4.5


def test_confusable_pair_distance():
    m = class_means(GaussianMixtureConfig(confusable_pair=(5, 2), confusable_distance=0.7))
    assert np.linalg.norm(m[5] - m[2]) == pytest.approx(0.7)


def test_infeasible_separation():
    with pytest.raises(RuntimeError, match="1000 attempts"):
        generate_gaussian_mixture(GaussianMixtureConfig(num_classes=8, input_dim=2, separation=10.0))


def test_well_separated_two_class_is_learnable():
    cfg = GaussianMixtureConfig(num_classes=2, input_dim=2, separation=10.0, mean_radius=6.0,
                                train_per_class=200, val_per_class=20, test_per_class=20)
    train, val, _ = generate_gaussian_mixture(cfg)
    clf, _ = train_classifier(ModelSpec(2, (), 2, 0.0), train, val, TrainConfig(epochs=5, learning_rate=0.05))
    assert np.mean(clf.predict(train.features) == train.labels) >= 0.99


def test_datasets_are_read_only():
    ds = generate_gaussian_mixture(small())[0]
    with pytest.raises(ValueError):
        ds.features[0, 0] = 1.0
    assert not hasattr(strip_labels(ds), "labels")
    assert isinstance(strip_labels(ds), UnlabeledDataset)


# -- partitions -------------------------------------------------------------------

def test_partition_334():
    p = partition_labels(10, (3, 3, 4), seed=0)
    assert p.sizes() == [3, 3, 4]
    assert sorted(y for s in p.subsets for y in s) == list(range(10))


def test_partition_deterministic_and_checked():
    assert partition_labels(4, (2, 2), 5) == partition_labels(4, (2, 2), 5)
    with pytest.raises(ValueError, match="sum"):
        partition_labels(4, (2, 3), 0)
    with pytest.raises(ValueError):
        LabelPartition(4, ((0, 1), (1, 2, 3)))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(2, 5), min_size=1, max_size=5), st.integers(0, 10**6))
def test_partition_is_disjoint_cover(sizes, seed):
    n = sum(sizes)
    p = partition_labels(n, sizes, seed)
    assert p.sizes() == sizes
    assert sorted(y for s in p.subsets for y in s) == list(range(n))
    for i in range(p.num_teachers):
        y = np.array(p.subsets[i])
        assert np.array_equal(p.union_index(i, p.local_index(i, y)), y)
        assert np.all(p.owner(y) == i)


def test_restrict():
    train = generate_gaussian_mixture(GaussianMixtureConfig(train_per_class=100))[0]
    p = partition_labels(8, (4, 4), 1)
    r = restrict(train, p, 0)
    assert len(r) == 400 and r.num_classes == 4 and set(r.labels.tolist()) == {0, 1, 2, 3}
    rows = p.owner(train.labels) == 0
    assert np.array_equal(p.union_index(0, r.labels), train.labels[rows])
    assert np.array_equal(r.features, train.features[rows])
    with pytest.raises(IndexError):
        restrict(train, p, 2)


def test_concat():
    a = LabeledDataset(np.ones((4, 10)), [0, 1, 2, 3], 4)
    b = LabeledDataset(np.full((4, 8), 2.0), [0, 1, 2, 3], 4)
    c = concat_datasets(a, b, 4)
    assert c.num_classes == 8 and sorted(set(c.labels.tolist())) == list(range(8))
    assert c.input_dim == 10 and np.all(c.features[4:, 8:] == 0) and np.all(c.features[4:, :8] == 2)
    with pytest.raises(ValueError, match="overlap"):
        concat_datasets(a, b, 2)
