import json
import math

import numpy as np
import pytest

from amalgam.amalgamation import SupervisionTarget
from amalgam.data import GaussianMixtureConfig, LabeledDataset, LabelPartition, generate_gaussian_mixture, partition_labels
from amalgam.evaluation import (
    Ensemble,
    PaddedTeacher,
    accuracy,
    confusion_matrix,
    selection_error_analysis,
    supervision_quality,
    uncertainty_histogram,
    write_histogram_csvs,
)
from amalgam.nn_core import ModelSpec
from amalgam.teachers import TeacherModel, TrainConfig, train_teacher
from amalgam.uncertainty import MCConfig

# frozen from tests/oracles/derive_frozen.py
KL_ONEHOT_UNIFORM4 = 1.386294361120


class Fixed:
    def __init__(self, proba):
        self.proba = np.asarray(proba, float)

    def predict_proba(self, x):
        return np.broadcast_to(self.proba, (len(x), self.proba.shape[-1])) if self.proba.ndim == 1 else self.proba


def balanced(k, per=5, dim=2):
    labels = np.repeat(np.arange(k), per)
    return LabeledDataset(np.zeros((labels.size, dim)), labels, k)


def test_accuracy_examples():
    d = balanced(4)
    assert accuracy(Fixed(np.eye(4)[d.labels]), d) == 1.0
    assert accuracy(Fixed([0.1, 0.7, 0.1, 0.1]), d) == 0.25
    assert accuracy(Fixed([0.5, 0.5, 0, 0]), d) == 0.25  # ties go to index 0
    with pytest.raises(ValueError):
        accuracy(Fixed([1.0, 0.0]), LabeledDataset(np.zeros((0, 2)), [], 2))
    with pytest.raises(ValueError):
        accuracy(Fixed([1.0, 0.0, 0.0]), balanced(4))


def test_padded_perfect_teacher_gets_half():
    d = balanced(8, per=10)
    part = LabelPartition(8, ((0, 1, 2, 3), (4, 5, 6, 7)))

    class Perfect:
        index = 0

        def predict_proba(self, x):
            lab = d.labels
            out = np.full((len(lab), 4), 0.01)
            own = lab < 4
            out[own, lab[own]] = 0.97
            return out / out.sum(axis=1, keepdims=True)

    assert accuracy(PaddedTeacher(Perfect(), part), d) == 0.5


def test_confusion_matrix():
    d = balanced(3, per=4)
    perfect = confusion_matrix(Fixed(np.eye(3)[d.labels]), d)
    assert np.array_equal(perfect, np.diag([4, 4, 4]))
    const = confusion_matrix(Fixed([0, 0, 1.0]), d)
    assert np.count_nonzero(const.sum(axis=0)) == 1 and const[:, 2].sum() == 12
    assert np.array_equal(const.sum(axis=1), perfect.sum(axis=1))
    assert const.sum() == len(d)


def _target(dist, provenance, v=None):
    dist = np.asarray(dist, float)
    return SupervisionTarget(dist, np.ones(len(dist)), provenance, v=v)


def test_supervision_quality_examples():
    onehot = np.eye(4)[[0, 1, 2]]
    oracle = Fixed(onehot)
    x = np.zeros((3, 2))
    res = supervision_quality({"vanilla_kd": _target(np.full((3, 4), 0.25), "vanilla_kd")}, oracle, x)
    assert res.aggregates["vanilla_kd"] == pytest.approx(KL_ONEHOT_UNIFORM4, abs=1e-9)
    same = supervision_quality({"muka_soft": _target(onehot, "soft", v=np.array([0.9, 0.2, 0.6]))}, oracle, x)
    assert same.aggregates["muka_soft_all"] < 1e-9
    assert same.aggregates["count_v_ge_0.5"] == 2
    with pytest.raises(ValueError, match="hard"):
        supervision_quality({"muka_hard": _target(onehot, "hard")}, oracle, x)
    with pytest.raises(ValueError, match="unsupported"):
        supervision_quality({"uhc": _target(onehot, "uhc")}, oracle, x)


def test_supervision_quality_groups_and_recompute(tmp_path):
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(4), size=30)
    v = rng.uniform(size=30)
    res = supervision_quality({
        "muka_soft": _target(rng.dirichlet(np.ones(4), size=30), "soft", v=v),
        "vanilla_kd": _target(rng.dirichlet(np.ones(4), size=30), "vanilla_kd"),
    }, Fixed(p), np.zeros((30, 2)))
    assert res.check()
    kl = res.records["kl"]
    assert res.aggregates["vanilla_kd_on_v_ge_0.5"] == pytest.approx(kl[30:][v >= 0.5].mean())
    res.write_csv(tmp_path / "q.csv")
    res.write_json(tmp_path / "q.json")
    assert (tmp_path / "q.csv").read_text().splitlines()[0] == "instance_id,method,v,kl"
    assert json.loads((tmp_path / "q.json").read_text())["count_v_ge_0.5"] == int((v >= 0.5).sum())
    res.aggregates["vanilla_kd"] += 1
    assert not res.check()


@pytest.fixture(scope="module")
def trained():
    cfg = GaussianMixtureConfig(train_per_class=150, test_per_class=50, separation=3.0)
    train, val, test = generate_gaussian_mixture(cfg)
    part = partition_labels(8, (4, 4), 0)
    ts = [train_teacher(ModelSpec(32, (32,), 4), train, val, part, i, TrainConfig(seed=i))[0] for i in range(2)]
    return test, part, ts


def test_uncertainty_histogram(trained, tmp_path):
    test, part, ts = trained
    res = uncertainty_histogram(ts, part, test, MCConfig(4))
    assert res.check()
    for mode in ("single", "mc"):
        agg = res.aggregates[mode]
        assert agg["separation"] == pytest.approx(agg["mean_u_wrong"] - agg["mean_u_correct"])
        assert sum(agg["hist_correct"]) == len(test) and sum(agg["hist_wrong"]) == len(test)
        assert len(agg["hist_correct"]) == 50
    paths = write_histogram_csvs(res, tmp_path)
    assert [p.name for p in paths] == ["uncertainty_single.csv", "uncertainty_mc.csv"]
    assert paths[0].read_text().splitlines()[0] == "instance_id,teacher_id,u_normalized,is_correct_teacher"


def test_uniform_teacher_has_unit_uncertainty():
    spec = ModelSpec(2, (3,), 4)
    flat = TeacherModel(spec, np.zeros(spec.num_params), 0, range(4))
    part = LabelPartition(8, ((0, 1, 2, 3), (4, 5, 6, 7)))
    flat2 = TeacherModel(spec, np.zeros(spec.num_params), 1, range(4, 8))
    res = uncertainty_histogram([flat, flat2], part, balanced(8, dim=2), MCConfig(3))
    assert np.allclose(res.records["u_normalized"], 1.0)


def test_selection_errors(trained):
    test, part, ts = trained
    res = selection_error_analysis(ts, part, test, MCConfig(4))
    agg = res.aggregates
    assert res.check()
    assert agg["num_errors"] == sum(agg["label_histogram"])
    assert "mean_v_errors" in agg
    assert agg["selection_accuracy"] == pytest.approx(1 - agg["num_errors"] / len(test))


def test_selection_errors_vanish_when_separated():
    cfg = GaussianMixtureConfig(input_dim=64, separation=14.0, mean_radius=12.0, test_per_class=100)
    train, val, test = generate_gaussian_mixture(cfg)
    part = partition_labels(8, (4, 4), 0)
    spec = ModelSpec(64, (64,), 4, activation="tanh")
    ts = [train_teacher(spec, train, val, part, i, TrainConfig())[0] for i in range(2)]
    res = selection_error_analysis(ts, part, test, MCConfig(16))
    assert res.aggregates["num_errors"] == 0
    assert sum(res.aggregates["label_histogram"]) == 0


def test_selection_errors_concentrate_on_confusable_pair():
    from amalgam import experiments as ex

    cfg = ex.confusable()
    rep = ex.prepare(cfg, 0, with_oracle=False)
    res = selection_error_analysis(rep.teachers, rep.partition, rep.test, MCConfig(16))
    hist = np.array(res.aggregates["label_histogram"])
    pair = [rep.partition.subsets[0][0], rep.partition.subsets[1][0]]
    # two of eight labels would hold a quarter of the errors if they were spread evenly
    assert hist[pair].sum() / hist.sum() > 0.5


def test_ensemble_concatenates_logits(trained):
    test, part, ts = trained
    ens = Ensemble(ts, part)
    p = ens.predict_proba(test.features[:3])
    z = np.zeros((3, 8))
    for t in ts:
        z[:, list(part.subsets[t.index])] = t.logits(test.features[:3])
    e = np.exp(z - z.max(axis=1, keepdims=True))
    assert np.allclose(p, e / e.sum(axis=1, keepdims=True))
    assert math.isclose(p.sum(), 3.0)
