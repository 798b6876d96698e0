"""End-to-end replicates: data, teachers, oracle, students, metrics.

One replicate seed ``s`` drives every random choice in a run (data draw,
label split, teacher and student initialisation, minibatch order, MC
masks), so three seeds give three fully independent replicates.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .amalgamation import AmalgamationConfig, SupervisionTarget, amalgamate
from .data import (
    GaussianMixtureConfig,
    LabeledDataset,
    LabelPartition,
    concat_datasets,
    generate_gaussian_mixture,
    partition_labels,
    strip_labels,
)
from .evaluation import Ensemble, PaddedTeacher, accuracy
from .nn_core import ModelSpec
from .teachers import Classifier, TeacherModel, TrainConfig, TrainLog, train_oracle, train_teacher
from .uncertainty import MCConfig

TAU_GRID = (0.01, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0)


@dataclass(frozen=True)
class ExperimentConfig:
    data: GaussianMixtureConfig = field(default_factory=GaussianMixtureConfig)
    # second dataset for the cross-domain setting; its classes follow the first's
    cross_data: GaussianMixtureConfig | None = None
    subset_sizes: tuple[int, ...] = (4, 4)
    # added to the replicate seed when drawing the label split
    partition_seed: int = 0
    # one entry per teacher, or a single entry shared by all
    teacher_hidden: tuple[tuple[int, ...], ...] = ((64,),)
    oracle_hidden: tuple[int, ...] = (64,)
    student_hidden: tuple[int, ...] = (64,)
    dropout_rate: float = 0.1
    activation: str = "relu"
    teacher_train: TrainConfig = field(default_factory=TrainConfig)
    student_train: TrainConfig = field(default_factory=TrainConfig)
    methods: tuple[str, ...] = ("muka_hard", "muka_soft", "vanilla_kd", "uhc")
    mc_samples: int = 16
    tau: float = 0.2
    reweighting: bool = True
    kl_direction: str = "forward"
    supervision_source: str = "deterministic_forward"
    seeds: tuple[int, ...] = (0, 1, 2)
    # place the first class of teacher 1 next to the first class of teacher 2
    confusable_across: bool = False

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("at least one replicate seed is required")
        if self.cross_data is None and sum(self.subset_sizes) != self.data.num_classes:
            raise ValueError(f"subset sizes {self.subset_sizes} do not sum to {self.data.num_classes} classes")
        n = len(self.subset_sizes) if self.cross_data is None else 2
        if len(self.teacher_hidden) not in (1, n):
            raise ValueError(f"teacher_hidden needs 1 or {n} entries, got {len(self.teacher_hidden)}")

    @property
    def num_teachers(self) -> int:
        return len(self.subset_sizes) if self.cross_data is None else 2

    def hidden_for(self, i: int) -> tuple[int, ...]:
        return tuple(self.teacher_hidden[i if len(self.teacher_hidden) > 1 else 0])


def make_data(cfg: ExperimentConfig, seed: int, partition: LabelPartition | None = None):
    """``(train, val, test)`` for replicate ``seed``."""
    data = replace(cfg.data, seed=cfg.data.seed + seed)
    if cfg.confusable_across:
        partition = partition or make_partition(cfg, seed)
        data = replace(data, confusable_pair=(partition.subsets[0][0], partition.subsets[1][0]))
    splits = generate_gaussian_mixture(data)
    if cfg.cross_data is None:
        return splits
    other = generate_gaussian_mixture(replace(cfg.cross_data, seed=cfg.cross_data.seed + seed))
    offset = cfg.data.num_classes
    return tuple(concat_datasets(a, b, offset) for a, b in zip(splits, other))


def make_partition(cfg: ExperimentConfig, seed: int) -> LabelPartition:
    if cfg.cross_data is None:
        return partition_labels(cfg.data.num_classes, cfg.subset_sizes, cfg.partition_seed + seed)
    a, b = cfg.data.num_classes, cfg.cross_data.num_classes
    return LabelPartition(a + b, (tuple(range(a)), tuple(range(a, a + b))))


def union_classes(cfg: ExperimentConfig) -> int:
    extra = cfg.cross_data.num_classes if cfg.cross_data is not None else 0
    return cfg.data.num_classes + extra


def input_dim(cfg: ExperimentConfig) -> int:
    extra = cfg.cross_data.input_dim if cfg.cross_data is not None else 0
    return max(cfg.data.input_dim, extra)


def teacher_spec(cfg: ExperimentConfig, partition: LabelPartition, i: int) -> ModelSpec:
    return ModelSpec(input_dim(cfg), cfg.hidden_for(i), len(partition.subsets[i]),
                     cfg.dropout_rate, cfg.activation)


def student_spec(cfg: ExperimentConfig) -> ModelSpec:
    return ModelSpec(input_dim(cfg), cfg.student_hidden, union_classes(cfg),
                     cfg.dropout_rate, cfg.activation)


def oracle_spec(cfg: ExperimentConfig) -> ModelSpec:
    return ModelSpec(input_dim(cfg), cfg.oracle_hidden, union_classes(cfg),
                     cfg.dropout_rate, cfg.activation)


def train_teachers(cfg: ExperimentConfig, seed: int, train, val,
                   partition: LabelPartition) -> list[tuple[TeacherModel, TrainLog]]:
    return [
        train_teacher(teacher_spec(cfg, partition, i), train, val, partition, i,
                      replace(cfg.teacher_train, seed=1000 * seed + i))
        for i in range(partition.num_teachers)
    ]


def fit_oracle(cfg: ExperimentConfig, seed: int, train, val) -> tuple[Classifier, TrainLog]:
    # the oracle is an upper bound, so the overconfidence phase never applies to it
    tc = replace(cfg.teacher_train, seed=1000 * seed + 999, extra_epochs=0)
    return train_oracle(train, val, oracle_spec(cfg), tc)


def amalgamation_config(cfg: ExperimentConfig, seed: int, method: str, **overrides) -> AmalgamationConfig:
    mc_samples = overrides.pop("mc_samples", cfg.mc_samples)
    mc = MCConfig.deterministic() if mc_samples == 0 else MCConfig(mc_samples, base_seed=seed)
    kw = dict(
        method=method,
        mc=mc,
        tau=overrides.pop("tau", cfg.tau) if method == "muka_soft" else None,
        reweighting=overrides.pop("reweighting", cfg.reweighting),
        kl_direction=overrides.pop("kl_direction", cfg.kl_direction),
        train=replace(cfg.student_train, seed=1000 * seed + 500),
        supervision_source=overrides.pop("supervision_source", cfg.supervision_source),
    )
    if overrides:
        raise TypeError(f"unknown overrides {sorted(overrides)}")
    return AmalgamationConfig(**kw)


@dataclass(eq=False)
class Replicate:
    """Everything one seed of an experiment produced."""

    seed: int
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset
    partition: LabelPartition
    teachers: list[TeacherModel]
    teacher_logs: list[TrainLog]
    oracle: Classifier | None = None
    students: dict[str, Classifier] = field(default_factory=dict)
    targets: dict[str, SupervisionTarget] = field(default_factory=dict)

    def baseline_accuracies(self) -> dict[str, float]:
        out = {}
        for i, t in enumerate(self.teachers):
            out[f"teacher_{i + 1}"] = accuracy(PaddedTeacher(t, self.partition), self.test)
        out["ensemble"] = accuracy(Ensemble(self.teachers, self.partition), self.test)
        if self.oracle is not None:
            out["supervised"] = accuracy(self.oracle, self.test)
        return out

    def student_accuracies(self) -> dict[str, float]:
        return {name: accuracy(s, self.test) for name, s in self.students.items()}


def prepare(cfg: ExperimentConfig, seed: int, with_oracle: bool = True) -> Replicate:
    """Data, partition, teachers (and the oracle) for one replicate."""
    partition = make_partition(cfg, seed)
    train, val, test = make_data(cfg, seed, partition)
    trained = train_teachers(cfg, seed, train, val, partition)
    rep = Replicate(seed, train, val, test, partition,
                    [t for t, _ in trained], [log for _, log in trained])
    if with_oracle:
        rep.oracle, _ = fit_oracle(cfg, seed, train, val)
    return rep


def train_student_for(cfg: ExperimentConfig, rep: Replicate, method: str, name: str | None = None,
                      **overrides) -> float:
    """Amalgamate a student into ``rep`` and return its test accuracy."""
    acfg = amalgamation_config(cfg, rep.seed, method, **overrides)
    student, _, target = amalgamate(rep.teachers, strip_labels(rep.train), rep.val,
                                    rep.partition, acfg, student_spec(cfg))
    name = name or method
    rep.students[name] = student
    rep.targets[name] = target
    return accuracy(student, rep.test)


def run_replicate(cfg: ExperimentConfig, seed: int, methods=None) -> tuple[Replicate, dict[str, float]]:
    rep = prepare(cfg, seed)
    for m in methods or cfg.methods:
        train_student_for(cfg, rep, m)
    return rep, {**rep.baseline_accuracies(), **rep.student_accuracies()}


def summarize(per_seed: list[dict[str, float]]) -> dict[str, dict]:
    """``{model: {accuracy_mean, accuracy_std, per_seed}}`` over replicates."""
    names = per_seed[0].keys()
    out = {}
    for name in names:
        vals = [float(r[name]) for r in per_seed]
        out[name] = {
            "accuracy_mean": float(np.mean(vals)),
            "accuracy_std": float(np.std(vals)),
            "per_seed": vals,
        }
    return out


# -- scenario presets ------------------------------------------------------------

def paper_analog(**kw) -> ExperimentConfig:
    """8 classes in 32 dimensions, two 4-class teachers."""
    return ExperimentConfig(**kw)


def overconfident(**kw) -> ExperimentConfig:
    """Default-scenario teachers pushed to near-zero entropy by a dropout-free high-LR phase."""
    tc = TrainConfig(extra_epochs=30, extra_lr_scale=50.0)
    return ExperimentConfig(teacher_train=tc, **kw)


def confusable(distance: float = 1.0, **kw) -> ExperimentConfig:
    """Default-scenario data where one class sits close to a class of the other teacher."""
    data = GaussianMixtureConfig(confusable_distance=distance)
    return ExperimentConfig(data=data, confusable_across=True, **kw)


def multi_teacher(sizes, **kw) -> ExperimentConfig:
    """10-class mixture split among ``len(sizes)`` teachers."""
    data = GaussianMixtureConfig(num_classes=10)
    return ExperimentConfig(data=data, subset_sizes=tuple(sizes), **kw)


def heterogeneous(**kw) -> ExperimentConfig:
    """Small and large teacher architectures."""
    return ExperimentConfig(teacher_hidden=((64,), (256, 256)), **kw)


def cross_dataset(**kw) -> ExperimentConfig:
    """Teachers trained on two unrelated mixtures of different widths."""
    return ExperimentConfig(
        data=GaussianMixtureConfig(num_classes=4, input_dim=32),
        cross_data=GaussianMixtureConfig(num_classes=4, input_dim=24, seed=10_000),
        **kw,
    )
