"""Union-space supervision from frozen teachers and the student trainer.

Targets for every transfer instance are synthesised once before training
(teachers never change) and cached; the student then minimises the
instance-weighted KL objective against them.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset, LabelPartition, UnlabeledDataset
from .nn_core import ModelSpec, forward, softmax, weighted_kl_loss
from .teachers import Classifier, TrainConfig, TrainLog, fit
from .uncertainty import MCConfig, UncertaintyReport, assess, soft_weights

METHODS = ("muka_hard", "muka_soft", "vanilla_kd", "uhc")


def pad(dist, i: int, partition: LabelPartition) -> np.ndarray:
    """Embed a distribution over subset ``i`` into the union space, zeros elsewhere."""
    dist = np.asarray(dist, dtype=float)
    partition._check(i)
    idx = partition.subsets[i]
    if dist.shape[-1] != len(idx):
        raise ValueError(f"distribution has {dist.shape[-1]} entries, subset {i} has {len(idx)}")
    out = np.zeros(dist.shape[:-1] + (partition.union_size,))
    out[..., list(idx)] = dist
    return out


def _union_scatter(parts, partition: LabelPartition) -> np.ndarray:
    """Place per-teacher vectors at their union indices."""
    n = parts[0].shape[:-1]
    out = np.empty(n + (partition.union_size,))
    for i, part in enumerate(parts):
        if part.shape[-1] != len(partition.subsets[i]):
            raise ValueError(f"teacher {i} vector has {part.shape[-1]} entries, subset has "
                             f"{len(partition.subsets[i])}")
        out[..., list(partition.subsets[i])] = part
    return out


@dataclass(frozen=True, eq=False)
class SupervisionTarget:
    """Union-space targets and instance weights for a batch of instances.

    ``v`` is the confidence margin whether or not it is used as ``weight``.
    For ``uhc`` the per-teacher distributions are kept in ``teacher_dists``
    and ``dist`` holds their uniform-weighted padded mixture for inspection.
    """

    dist: np.ndarray
    weight: np.ndarray
    provenance: str
    v: np.ndarray | None = None
    selected: np.ndarray | None = None
    teacher_dists: tuple[np.ndarray, ...] | None = None

    def __len__(self):
        return self.dist.shape[0]


def synthesize_hard(report: UncertaintyReport, teacher_dists, partition: LabelPartition,
                    reweighting: bool = True) -> SupervisionTarget:
    """Padded prediction of the most confident teacher per instance."""
    n = len(report)
    dist = np.zeros((n, partition.union_size))
    for i, p in enumerate(teacher_dists):
        rows = report.selected == i
        dist[rows] = pad(np.asarray(p)[rows], i, partition)
    weight = report.v.copy() if reweighting else np.ones(n)
    return SupervisionTarget(dist, weight, "hard", v=report.v.copy(), selected=report.selected.copy())


def synthesize_soft(report: UncertaintyReport, teacher_dists, partition: LabelPartition,
                    tau: float, reweighting: bool = True) -> SupervisionTarget:
    """Confidence-softmax mixture of the padded teacher predictions."""
    w = soft_weights(report.c, tau)
    dist = sum(w[:, i:i + 1] * pad(p, i, partition) for i, p in enumerate(teacher_dists))
    weight = report.v.copy() if reweighting else np.ones(len(report))
    return SupervisionTarget(dist, weight, "soft", v=report.v.copy())


def synthesize_vanilla_kd(teacher_logits, partition: LabelPartition) -> SupervisionTarget:
    """Softmax over the teachers' logits concatenated into union order."""
    logits = _union_scatter([np.atleast_2d(z) for z in teacher_logits], partition)
    return SupervisionTarget(softmax(logits), np.ones(logits.shape[0]), "vanilla_kd")


def uhc_loss(student_logits, teacher_dists, partition: LabelPartition):
    """Mean over teachers of KL(teacher || softmax of the matching student slice).

    Returns per-instance losses and the gradient w.r.t. the student logits.
    """
    z = np.asarray(student_logits, dtype=float)
    loss = np.zeros(z.shape[:-1])
    grad = np.zeros_like(z)
    n_teachers = len(teacher_dists)
    for i, t in enumerate(teacher_dists):
        idx = list(partition.subsets[i])
        kl, g = weighted_kl_loss(softmax(z[..., idx]), np.asarray(t, dtype=float))
        loss += kl / n_teachers
        grad[..., idx] += g / n_teachers
    return loss, grad


@dataclass(frozen=True)
class AmalgamationConfig:
    method: str = "muka_hard"
    mc: MCConfig = field(default_factory=MCConfig)
    tau: float | None = None
    reweighting: bool = True
    kl_direction: str = "forward"
    train: TrainConfig = field(default_factory=TrainConfig)
    supervision_source: str = "deterministic_forward"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.method == "muka_soft" and self.tau is None:
            object.__setattr__(self, "tau", 0.2)
        if self.method != "muka_soft" and self.tau is not None:
            raise ValueError("tau only applies to muka_soft")
        if self.kl_direction not in ("forward", "reverse"):
            raise ValueError(f"kl_direction must be forward or reverse, got {self.kl_direction!r}")
        if self.supervision_source not in ("deterministic_forward", "mc_average"):
            raise ValueError(f"unknown supervision_source {self.supervision_source!r}")


def build_supervision(teachers, x, partition: LabelPartition,
                      cfg: AmalgamationConfig) -> tuple[SupervisionTarget, UncertaintyReport | None]:
    """Targets for every row of ``x`` under ``cfg.method``."""
    if len(teachers) != partition.num_teachers:
        raise ValueError(f"{len(teachers)} teachers for a {partition.num_teachers}-way partition")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if cfg.method == "vanilla_kd":
        return synthesize_vanilla_kd([t.logits(x) for t in teachers], partition), None
    if cfg.method == "uhc":
        dists = tuple(t.predict_proba(x) for t in teachers)
        mix = sum(pad(p, i, partition) for i, p in enumerate(dists)) / len(dists)
        return SupervisionTarget(mix, np.ones(len(x)), "uhc", teacher_dists=dists), None
    report = assess(teachers, x, cfg.mc, cfg.tau if cfg.tau is not None else 0.2)
    if cfg.supervision_source == "mc_average":
        dists = report.dists
    else:
        dists = tuple(t.predict_proba(x) for t in teachers)
    if cfg.method == "muka_hard":
        return synthesize_hard(report, dists, partition, cfg.reweighting), report
    return synthesize_soft(report, dists, partition, cfg.tau, cfg.reweighting), report


@dataclass
class AmalgamationLog:
    train: TrainLog
    method: str
    mean_weight: float
    all_weights_one: bool
    extras: dict = field(default_factory=dict)


def train_student(student_spec: ModelSpec, x: np.ndarray, target: SupervisionTarget,
                  val: LabeledDataset, partition: LabelPartition, cfg: AmalgamationConfig,
                  fingerprint: str = "") -> tuple[Classifier, TrainLog]:
    """Fit a student to cached targets with the weighted KL (or UHC) objective."""
    if student_spec.num_classes != partition.union_size:
        raise ValueError(
            f"student emits {student_spec.num_classes} classes, union has {partition.union_size}"
        )

    if target.provenance == "uhc":
        def batch_loss(logits, rows):
            return uhc_loss(logits, [p[rows] for p in target.teacher_dists], partition)
    else:
        def batch_loss(logits, rows):
            return weighted_kl_loss(softmax(logits), target.dist[rows], target.weight[rows],
                                    cfg.kl_direction)

    def val_score(params):
        return float((forward(student_spec, params, val.features).argmax(axis=-1) == val.labels).mean())

    log = TrainLog(fingerprint)
    params = fit(student_spec, x, batch_loss, val_score, cfg.train, log)
    return Classifier(student_spec, params), log


def amalgamate(teachers, transfer_set: UnlabeledDataset, val: LabeledDataset,
               partition: LabelPartition, cfg: AmalgamationConfig,
               student_spec: ModelSpec) -> tuple[Classifier, AmalgamationLog, SupervisionTarget]:
    """Train a union-space student from frozen teachers on unlabeled data."""
    if not isinstance(transfer_set, UnlabeledDataset):
        raise TypeError(
            f"transfer set must be an UnlabeledDataset, got {type(transfer_set).__name__}; "
            "strip labels before amalgamation"
        )
    if len(transfer_set) == 0:
        raise ValueError("transfer set is empty")
    x = transfer_set.features
    target, _ = build_supervision(teachers, x, partition, cfg)
    if not np.all(np.isfinite(target.dist)) or not np.all(np.isfinite(target.weight)):
        bad = int(np.flatnonzero(~np.isfinite(target.dist).all(axis=1) | ~np.isfinite(target.weight))[0])
        raise FloatingPointError(f"non-finite supervision for instance {bad}")
    student, tlog = train_student(student_spec, x, target, val, partition, cfg)
    log = AmalgamationLog(
        train=tlog,
        method=cfg.method,
        mean_weight=float(target.weight.mean()),
        all_weights_one=bool(np.all(target.weight == 1.0)),
    )
    return student, log, target


def write_supervision_csv(path, target: SupervisionTarget, method: str):
    """One row per instance: ``instance_id,v,method,p_0,...``.

    ``v`` is the confidence margin; methods without one write the unit weight.
    """
    k = target.dist.shape[1]
    v = target.v if target.v is not None else target.weight
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["instance_id", "v", "method", *(f"p_{j}" for j in range(k))])
        for i, (v, row) in enumerate(zip(v.tolist(), target.dist.tolist())):
            w.writerow([i, repr(v), method, *map(repr, row)])

