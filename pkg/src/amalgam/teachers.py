"""Supervised training of teachers and of the full-label oracle."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledDataset, LabelPartition, restrict
from .nn_core import (
    DropoutMask,
    ModelSpec,
    OptimizerState,
    backward,
    dumps_checkpoint,
    forward,
    init_params,
    loads_checkpoint,
    optimizer_step,
    softmax,
)

TEACHER_HEADER = "#amalgam-teacher v1"


class Classifier:
    """A trained network: spec plus a read-only parameter vector."""

    def __init__(self, spec: ModelSpec, params: np.ndarray):
        params = np.array(params, dtype=float)
        if params.shape != (spec.num_params,):
            raise ValueError(f"expected {spec.num_params} parameters, got {params.shape}")
        params.flags.writeable = False
        self.spec = spec
        self.params = params

    def logits(self, x, mask: DropoutMask | None = None) -> np.ndarray:
        return forward(self.spec, self.params, x, mask)

    def predict_proba(self, x) -> np.ndarray:
        return softmax(self.logits(x))

    def predict(self, x) -> np.ndarray:
        return self.predict_proba(x).argmax(axis=-1)


class TeacherModel(Classifier):
    """A classifier over the subset ``union_labels`` of the union label space."""

    def __init__(self, spec: ModelSpec, params: np.ndarray, index: int, union_labels):
        super().__init__(spec, params)
        self.index = int(index)
        self.union_labels = tuple(int(y) for y in union_labels)
        if spec.num_classes != len(self.union_labels):
            raise ValueError(
                f"teacher emits {spec.num_classes} classes but is bound to {len(self.union_labels)} labels"
            )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    eval_interval: int = 100
    seed: int = 0
    patience: int | None = None
    # overconfidence knob: extra epochs after model selection, without dropout
    extra_epochs: int = 0
    extra_lr_scale: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.eval_interval < 1:
            raise ValueError(f"eval_interval must be >= 1, got {self.eval_interval}")
        if self.extra_epochs < 0:
            raise ValueError("extra_epochs must be >= 0")


@dataclass
class TrainLog:
    dataset_fingerprint: str
    evals: list[dict] = field(default_factory=list)
    best_step: int = 0
    best_val_accuracy: float = float("nan")
    extra_steps: int = 0


def _val_accuracy(spec, params, val: LabeledDataset) -> float:
    return float((forward(spec, params, val.features).argmax(axis=-1) == val.labels).mean())


def fit(spec: ModelSpec, features: np.ndarray, batch_loss, val_score, cfg: TrainConfig,
        log: TrainLog, init: np.ndarray | None = None) -> np.ndarray:
    """Minibatch training with best-validation checkpoint selection.

    ``batch_loss(logits, rows)`` returns per-row losses and their gradient
    w.r.t. ``logits``.  ``val_score(params)`` is maximised; it is evaluated
    every ``cfg.eval_interval`` steps and after the last step.  Returns the
    best parameters seen, then applies ``cfg.extra_epochs`` of dropout-free
    training on top of them when requested.
    """
    rng = np.random.default_rng(cfg.seed)
    params = init_params(spec, rng) if init is None else np.array(init, dtype=float)
    opt = OptimizerState(cfg.optimizer, cfg.learning_rate)
    n = features.shape[0]
    best, best_score, stale, step = params.copy(), -np.inf, 0, 0
    running = []

    def train_step(params, opt, rows, use_dropout):
        mask = None
        if use_dropout and spec.dropout_rate > 0:
            mask = DropoutMask.sample(spec, rng, (rows.size,))
        x = features[rows]
        losses, dlogits = batch_loss(forward(spec, params, x, mask), rows)
        if not np.all(np.isfinite(losses)):
            raise FloatingPointError(f"non-finite loss at step {step}")
        running.append(float(np.mean(losses)))
        optimizer_step(opt, params, backward(spec, params, x, mask, dlogits / rows.size), spec)

    def evaluate():
        nonlocal best, best_score, stale
        score = val_score(params)
        log.evals.append({
            "step": step,
            "val_accuracy": score,
            "train_loss": float(np.mean(running)) if running else float("nan"),
        })
        running.clear()
        if score > best_score:
            best, best_score, stale = params.copy(), score, 0
            log.best_step, log.best_val_accuracy = step, score
        else:
            stale += 1
        return cfg.patience is not None and stale >= cfg.patience

    stopped = False
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            train_step(params, opt, order[lo:lo + cfg.batch_size], True)
            step += 1
            if step % cfg.eval_interval == 0 and evaluate():
                stopped = True
                break
        if stopped:
            break
    if not stopped and step % cfg.eval_interval:
        evaluate()

    params = best
    if cfg.extra_epochs:
        opt = OptimizerState(cfg.optimizer, cfg.learning_rate * cfg.extra_lr_scale)
        for _ in range(cfg.extra_epochs):
            order = rng.permutation(n)
            for lo in range(0, n, cfg.batch_size):
                train_step(params, opt, order[lo:lo + cfg.batch_size], False)
                log.extra_steps += 1
    return params


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    p = softmax(logits)
    rows = np.arange(labels.size)
    losses = -np.log(np.maximum(p[rows, labels], 1e-300))
    p[rows, labels] -= 1.0
    return losses, p


def train_classifier(spec: ModelSpec, train: LabeledDataset, val: LabeledDataset,
                     cfg: TrainConfig) -> tuple[Classifier, TrainLog]:
    """Cross-entropy training; returns the best-validation checkpoint and its log."""
    if train.num_classes != spec.num_classes or val.num_classes != spec.num_classes:
        raise ValueError(
            f"dataset has {train.num_classes} classes, network emits {spec.num_classes}"
        )
    if train.input_dim != spec.input_dim:
        raise ValueError(f"dataset width {train.input_dim} != network input {spec.input_dim}")
    log = TrainLog(train.fingerprint())
    params = fit(
        spec,
        train.features,
        lambda logits, rows: cross_entropy(logits, train.labels[rows]),
        lambda p: _val_accuracy(spec, p, val),
        cfg,
        log,
    )
    return Classifier(spec, params), log


def train_teacher(spec: ModelSpec, train: LabeledDataset, val: LabeledDataset,
                  partition: LabelPartition, index: int,
                  cfg: TrainConfig) -> tuple[TeacherModel, TrainLog]:
    """Train teacher ``index`` on the rows of its label subset only."""
    model, log = train_classifier(
        spec, restrict(train, partition, index), restrict(val, partition, index), cfg
    )
    return TeacherModel(spec, model.params, index, partition.subsets[index]), log


def train_oracle(train: LabeledDataset, val: LabeledDataset, spec: ModelSpec,
                 cfg: TrainConfig) -> tuple[Classifier, TrainLog]:
    """Supervised model over the whole union label space."""
    return train_classifier(spec, train, val, cfg)


def dumps_teacher(teacher: TeacherModel) -> str:
    head = [
        TEACHER_HEADER,
        f"partition_index={teacher.index}",
        f"union_labels={','.join(map(str, teacher.union_labels))}",
    ]
    return "\n".join(head) + "\n" + dumps_checkpoint(teacher.spec, teacher.params)


def loads_teacher(text: str) -> TeacherModel:
    lines = text.splitlines()
    if not lines or lines[0].strip() != TEACHER_HEADER:
        got = lines[0] if lines else "<empty>"
        raise ValueError(f"line 1: expected header {TEACHER_HEADER!r}, got {got!r}")
    values = {}
    for n, key in ((2, "partition_index"), (3, "union_labels")):
        k, sep, v = lines[n - 1].partition("=") if len(lines) >= n else ("", "", "")
        if k != key or not sep:
            raise ValueError(f"line {n}: expected {key}=..., got {lines[n - 1] if len(lines) >= n else ''!r}")
        values[key] = v
    spec, params = loads_checkpoint("\n".join(lines[3:]), first_line=4)
    return TeacherModel(
        spec, params, int(values["partition_index"]),
        [int(y) for y in values["union_labels"].split(",")],
    )


def save_teacher(path, teacher: TeacherModel):
    Path(path).write_text(dumps_teacher(teacher))


def load_teacher(path) -> TeacherModel:
    return loads_teacher(Path(path).read_text())
