"""Monte-Carlo dropout predictions and the teacher confidence scores built on them."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn_core import DropoutMask, entropy, softmax

_CHUNK = 512


@dataclass(frozen=True)
class MCConfig:
    """``num_samples`` stochastic passes at ``dropout_rate`` (default: the model's own).

    ``MCConfig(1, dropout_rate=0.0)`` is the plain deterministic prediction.
    """

    num_samples: int = 16
    dropout_rate: float | None = None
    base_seed: int = 0

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError(f"num_samples must be >= 1, got {self.num_samples}")
        if self.dropout_rate is not None and not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @classmethod
    def deterministic(cls) -> "MCConfig":
        return cls(1, 0.0)


def pass_uniforms(base_seed: int, teacher: int, instance: int, passes: int, width: int) -> np.ndarray:
    """Uniforms for passes ``0..passes-1`` of one (teacher, instance) pair.

    Row ``k`` depends only on ``(base_seed, teacher, instance, k)``, so results
    do not change with evaluation order or with the number of passes drawn.
    """
    rng = np.random.default_rng([base_seed, teacher, instance])
    return rng.random((passes, width))


def mc_dropout_predict(model, x, mc: MCConfig, teacher_index: int | None = None,
                       instance_ids=None) -> np.ndarray:
    """Average of ``mc.num_samples`` dropout-perturbed softmax outputs.

    ``x`` is one feature vector or an ``(n, d)`` batch; ``instance_ids``
    defaults to the row positions.  At dropout rate 0 the deterministic
    softmax is returned unchanged.
    """
    spec = model.spec
    rate = spec.dropout_rate if mc.dropout_rate is None else mc.dropout_rate
    x = np.asarray(x, dtype=float)
    if rate == 0.0 or not spec.hidden_dims:
        return softmax(model.logits(x))
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    n = x2.shape[0]
    ids = np.arange(n) if instance_ids is None else np.asarray(instance_ids)
    if teacher_index is None:
        teacher_index = getattr(model, "index", 0)
    width = sum(spec.hidden_dims)
    out = np.empty((n, spec.num_classes))
    for lo in range(0, n, _CHUNK):
        rows = slice(lo, min(n, lo + _CHUNK))
        u = np.stack([
            pass_uniforms(mc.base_seed, teacher_index, int(i), mc.num_samples, width)
            for i in ids[rows]
        ], axis=1)  # (K, rows, width)
        mask = DropoutMask.from_uniforms(spec, u, rate)
        out[rows] = softmax(model.logits(x2[rows], mask)).mean(axis=0)
    return out[0] if single else out


def model_uncertainty(p) -> np.ndarray:
    return entropy(p)


def confidence(u, class_count: int) -> np.ndarray:
    """``1 - u / ln(class_count)``, clamped into ``[0, 1]``."""
    if class_count < 2:
        raise ValueError(f"confidence needs >= 2 classes, got {class_count}")
    u = np.asarray(u, dtype=float)
    top = math.log(class_count)
    if np.any(u < -1e-9) or np.any(u > top + 1e-9):
        raise ValueError(f"uncertainty outside [0, ln {class_count}]")
    return 1.0 - np.clip(u, 0.0, top) / top


def soft_weights(c, tau: float) -> np.ndarray:
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    return softmax(np.asarray(c, dtype=float) / tau)


def margin_weight(c) -> np.ndarray:
    """Gap between the largest and second-largest confidence (1 for a lone teacher)."""
    c = np.asarray(c, dtype=float)
    if c.shape[-1] == 0:
        raise ValueError("margin_weight needs at least one teacher")
    if c.shape[-1] == 1:
        return np.ones(c.shape[:-1])
    top2 = np.sort(c, axis=-1)[..., -2:]
    return top2[..., 1] - top2[..., 0]


@dataclass(frozen=True, eq=False)
class UncertaintyReport:
    """Per-instance teacher assessment; leading axis is the instance.

    ``dists[i]`` has shape ``(n, |Y_i|)``; ``u``, ``c`` and ``w`` have shape
    ``(n, N)``.
    """

    dists: tuple[np.ndarray, ...]
    u: np.ndarray
    c: np.ndarray
    w: np.ndarray
    c_max: np.ndarray
    c_sec: np.ndarray
    v: np.ndarray
    selected: np.ndarray
    tau: float

    def __len__(self):
        return self.u.shape[0]


def assess(teachers, x, mc: MCConfig, tau: float = 0.2, instance_ids=None) -> UncertaintyReport:
    """MC-dropout uncertainty, confidence, soft weights and margin for every instance.

    Ties in confidence go to the lowest position in ``teachers``.  Mask
    streams are keyed by each teacher's own ``index`` (its position when it
    has none), so reordering the list permutes the outputs and nothing else.
    """
    if not teachers:
        raise ValueError("assess needs at least one teacher")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    dists = tuple(
        mc_dropout_predict(t, x, mc, teacher_index=getattr(t, "index", i), instance_ids=instance_ids)
        for i, t in enumerate(teachers)
    )
    u = np.stack([model_uncertainty(p) for p in dists], axis=1)
    c = np.stack([confidence(u[:, i], t.spec.num_classes) for i, t in enumerate(teachers)], axis=1)
    if len(teachers) == 1:
        c_max, c_sec = c[:, 0], np.zeros(len(x))
    else:
        top2 = np.sort(c, axis=1)[:, -2:]
        c_max, c_sec = top2[:, 1], top2[:, 0]
    return UncertaintyReport(
        dists=dists,
        u=u,
        c=c,
        w=soft_weights(c, tau),
        c_max=c_max,
        c_sec=c_sec,
        v=margin_weight(c),
        selected=np.argmax(c, axis=1),
        tau=tau,
    )


def calibration_error(confidences, correct, num_bins: int = 10) -> float:
    """Expected calibration error over equal-width confidence bins.

    Bin ``b`` covers ``(b/B, (b+1)/B]``; confidence 0 falls in the first bin.
    """
    if num_bins < 1:
        raise ValueError(f"num_bins must be >= 1, got {num_bins}")
    conf = np.asarray(confidences, dtype=float)
    correct = np.asarray(correct, dtype=float)
    if conf.size == 0:
        raise ValueError("calibration error of an empty set is undefined")
    bins = np.clip(np.ceil(conf * num_bins).astype(int) - 1, 0, num_bins - 1)
    total = 0.0
    for b in np.unique(bins):
        sel = bins == b
        total += sel.sum() / conf.size * abs(correct[sel].mean() - conf[sel].mean())
    return float(total)


def ece(model, data, num_bins: int = 10) -> float:
    """Calibration error of ``model``'s max-probability predictions on ``data``."""
    if len(data) == 0:
        raise ValueError("calibration error of an empty set is undefined")
    p = model.predict_proba(data.features)
    return calibration_error(p.max(axis=1), p.argmax(axis=1) == data.labels, num_bins)
