"""Accuracy and diagnostic probes over frozen models.

A teacher is "correct" for an instance when the instance's true label lies
in that teacher's label subset.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .amalgamation import SupervisionTarget, _union_scatter, pad
from .data import LabeledDataset, LabelPartition
from .nn_core import PROB_EPS, softmax
from .uncertainty import MCConfig, assess, calibration_error

HIST_BINS = 50


class PaddedTeacher:
    """A teacher used on its own over the union space (zeros outside its subset)."""

    def __init__(self, teacher, partition: LabelPartition):
        self.teacher = teacher
        self.partition = partition

    def predict_proba(self, x):
        return pad(self.teacher.predict_proba(x), self.teacher.index, self.partition)


class Ensemble:
    """Softmax over all teachers' logits concatenated into union order."""

    def __init__(self, teachers, partition: LabelPartition):
        self.teachers = list(teachers)
        self.partition = partition

    def predict_proba(self, x):
        x = np.atleast_2d(x)
        return softmax(_union_scatter([t.logits(x) for t in self.teachers], self.partition))


def accuracy(model, data: LabeledDataset) -> float:
    if len(data) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    p = model.predict_proba(data.features)
    if p.shape[1] != data.num_classes:
        raise ValueError(f"model emits {p.shape[1]} classes, data has {data.num_classes}")
    return float(np.mean(p.argmax(axis=1) == data.labels))


def confusion_matrix(model, data: LabeledDataset) -> np.ndarray:
    """Counts with rows indexed by true label and columns by prediction."""
    pred = model.predict_proba(data.features).argmax(axis=1)
    out = np.zeros((data.num_classes, data.num_classes), dtype=np.int64)
    np.add.at(out, (data.labels, pred), 1)
    return out


@dataclass(eq=False)
class ProbeResult:
    """Per-instance records (column arrays) plus aggregates derived from them."""

    name: str
    records: dict[str, np.ndarray]
    aggregates: dict
    aggregator: Callable[[dict], dict] = field(repr=False)

    def check(self) -> bool:
        """True when the stored aggregates equal a fresh recomputation."""
        return _json_ready(self.aggregator(self.records)) == _json_ready(self.aggregates)

    def write_csv(self, path, columns=None):
        columns = list(columns or self.records)
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(columns)
            for row in zip(*(self.records[c].tolist() for c in columns)):
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])

    def write_json(self, path):
        with open(path, "w") as f:
            json.dump(_json_ready(self.aggregates), f, indent=2, sort_keys=True)
            f.write("\n")


def _json_ready(obj):
    if isinstance(obj, dict):
        return {str(k): _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return None if math.isnan(f) else f
    return obj


def _mean(a) -> float:
    return float(np.mean(a)) if len(a) else float("nan")


# -- supervision quality ------------------------------------------------------

def _kl_rows(p, q) -> np.ndarray:
    """KL(p || q) per row with q clamped at PROB_EPS."""
    p = np.asarray(p, dtype=float)
    logq = np.log(np.maximum(q, PROB_EPS))
    logp = np.log(np.where(p > 0, p, 1.0))
    return np.where(p > 0, p * (logp - logq), 0.0).sum(axis=1)


def _aggregate_quality(rec):
    method, v, kl = rec["method"], rec["v"], rec["kl"]
    soft = method == "muka_soft"
    vkd = method == "vanilla_kd"
    soft_v = v[soft]
    out = {}
    if soft.any():
        out["muka_soft_v_ge_0.5"] = _mean(kl[soft][soft_v >= 0.5])
        out["muka_soft_v_lt_0.5"] = _mean(kl[soft][soft_v < 0.5])
        out["muka_soft_all"] = _mean(kl[soft])
        out["count_v_ge_0.5"] = int((soft_v >= 0.5).sum())
    if vkd.any():
        out["vanilla_kd"] = _mean(kl[vkd])
        if soft.any():
            # vanilla rows share instance order with soft rows
            out["vanilla_kd_on_v_ge_0.5"] = _mean(kl[vkd][soft_v >= 0.5])
            out["vanilla_kd_on_v_lt_0.5"] = _mean(kl[vkd][soft_v < 0.5])
    return out


def supervision_quality(targets: dict[str, SupervisionTarget], oracle, x) -> ProbeResult:
    """KL from the oracle's distribution to each method's synthesised target.

    Hard targets are rejected: their zeros make the divergence meaningless.
    Soft instances are grouped by the confidence margin ``v`` at 0.5, and
    Vanilla KD is reported on the same two groups.
    """
    for name, t in targets.items():
        if name == "muka_hard" or t.provenance == "hard":
            raise ValueError("supervision quality is unsupported for hard targets (zeros outside one subset)")
        if name not in ("muka_soft", "vanilla_kd"):
            raise ValueError(f"unsupported method {name!r} for supervision quality")
    golden = oracle.predict_proba(np.atleast_2d(x))
    n = golden.shape[0]
    soft = targets.get("muka_soft")
    v_soft = soft.v if soft is not None else np.full(n, np.nan)
    ids, methods, vs, kls = [], [], [], []
    for name in ("muka_soft", "vanilla_kd"):
        if name not in targets:
            continue
        t = targets[name]
        ids.append(np.arange(n))
        methods.append(np.full(n, name, dtype=object))
        vs.append(v_soft)
        kls.append(_kl_rows(golden, t.dist))
    rec = {
        "instance_id": np.concatenate(ids),
        "method": np.concatenate(methods),
        "v": np.concatenate(vs),
        "kl": np.concatenate(kls),
    }
    return ProbeResult("supervision_quality", rec, _aggregate_quality(rec), _aggregate_quality)


# -- uncertainty histograms -----------------------------------------------------

def _aggregate_hist(rec):
    out = {}
    edges = np.linspace(0.0, 1.0, HIST_BINS + 1)
    for mode in ("single", "mc"):
        m = rec["mode"] == mode
        u, correct = rec["u_normalized"][m], rec["is_correct_teacher"][m]
        mc, mw = _mean(u[correct]), _mean(u[~correct])
        out[mode] = {
            "mean_u_correct": mc,
            "mean_u_wrong": mw,
            "separation": mw - mc,
            "hist_correct": np.histogram(np.clip(u[correct], 0, 1), edges)[0].tolist(),
            "hist_wrong": np.histogram(np.clip(u[~correct], 0, 1), edges)[0].tolist(),
        }
    return out


def uncertainty_histogram(teachers, partition: LabelPartition, data: LabeledDataset,
                          mc: MCConfig) -> ProbeResult:
    """Normalised uncertainty of correct and wrong teachers, single pass vs MC."""
    owner = partition.owner(data.labels)
    n, k = len(data), len(teachers)
    cols = {"instance_id": [], "teacher_id": [], "mode": [], "u_normalized": [], "is_correct_teacher": []}
    for mode, cfg in (("single", MCConfig.deterministic()), ("mc", mc)):
        rep = assess(teachers, data.features, cfg)
        u_norm = 1.0 - rep.c
        cols["instance_id"].append(np.repeat(np.arange(n), k))
        cols["teacher_id"].append(np.tile(np.arange(k), n))
        cols["mode"].append(np.full(n * k, mode, dtype=object))
        cols["u_normalized"].append(u_norm.reshape(-1))
        cols["is_correct_teacher"].append((owner[:, None] == np.arange(k)[None, :]).reshape(-1))
    rec = {c: np.concatenate(v) for c, v in cols.items()}
    return ProbeResult("uncertainty_histogram", rec, _aggregate_hist(rec), _aggregate_hist)


def write_histogram_csvs(result: ProbeResult, directory):
    """One ``instance_id,teacher_id,u_normalized,is_correct_teacher`` file per mode."""
    paths = []
    for mode in ("single", "mc"):
        m = result.records["mode"] == mode
        sub = ProbeResult(result.name, {c: a[m] for c, a in result.records.items()}, {}, dict)
        path = Path(directory) / f"uncertainty_{mode}.csv"
        sub.write_csv(path, ["instance_id", "teacher_id", "u_normalized", "is_correct_teacher"])
        paths.append(path)
    return paths


# -- selection errors --------------------------------------------------------

def _aggregate_selection(rec):
    wrong = ~rec["correct_selection"]
    labels = rec["label"][wrong]
    return {
        "num_instances": int(rec["label"].size),
        "num_errors": int(wrong.sum()),
        "selection_accuracy": _mean(rec["correct_selection"]),
        "mean_v_errors": _mean(rec["v"][wrong]),
        "mean_v_all": _mean(rec["v"]),
        "label_histogram": np.bincount(labels, minlength=int(rec["num_classes"][0])).tolist()
        if rec["label"].size else [],
    }


def selection_error_analysis(teachers, partition: LabelPartition, data: LabeledDataset,
                             mc: MCConfig, tau: float = 0.2) -> ProbeResult:
    """Where the most confident teacher does not own the true label."""
    rep = assess(teachers, data.features, mc, tau)
    owner = partition.owner(data.labels)
    rec = {
        "instance_id": np.arange(len(data)),
        "label": data.labels.copy(),
        "selected": rep.selected,
        "correct_selection": rep.selected == owner,
        "v": rep.v,
        "num_classes": np.full(len(data), data.num_classes),
    }
    return ProbeResult("selection_errors", rec, _aggregate_selection(rec), _aggregate_selection)


def selection_accuracy(teachers, partition: LabelPartition, data: LabeledDataset,
                       mc: MCConfig) -> float:
    rep = assess(teachers, data.features, mc)
    return float(np.mean(rep.selected == partition.owner(data.labels)))


def teacher_ood_ece(teachers, partition: LabelPartition, data: LabeledDataset,
                    num_bins: int = 10) -> float:
    """Mean calibration error of each teacher on rows outside its subset.

    Every such prediction is wrong, so the value is the mean top-class confidence.
    """
    owner = partition.owner(data.labels)
    vals = []
    for i, t in enumerate(teachers):
        rows = owner != i
        p = t.predict_proba(data.features[rows])
        vals.append(calibration_error(p.max(axis=1), np.zeros(rows.sum(), bool), num_bins))
    return float(np.mean(vals))
