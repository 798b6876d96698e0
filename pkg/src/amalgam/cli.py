"""Config-driven experiment runner.

Output layout under ``--out``::

    seed_<s>/data/{train,val,test}.csv, partition.txt
    seed_<s>/teachers/teacher_<i>.txt, teacher_<i>_log.json, oracle.txt, oracle_log.json
    seed_<s>/students/<method>.txt, <method>_log.json, supervision_<method>.csv
    metrics.json
    probes/<name>/...
    sweep_<parameter>.csv, sweep_<parameter>.json
    MANIFEST

MANIFEST (sha256 of every other file) is deleted when a command starts and
written only after it finishes, so a directory without one is incomplete.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import experiments as ex
from .amalgamation import amalgamate, build_supervision, write_supervision_csv
from .config import PROBES, ConfigError, RunConfig, load_config, with_seeds
from .data import LabelPartition, load_dataset, save_dataset, strip_labels
from .evaluation import (
    Ensemble,
    PaddedTeacher,
    ProbeResult,
    _json_ready,
    accuracy,
    selection_accuracy,
    selection_error_analysis,
    supervision_quality,
    uncertainty_histogram,
    write_histogram_csvs,
)
from .nn_core import load_checkpoint, save_checkpoint
from .teachers import Classifier, load_teacher, save_teacher
from .uncertainty import MCConfig, calibration_error

MANIFEST = "MANIFEST"
PARTITION_HEADER = "#amalgam-partition v1"


class ArtifactError(RuntimeError):
    """A file an earlier stage should have produced is missing or malformed."""


# -- small file helpers --------------------------------------------------------

def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_json_ready(obj), indent=2, sort_keys=True) + "\n")


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise ArtifactError(f"missing {path}; run `{stage}` first")
    return path


def dumps_partition(p: LabelPartition) -> str:
    lines = [f"{PARTITION_HEADER} union={p.union_size}"]
    lines += [",".join(map(str, s)) for s in p.subsets]
    return "\n".join(lines) + "\n"


def loads_partition(text: str) -> LabelPartition:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(PARTITION_HEADER + " union="):
        raise ArtifactError(f"line 1: expected '{PARTITION_HEADER} union=<n>'")
    union = int(lines[0].split("union=")[1])
    return LabelPartition(union, tuple(tuple(int(v) for v in ln.split(",")) for ln in lines[1:] if ln))


def write_manifest(out: Path) -> Path:
    entries = []
    for path in sorted(out.rglob("*")):
        if path.is_file() and path.name != MANIFEST:
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            entries.append(f"{digest}  {path.relative_to(out).as_posix()}")
    target = out / MANIFEST
    target.write_text("\n".join(entries) + "\n")
    return target


def _log_dict(log) -> dict:
    return asdict(log)


# -- per-seed artifact access ------------------------------------------------

class SeedArtifacts:
    def __init__(self, out: Path, seed: int):
        self.seed = seed
        self.root = out / f"seed_{seed}"
        self.data = self.root / "data"
        self.teachers = self.root / "teachers"
        self.students = self.root / "students"

    def splits(self):
        return tuple(load_dataset(_require(self.data / f"{n}.csv", "gen-data"))
                     for n in ("train", "val", "test"))

    def partition(self) -> LabelPartition:
        return loads_partition(_require(self.data / "partition.txt", "gen-data").read_text())

    def teacher_models(self, n: int):
        return [load_teacher(_require(self.teachers / f"teacher_{i}.txt", "train-teachers"))
                for i in range(n)]

    def oracle(self) -> Classifier:
        return Classifier(*load_checkpoint(_require(self.teachers / "oracle.txt", "train-teachers")))

    def student(self, method: str) -> Classifier:
        return Classifier(*load_checkpoint(_require(self.students / f"{method}.txt", "amalgamate")))

    def replicate(self, with_oracle: bool = True) -> ex.Replicate:
        train, val, test = self.splits()
        partition = self.partition()
        rep = ex.Replicate(self.seed, train, val, test, partition,
                           self.teacher_models(partition.num_teachers), [])
        if with_oracle:
            rep.oracle = self.oracle()
        return rep


# -- commands -----------------------------------------------------------------

def cmd_gen_data(run: RunConfig, out: Path):
    cfg = run.experiment
    for s in cfg.seeds:
        a = SeedArtifacts(out, s)
        a.data.mkdir(parents=True, exist_ok=True)
        partition = ex.make_partition(cfg, s)
        for name, ds in zip(("train", "val", "test"), ex.make_data(cfg, s, partition)):
            save_dataset(a.data / f"{name}.csv", ds)
        (a.data / "partition.txt").write_text(dumps_partition(partition))


def cmd_train_teachers(run: RunConfig, out: Path):
    cfg = run.experiment
    for s in cfg.seeds:
        a = SeedArtifacts(out, s)
        train, val, _ = a.splits()
        partition = a.partition()
        a.teachers.mkdir(parents=True, exist_ok=True)
        for i, (teacher, log) in enumerate(ex.train_teachers(cfg, s, train, val, partition)):
            save_teacher(a.teachers / f"teacher_{i}.txt", teacher)
            _write_json(a.teachers / f"teacher_{i}_log.json", _log_dict(log))
        oracle, log = ex.fit_oracle(cfg, s, train, val)
        save_checkpoint(a.teachers / "oracle.txt", oracle.spec, oracle.params)
        _write_json(a.teachers / "oracle_log.json", _log_dict(log))


def cmd_amalgamate(run: RunConfig, out: Path):
    cfg = run.experiment
    for s in cfg.seeds:
        a = SeedArtifacts(out, s)
        rep = a.replicate(with_oracle=False)
        a.students.mkdir(parents=True, exist_ok=True)
        for method in cfg.methods:
            acfg = ex.amalgamation_config(cfg, s, method)
            student, log, target = amalgamate(rep.teachers, strip_labels(rep.train), rep.val,
                                              rep.partition, acfg, ex.student_spec(cfg))
            save_checkpoint(a.students / f"{method}.txt", student.spec, student.params)
            _write_json(a.students / f"{method}_log.json", _log_dict(log))
            write_supervision_csv(a.students / f"supervision_{method}.csv", target, method)


def evaluate_replicate(run: RunConfig, a: SeedArtifacts) -> dict[str, float]:
    rep = a.replicate()
    for method in run.experiment.methods:
        rep.students[method] = a.student(method)
    return {**rep.baseline_accuracies(), **rep.student_accuracies()}


def cmd_evaluate(run: RunConfig, out: Path) -> dict:
    per_seed = [evaluate_replicate(run, SeedArtifacts(out, s)) for s in run.experiment.seeds]
    metrics = ex.summarize(per_seed)
    _write_json(out / "metrics.json", metrics)
    return metrics


# probes ---

def _probe_supervision_quality(run, a, directory):
    cfg = run.experiment
    rep = a.replicate()
    x = rep.train.features
    targets = {
        m: build_supervision(rep.teachers, x, rep.partition, ex.amalgamation_config(cfg, a.seed, m))[0]
        for m in ("muka_soft", "vanilla_kd")
    }
    res = supervision_quality(targets, rep.oracle, x)
    res.write_csv(directory / f"seed_{a.seed}.csv")
    return res


def _probe_uncertainty_histogram(run, a, directory):
    cfg = run.experiment
    rep = a.replicate(with_oracle=False)
    res = uncertainty_histogram(rep.teachers, rep.partition, rep.test, MCConfig(cfg.mc_samples, base_seed=a.seed))
    sub = directory / f"seed_{a.seed}"
    sub.mkdir(parents=True, exist_ok=True)
    write_histogram_csvs(res, sub)
    return res


def _probe_selection_errors(run, a, directory):
    cfg = run.experiment
    rep = a.replicate(with_oracle=False)
    res = selection_error_analysis(rep.teachers, rep.partition, rep.test,
                                   MCConfig(cfg.mc_samples, base_seed=a.seed), cfg.tau)
    res.write_csv(directory / f"seed_{a.seed}.csv", ["instance_id", "label", "selected", "correct_selection", "v"])
    return res


def _evaluated_models(run, a):
    rep = a.replicate()
    models = {f"teacher_{i + 1}": PaddedTeacher(t, rep.partition) for i, t in enumerate(rep.teachers)}
    models["ensemble"] = Ensemble(rep.teachers, rep.partition)
    models["supervised"] = rep.oracle
    for m in run.experiment.methods:
        models[m] = a.student(m)
    return rep, models


def _aggregate_confusion(rec):
    k = int(rec["num_classes"][0])
    out = {}
    for name in sorted(set(rec["model"].tolist())):
        sel = rec["model"] == name
        mat = np.zeros((k, k), dtype=np.int64)
        np.add.at(mat, (rec["label"][sel], rec["predicted"][sel]), 1)
        out[name] = mat.tolist()
    return out


def _probe_confusion_matrix(run, a, directory):
    rep, models = _evaluated_models(run, a)
    n = len(rep.test)
    cols = {"instance_id": [], "model": [], "label": [], "predicted": []}
    for name, model in models.items():
        cols["instance_id"].append(np.arange(n))
        cols["model"].append(np.full(n, name, dtype=object))
        cols["label"].append(rep.test.labels)
        cols["predicted"].append(model.predict_proba(rep.test.features).argmax(axis=1))
    rec = {c: np.concatenate(v) for c, v in cols.items()}
    rec["num_classes"] = np.full(rec["label"].size, rep.test.num_classes)
    res = ProbeResult("confusion_matrix", rec, _aggregate_confusion(rec), _aggregate_confusion)
    res.write_csv(directory / f"seed_{a.seed}.csv", ["instance_id", "model", "label", "predicted"])
    return res


def _aggregate_ece(rec, num_bins):
    out = {}
    for name in sorted(set(rec["model"].tolist())):
        sel = rec["model"] == name
        entry = {"ece": calibration_error(rec["confidence"][sel], rec["correct"][sel], num_bins)}
        ood = sel & ~rec["in_specialty"]
        if ood.any() and name.startswith("teacher_"):
            entry["ece_out_of_specialty"] = calibration_error(
                rec["confidence"][ood], rec["correct"][ood], num_bins)
        out[name] = entry
    return out


def _probe_ece(run, a, directory):
    rep, models = _evaluated_models(run, a)
    owner = rep.partition.owner(rep.test.labels)
    n = len(rep.test)
    cols = {"instance_id": [], "model": [], "confidence": [], "correct": [], "in_specialty": []}
    for name, model in models.items():
        p = model.predict_proba(rep.test.features)
        if name.startswith("teacher_"):
            i = int(name.split("_")[1]) - 1
            # a teacher's own confidence is over its subset, which padding preserves
            in_spec = owner == i
        else:
            in_spec = np.ones(n, dtype=bool)
        cols["instance_id"].append(np.arange(n))
        cols["model"].append(np.full(n, name, dtype=object))
        cols["confidence"].append(p.max(axis=1))
        cols["correct"].append(p.argmax(axis=1) == rep.test.labels)
        cols["in_specialty"].append(in_spec)
    rec = {c: np.concatenate(v) for c, v in cols.items()}
    bins = run.ece_bins

    def agg(r):
        return _aggregate_ece(r, bins)

    res = ProbeResult("ece", rec, agg(rec), agg)
    res.write_csv(directory / f"seed_{a.seed}.csv")
    return res


_PROBES = {
    "supervision_quality": _probe_supervision_quality,
    "uncertainty_histogram": _probe_uncertainty_histogram,
    "selection_errors": _probe_selection_errors,
    "confusion_matrix": _probe_confusion_matrix,
    "ece": _probe_ece,
}
assert tuple(_PROBES) == PROBES


def cmd_probe(run: RunConfig, out: Path, name: str) -> dict:
    if name not in _PROBES:
        raise ConfigError(f"unknown probe {name!r}; available probes: {', '.join(PROBES)}")
    directory = out / "probes" / name
    directory.mkdir(parents=True, exist_ok=True)
    summary = {}
    for s in run.experiment.seeds:
        res = _PROBES[name](run, SeedArtifacts(out, s), directory)
        if not res.check():
            raise RuntimeError(f"probe {name}: aggregates do not match records for seed {s}")
        res.write_json(directory / f"seed_{s}.json")
        summary[f"seed_{s}"] = res.aggregates
    _write_json(directory / "summary.json", summary)
    return summary


def cmd_sweep(run: RunConfig, out: Path, parameter: str | None = None, values=None,
              method: str | None = None) -> list[dict]:
    """Retrain students across ``values`` of tau or K on the stored teachers."""
    cfg = run.experiment
    parameter = parameter or run.sweep_parameter
    if parameter not in ("tau", "K"):
        raise ConfigError(f"sweep parameter must be 'tau' or 'K', got {parameter!r}")
    values = tuple(values if values is not None else run.sweep_values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    method = method or run.sweep_method or ("muka_soft" if parameter == "tau" else "muka_hard")
    if parameter == "tau" and method != "muka_soft":
        raise ConfigError("a tau sweep only applies to muka_soft")
    rows = []
    for s in cfg.seeds:
        rep = SeedArtifacts(out, s).replicate(with_oracle=False)
        for value in values:
            if parameter == "tau":
                acc = ex.train_student_for(cfg, rep, method, tau=float(value))
                sel = float("nan")
            else:
                k = int(value)
                if k != value or k < 0:
                    raise ConfigError(f"K must be a non-negative integer, got {value}")
                acc = ex.train_student_for(cfg, rep, method, mc_samples=k)
                mc = MCConfig.deterministic() if k == 0 else MCConfig(k, base_seed=s)
                sel = selection_accuracy(rep.teachers, rep.partition, rep.test, mc)
            rows.append({"parameter": parameter, "value": float(value), "seed": s, "method": method,
                         "accuracy": acc, "selection_accuracy": sel})
    path = out / f"sweep_{parameter}.csv"
    out.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(v) for k, v in r.items()})
    summary = {}
    for value in values:
        summary[repr(float(value))] = ex.summarize(
            [{"accuracy": r["accuracy"]} for r in rows if r["value"] == float(value)])["accuracy"]
    _write_json(out / f"sweep_{parameter}.json", summary)
    return rows


def _cell(v):
    if isinstance(v, float):
        return "" if np.isnan(v) else repr(v)
    return v


def cmd_run(run: RunConfig, out: Path) -> dict:
    cmd_gen_data(run, out)
    cmd_train_teachers(run, out)
    cmd_amalgamate(run, out)
    return cmd_evaluate(run, out)


# -- entry point --------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="amalgam", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--out", help="output directory (overrides [experiment] output)")
        p.add_argument("--seed-override", type=int, help="run only this replicate seed")
        return p

    add("gen-data", "generate train/val/test splits and the label partition")
    add("train-teachers", "train one teacher per label subset plus the supervised oracle")
    add("amalgamate", "train one student per configured method")
    add("evaluate", "write metrics.json with accuracy per model")
    p = add("probe", "run one diagnostic probe")
    p.add_argument("name", help=f"one of: {', '.join(PROBES)}")
    p = add("sweep", "retrain students over tau or K values")
    p.add_argument("--parameter", choices=("tau", "K"))
    p.add_argument("--values", help="comma-separated values (default from config)")
    p.add_argument("--method")
    add("run", "gen-data, train-teachers, amalgamate and evaluate in one go")
    return ap


def _error_line(command: str, exc: BaseException) -> str:
    return "error: " + json.dumps({"command": command, "type": type(exc).__name__, "message": str(exc)},
                                  sort_keys=True)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        run = load_config(args.config)
        if args.seed_override is not None:
            run = with_seeds(run, (args.seed_override,))
        out_arg = args.out or run.output
        if not out_arg:
            raise ConfigError(f"{args.config}: no output directory; pass --out or set [experiment] output")
        out = Path(out_arg)
        out.mkdir(parents=True, exist_ok=True)
        (out / MANIFEST).unlink(missing_ok=True)

        if args.command == "gen-data":
            cmd_gen_data(run, out)
        elif args.command == "train-teachers":
            cmd_train_teachers(run, out)
        elif args.command == "amalgamate":
            cmd_amalgamate(run, out)
        elif args.command == "evaluate":
            cmd_evaluate(run, out)
        elif args.command == "probe":
            cmd_probe(run, out, args.name)
        elif args.command == "sweep":
            values = None
            if args.values:
                try:
                    values = tuple(float(v) for v in args.values.split(","))
                except ValueError as exc:
                    raise ConfigError(f"--values: {exc}") from None
            cmd_sweep(run, out, args.parameter, values, args.method)
        elif args.command == "run":
            cmd_run(run, out)
        manifest = write_manifest(out)
    except ConfigError as exc:
        print(_error_line(args.command, exc), file=sys.stderr)
        return 2
    except ArtifactError as exc:
        print(_error_line(args.command, exc), file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - every failure gets the structured line
        print(_error_line(args.command, exc), file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, "manifest": str(manifest), "status": "ok"}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
