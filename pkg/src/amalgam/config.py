"""Experiment configuration files (INI sections of ``key = value`` lines).

Every key, its default and its unit are listed in ``docs/config_schema.md``.
Errors name the offending line and key.
"""
from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from .amalgamation import METHODS
from .data import GaussianMixtureConfig
from .experiments import TAU_GRID, ExperimentConfig
from .teachers import TrainConfig

SCHEMA_VERSION = 1
PROBES = ("supervision_quality", "uncertainty_histogram", "selection_errors", "confusion_matrix", "ece")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    experiment: ExperimentConfig
    probes: tuple[str, ...] = PROBES
    ece_bins: int = 10
    sweep_parameter: str = "tau"
    sweep_values: tuple[float, ...] = TAU_GRID
    sweep_method: str | None = None
    output: str | None = None
    name: str = "experiment"
    source: str = field(default="", compare=False)


_DATASET_KEYS = {
    "num_classes": int, "input_dim": int, "mean_radius": float, "cov_scale": float,
    "train_per_class": int, "val_per_class": int, "test_per_class": int,
    "separation": float, "seed": int, "confusable_distance": float,
}
_TRAIN_KEYS = {
    "epochs": int, "batch_size": int, "learning_rate": float, "optimizer": str,
    "eval_interval": int, "patience": "optint",
}
_SECTIONS = {
    "experiment": {"schema": int, "name": str, "seeds": "ints", "output": str},
    "dataset": {**_DATASET_KEYS, "confusable_across": bool, "confusable_pair": "ints"},
    "cross_dataset": dict(_DATASET_KEYS),
    "partition": {"subset_sizes": "ints", "seed": int},
    "teachers": {
        "hidden": "layers", "dropout_rate": float, "activation": str, **_TRAIN_KEYS,
        "overconfidence_epochs": int, "overconfidence_lr_scale": float,
    },
    "oracle": {"hidden": "ints"},
    "amalgamation": {
        "methods": "strs", "student_hidden": "ints", "mc_samples": int, "tau": float,
        "reweighting": bool, "kl_direction": str, "supervision_source": str, **_TRAIN_KEYS,
    },
    "evaluation": {"probes": "strs", "ece_bins": int},
    "sweep": {"parameter": str, "values": "floats", "method": str},
}


class _Reader:
    def __init__(self, text: str, source: str):
        self.lines = text.splitlines()
        self.source = source
        self.parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        self.parser.optionxform = str
        try:
            self.parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from None

    def line_of(self, section: str, key: str | None = None) -> int:
        in_section = False
        for n, line in enumerate(self.lines, start=1):
            stripped = line.strip()
            if stripped.startswith("["):
                in_section = stripped == f"[{section}]"
                if in_section and key is None:
                    return n
                continue
            if in_section and key is not None and re.match(rf"{re.escape(key)}\s*[=:]", stripped):
                return n
        return 0

    def fail(self, section, key, msg):
        raise ConfigError(f"{self.source}:{self.line_of(section, key)}: [{section}] {key}: {msg}")

    def convert(self, section, key, kind, raw):
        try:
            if kind is bool:
                return self.parser.getboolean(section, key)
            if kind in (int, float, str):
                return kind(raw)
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            if kind == "ints":
                return tuple(int(p) for p in parts)
            if kind == "floats":
                return tuple(float(p) for p in parts)
            if kind == "strs":
                return tuple(parts)
            if kind == "optint":
                return None if raw.strip().lower() == "none" else int(raw)
            if kind == "layers":
                return tuple(
                    tuple(int(h) for h in grp.split(",") if h.strip())
                    for grp in raw.split("|")
                )
        except ValueError as exc:
            self.fail(section, key, f"cannot parse {raw!r} ({exc})")
        raise AssertionError(kind)

    def section(self, name) -> dict:
        if not self.parser.has_section(name):
            return {}
        schema = _SECTIONS[name]
        out = {}
        for key, raw in self.parser.items(name):
            if key not in schema:
                self.fail(name, key, f"unknown key; expected one of {sorted(schema)}")
            out[key] = self.convert(name, key, schema[key], raw)
        return out


def _train_config(values: dict, **extra) -> TrainConfig:
    kw = {k: values[k] for k in _TRAIN_KEYS if k in values}
    kw.update(extra)
    return TrainConfig(**kw)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    r = _Reader(text, source)
    for name in r.parser.sections():
        if name not in _SECTIONS:
            raise ConfigError(f"{source}:{r.line_of(name)}: unknown section [{name}]")
    exp = r.section("experiment")
    if exp.get("schema", SCHEMA_VERSION) != SCHEMA_VERSION:
        r.fail("experiment", "schema", f"unsupported schema version (expected {SCHEMA_VERSION})")

    def guarded(section, build):
        try:
            return build()
        except (ValueError, TypeError) as exc:
            line = r.line_of(section)
            raise ConfigError(f"{source}:{line}: [{section}] {exc}") from None

    ds = r.section("dataset")
    confusable_across = ds.pop("confusable_across", False)
    if "confusable_pair" in ds:
        pair = ds["confusable_pair"]
        if len(pair) != 2:
            r.fail("dataset", "confusable_pair", "expects two labels")
    data = guarded("dataset", lambda: GaussianMixtureConfig(**ds))
    cross = r.section("cross_dataset")
    cross_data = guarded("cross_dataset", lambda: GaussianMixtureConfig(**cross)) if cross else None

    te = r.section("teachers")
    am = r.section("amalgamation")
    for m in am.get("methods", ()):
        if m not in METHODS:
            r.fail("amalgamation", "methods", f"unknown method {m!r}; choose from {list(METHODS)}")
    knob = {}
    if "overconfidence_epochs" in te:
        knob["extra_epochs"] = te["overconfidence_epochs"]
    if "overconfidence_lr_scale" in te:
        knob["extra_lr_scale"] = te["overconfidence_lr_scale"]
    teacher_train = guarded("teachers", lambda: _train_config(te, **knob))
    student_train = guarded("amalgamation", lambda: _train_config(am))

    kw = dict(
        data=data,
        cross_data=cross_data,
        teacher_train=teacher_train,
        student_train=student_train,
        confusable_across=confusable_across,
    )
    if "seeds" in exp:
        if not exp["seeds"]:
            r.fail("experiment", "seeds", "at least one seed is required")
        kw["seeds"] = exp["seeds"]
    p = r.section("partition")
    if "subset_sizes" in p:
        if cross_data is None and sum(p["subset_sizes"]) != data.num_classes:
            r.fail("partition", "subset_sizes",
                   f"sizes sum to {sum(p['subset_sizes'])}, dataset has {data.num_classes} classes")
        kw["subset_sizes"] = p["subset_sizes"]
    if "seed" in p:
        kw["partition_seed"] = p["seed"]
    for src, dst in (("hidden", "teacher_hidden"), ("dropout_rate", "dropout_rate"),
                     ("activation", "activation")):
        if src in te:
            kw[dst] = te[src]
    if "hidden" in (o := r.section("oracle")):
        kw["oracle_hidden"] = o["hidden"]
    for src, dst in (("methods", "methods"), ("student_hidden", "student_hidden"),
                     ("mc_samples", "mc_samples"), ("tau", "tau"), ("reweighting", "reweighting"),
                     ("kl_direction", "kl_direction"), ("supervision_source", "supervision_source")):
        if src in am:
            kw[dst] = am[src]
    experiment = guarded("experiment", lambda: ExperimentConfig(**kw))

    ev = r.section("evaluation")
    for p in ev.get("probes", ()):
        if p not in PROBES:
            r.fail("evaluation", "probes", f"unknown probe {p!r}; available: {list(PROBES)}")
    sw = r.section("sweep")
    if sw.get("parameter", "tau") not in ("tau", "K"):
        r.fail("sweep", "parameter", "must be 'tau' or 'K'")
    if sw.get("method", METHODS[0]) not in METHODS:
        r.fail("sweep", "method", f"unknown method; choose from {list(METHODS)}")
    run = RunConfig(
        experiment=experiment,
        probes=ev.get("probes", PROBES),
        ece_bins=ev.get("ece_bins", 10),
        sweep_parameter=sw.get("parameter", "tau"),
        sweep_values=sw.get("values", TAU_GRID if sw.get("parameter", "tau") == "tau" else (0, 1, 4, 16)),
        sweep_method=sw.get("method"),
        output=exp.get("output"),
        name=exp.get("name", "experiment"),
        source=source,
    )
    return run


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: config file not found")
    return parse_config(path.read_text(), str(path))


def with_seeds(run: RunConfig, seeds) -> RunConfig:
    return replace(run, experiment=replace(run.experiment, seeds=tuple(seeds)))
