"""Declarative experiment configs, the experiment runner and metrics records.

A config is a JSON object validated against :data:`CONFIG_SCHEMA` before any
work starts. Unknown keys are rejected. Defaults are filled in, and the
resolved config is hashed and embedded in the resulting :class:`MetricsRecord`,
so each record describes its own run.

Layout of a config::

    {
      "experiment": "missing-class",
      "dataset": {"id": "mnist", "root": "data/mnist-desk", "train_limit": 10000},
      "seed": 0,
      "teachers": [{"name": "small", "model": "mnist-small-desk", "train": {"epochs": 3}},
                   {"name": "large", "checkpoint": "runs/large.kdlb"}],
      "student": {"model": "mnist-general-desk", "train": {"epochs": 5}},
      "distill": {"alpha_kd": 0.99, "T": 9},
      "params": {"missing_class": 6, "temperatures": [3, 6, 9, 12, 15, 20]}
    }
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import subprocess
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from jsonschema import Draft202012Validator
from jsonschema.exceptions import best_match

from . import __version__
from .analysis import DEFAULT_T_GRID, cluster_spread, entropy_curve, penultimate_projection
from .data import (LabeledDataset, data_root, full_transfer_set, load_cifar10, load_mnist_dir, remove_class,
                   select_transfer_set)
from .errors import ConfigError, DataError
from .nn import ModelSpec
from .presets import PRESETS, preset
from .sweetspot import (RefineConfig, SweepGrid, cell_evaluator, entropy_surface, find_sweet_spot,
                        write_summary)
from .tensor import SeededRng, derive_seed
from .train import (DistillConfig, TrainConfig, distill_student, evaluate, generate_soft_labels,
                    load_checkpoint, save_checkpoint, train_teacher)

EXPERIMENTS = ("train-teacher", "distill", "entropy-scan", "missing-class", "transfer-sweep", "project",
               "sweet-spot")

_TRAIN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "batch_size": {"type": "integer", "minimum": 1},
        "epochs": {"type": "integer", "minimum": 0},
        "optimizer": {"enum": ["adam", "sgd_momentum"]},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "adam_eps": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "shuffle": {"type": "boolean"},
        "loss": {"enum": ["cross_entropy", "ls"]},
        "alpha_ls": {"type": "number", "minimum": 0, "maximum": 1},
        "entropy_T": {"type": "number", "exclusiveMinimum": 0},
        "entropy_probe": {"type": "integer", "minimum": 0},
    },
}

_MODEL = {"oneOf": [{"enum": PRESETS}, {"type": "object", "required": ["layers", "input_shape"]}]}

_TEACHER_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["name"],
    "properties": {
        "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
        "model": _MODEL,
        "checkpoint": {"type": "string"},
        "train": _TRAIN_SCHEMA,
    },
    "oneOf": [{"required": ["model"]}, {"required": ["checkpoint"]}],
}

_POS_NUMBERS = {"type": "array", "minItems": 1, "items": {"type": "number", "exclusiveMinimum": 0}}
_POS_INTS = {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 1}}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["experiment", "dataset"],
    "properties": {
        "experiment": {"enum": list(EXPERIMENTS)},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "required": ["id"],
            "properties": {
                "id": {"enum": ["mnist", "fashion-mnist", "cifar10"]},
                "root": {"type": ["string", "null"]},
                "train_limit": {"type": ["integer", "null"], "minimum": 1},
                "test_limit": {"type": ["integer", "null"], "minimum": 1},
            },
        },
        "seed": {"type": "integer", "minimum": 0},
        "out": {"type": ["string", "null"]},
        "teachers": {"type": "array", "minItems": 1, "items": _TEACHER_SCHEMA},
        "student": {
            "type": "object",
            "additionalProperties": False,
            "required": ["model"],
            "properties": {"model": _MODEL, "train": _TRAIN_SCHEMA},
        },
        "distill": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "alpha_kd": {"type": "number", "minimum": 0, "maximum": 1},
                "T": {"type": "number", "exclusiveMinimum": 0},
                "kl_t_squared": {"type": "boolean"},
            },
        },
        "params": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "temperatures": _POS_NUMBERS,
                "missing_class": {"type": ["integer", "null"], "minimum": 0},
                "n_per_class": {"type": ["integer", "null"], "minimum": 1},
                "sizes": _POS_INTS,
                "policy": {"enum": ["random", "entropy_ranked"]},
                "T_sel": {"type": "number", "exclusiveMinimum": 0},
                "target_accuracy": {"type": ["number", "null"], "exclusiveMinimum": 0, "maximum": 1},
                "classes": {"type": ["array", "null"], "minItems": 3, "maxItems": 3,
                            "items": {"type": "integer", "minimum": 0}},
                "templates": {"enum": ["weights", "means"]},
                "batch_sizes": _POS_INTS,
                "epoch_counts": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
                "T_ref": {"type": "number", "exclusiveMinimum": 0},
                "min_accuracy": {"type": ["number", "null"], "exclusiveMinimum": 0, "maximum": 1},
                "refine_iterations": {"type": "integer", "minimum": 0},
                "transfer_sizes": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 1}},
            },
        },
    },
}

_PARAM_DEFAULTS = {
    "train-teacher": {},
    "distill": {"n_per_class": None, "policy": "random", "T_sel": 9.0, "missing_class": None},
    "entropy-scan": {"temperatures": list(DEFAULT_T_GRID)},
    "missing-class": {"missing_class": 6, "temperatures": list(DEFAULT_T_GRID)},
    "transfer-sweep": {"sizes": [5, 10, 20, 50, 100, 200, 500, 1000, 2000], "policy": "random", "T_sel": 9.0,
                       "target_accuracy": None},
    "project": {"classes": None, "n_per_class": 300, "templates": "weights"},
    "sweet-spot": {"batch_sizes": [64, 256, 1024, 4096], "epoch_counts": [5, 10, 20, 40], "T_ref": 9.0,
                   "min_accuracy": None, "refine_iterations": 0, "transfer_sizes": None,
                   "target_accuracy": None, "policy": "random", "T_sel": 9.0},
}

_NEEDS_STUDENT = {"distill", "missing-class", "transfer-sweep"}


def _path(error):
    parts = [str(p) for p in error.absolute_path]
    return ".".join(parts) if parts else "<root>"


def validate_config(raw) -> dict:
    """Schema-check ``raw`` and return the resolved config (defaults filled)."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    err = best_match(Draft202012Validator(CONFIG_SCHEMA).iter_errors(raw))
    if err is not None:
        field_name = _path(err)
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            if extra:
                where = f"{field_name}." if field_name != "<root>" else ""
                raise ConfigError(where + extra[0], "unknown key")
        raise ConfigError(field_name, err.message)
    cfg = copy.deepcopy(raw)
    exp = cfg["experiment"]
    cfg.setdefault("seed", 0)
    cfg.setdefault("out", None)
    ds = cfg["dataset"]
    for k in ("root", "train_limit", "test_limit"):
        ds.setdefault(k, None)
    if "teachers" not in cfg:
        raise ConfigError("teachers", f"{exp} needs at least one teacher")
    names = [t["name"] for t in cfg["teachers"]]
    if len(set(names)) != len(names):
        raise ConfigError("teachers", "teacher names must be unique")
    for i, t in enumerate(cfg["teachers"]):
        if "model" in t:
            t["train"] = _train_dict(t.get("train", {}), cfg["seed"])
    if exp in _NEEDS_STUDENT:
        if "student" not in cfg:
            raise ConfigError("student", f"{exp} needs a student")
    if "student" in cfg:
        cfg["student"]["train"] = _train_dict(cfg["student"].get("train", {}), cfg["seed"])
    d = DistillConfig()
    cfg["distill"] = {"alpha_kd": d.alpha_kd, "T": d.T, "kl_t_squared": d.kl_t_squared, **cfg.get("distill", {})}
    params = {**_PARAM_DEFAULTS[exp], **cfg.get("params", {})}
    unused = sorted(set(params) - set(_PARAM_DEFAULTS[exp]))
    if unused:
        raise ConfigError(f"params.{unused[0]}", f"not a parameter of {exp}")
    cfg["params"] = params
    if exp == "sweet-spot":
        if "model" not in cfg["teachers"][0]:
            raise ConfigError("teachers.0.model", "sweet-spot needs a teacher architecture, not a checkpoint")
        if params["transfer_sizes"] and "student" not in cfg:
            raise ConfigError("student", "transfer_sizes needs a student")
        try:
            _grid(cfg)
        except ValueError as exc:
            raise ConfigError("params", str(exc)) from None
    if exp == "project" and params["classes"] is not None and len(set(params["classes"])) != 3:
        raise ConfigError("params.classes", "need three distinct classes")
    return cfg


def _train_dict(d, seed):
    return {**TrainConfig(seed=seed).to_dict(), **d}


def config_hash(cfg) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


# -- records ---------------------------------------------------------------


def _git_version():
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None if out.returncode == 0 else None


@dataclass
class MetricsRecord:
    experiment: str
    config: dict
    metrics: dict
    config_hash: str = ""
    version: dict = field(default_factory=dict)
    timestamps: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.config_hash:
            self.config_hash = config_hash(self.config)

    def to_dict(self):
        return {"experiment": self.experiment, "config_hash": self.config_hash, "version": self.version,
                "timestamps": self.timestamps, "config": self.config, "metrics": self.metrics}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(d["experiment"], d["config"], d["metrics"], d["config_hash"], d.get("version", {}),
                   d.get("timestamps", {}))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def content(self):
        """Everything except wall-clock timestamps."""
        d = self.to_dict()
        d.pop("timestamps")
        return d

    def same_run(self, other) -> bool:
        return self.content() == other.content()


# -- artifacts -------------------------------------------------------------


class Artifacts:
    """Writes files under one output directory and keeps the manifest."""

    def __init__(self, out):
        self.out = Path(out).resolve()
        self.files = {}

    def path(self, rel):
        p = (self.out / rel).resolve()
        if self.out not in p.parents:
            raise ConfigError("out", f"{rel} escapes the output directory")
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def _register(self, p):
        self.files[str(p.relative_to(self.out))] = hashlib.sha256(p.read_bytes()).hexdigest()
        return p

    def write_text(self, rel, text):
        p = self.path(rel)
        tmp = p.with_name(p.name + ".tmp")
        tmp.write_text(text)
        os.replace(tmp, p)
        return self._register(p)

    def write_with(self, rel, writer):
        """``writer(tmp_path)`` fills a temp file which is then renamed into place."""
        p = self.path(rel)
        tmp = p.with_name(p.name + ".tmp")
        writer(tmp)
        os.replace(tmp, p)
        return self._register(p)

    def checkpoint(self, rel, ckpt):
        p = self.path(rel)
        save_checkpoint(p, ckpt)
        return self._register(p)

    def manifest(self):
        doc = {"files": [{"path": k, "sha256": v} for k, v in sorted(self.files.items())]}
        p = self.path("manifest.json")
        tmp = p.with_name(p.name + ".tmp")
        tmp.write_text(json.dumps(doc, indent=2))
        os.replace(tmp, p)
        return p


# -- running ---------------------------------------------------------------


def _model_spec(m) -> ModelSpec:
    return preset(m) if isinstance(m, str) else ModelSpec.from_dict(m)


def dataset_dir(cfg):
    ds = cfg["dataset"]
    return Path(ds["root"]) if ds["root"] else data_root() / ds["id"]


def load_split(cfg, split) -> LabeledDataset:
    ds = cfg["dataset"]
    root = dataset_dir(cfg)
    if not root.exists():
        raise DataError(f"dataset directory {root} does not exist (set dataset.root or KDLAB_DATA_DIR)")
    if ds["id"] == "cifar10":
        data = load_cifar10(root, split)
    else:
        data = load_mnist_dir(root, split, ds["id"])
    limit = ds["train_limit" if split == "train" else "test_limit"]
    if limit is not None and limit < len(data):
        data = data.subset(np.arange(limit))
    return data


def _distill_cfg(cfg, T=None):
    d = cfg["distill"]
    return DistillConfig(d["alpha_kd"], float(T if T is not None else d["T"]), d["kl_t_squared"],
                         TrainConfig(**cfg["student"]["train"]))


def plan(cfg):
    """Human-readable steps the runner will take."""
    exp, p = cfg["experiment"], cfg["params"]
    steps = [f"load {cfg['dataset']['id']} from {dataset_dir(cfg)}"]
    for t in cfg["teachers"]:
        if "checkpoint" in t:
            steps.append(f"load teacher {t['name']} from {t['checkpoint']}")
        elif exp != "sweet-spot":
            tr = t["train"]
            steps.append(f"train teacher {t['name']} ({t['model'] if isinstance(t['model'], str) else 'inline'}, "
                         f"batch {tr['batch_size']}, {tr['epochs']} epochs)")
    if exp == "entropy-scan":
        steps.append(f"entropy curves at T={p['temperatures']}")
    elif exp == "distill":
        steps.append(f"distill student (T={cfg['distill']['T']}, alpha_kd={cfg['distill']['alpha_kd']})")
    elif exp == "missing-class":
        steps.append(f"remove class {p['missing_class']}; distill a student per teacher at T={p['temperatures']}")
    elif exp == "transfer-sweep":
        steps.append(f"distill a student per teacher at {p['sizes']} examples/class ({p['policy']})")
    elif exp == "project":
        steps.append(f"project {p['n_per_class']} examples of classes {p['classes'] or '(3 drawn)'}")
    elif exp == "sweet-spot":
        steps.append(f"sweep batch {p['batch_sizes']} x epochs {p['epoch_counts']}, "
                     f"{p['refine_iterations']} refinement rounds")
        if p["transfer_sizes"]:
            steps.append(f"compare default and sweet-spot teachers at {p['transfer_sizes']} examples/class")
    return steps


class _Run:
    def __init__(self, cfg, out):
        self.cfg = cfg
        self.art = Artifacts(out)
        self.train = load_split(cfg, "train")
        self.test = load_split(cfg, "test")

    def teacher(self, t):
        if "checkpoint" in t:
            return load_checkpoint(t["checkpoint"])
        ckpt, hist = train_teacher(_model_spec(t["model"]), self.train, TrainConfig(**t["train"]), self.test)
        self.art.checkpoint(f"teachers/{t['name']}.kdlb", ckpt)
        self.art.write_text(f"teachers/{t['name']}_history.json", json.dumps(hist, indent=2))
        return ckpt

    def teachers(self):
        return [(t["name"], self.teacher(t)) for t in self.cfg["teachers"]]

    def student(self, ts, tch, T, tag):
        soft = generate_soft_labels(tch, ts, T)
        ckpt, _ = distill_student(_model_spec(self.cfg["student"]["model"]), ts, soft, _distill_cfg(self.cfg, T))
        acc, per_class = evaluate(ckpt, self.test)
        ckpt.test_accuracy = acc
        self.art.checkpoint(f"students/{tag}.kdlb", ckpt)
        return acc, per_class

    def transfer_curve(self, teachers, sizes, policy, T_sel, target):
        T = self.cfg["distill"]["T"]
        rows = []
        for name, tch in teachers:
            accs = []
            for n in sizes:
                rng = SeededRng(derive_seed(self.cfg["seed"], "transfer", n))
                ts = select_transfer_set(self.train, n, policy, tch, T_sel, rng)
                accs.append(self.student(ts, tch, T, f"{name}_n{n}")[0])
            row = {"teacher": name, "accuracy": accs}
            if target is not None:
                row["required_n"] = next((n for n, a in zip(sizes, accs) if a >= target), None)
            rows.append(row)
        return {"sizes": list(sizes), "policy": policy, "T": T, "target_accuracy": target, "rows": rows}


def _grid(cfg):
    p = cfg["params"]
    base = TrainConfig(**cfg["teachers"][0]["train"])
    return SweepGrid(tuple(p["batch_sizes"]), tuple(p["epoch_counts"]), float(p["T_ref"]), p["min_accuracy"], base)


def _per_class(v):
    return [None if np.isnan(x) else float(x) for x in v]


def _execute(cfg, run: _Run):
    exp, p = cfg["experiment"], cfg["params"]
    if exp == "train-teacher":
        out = {}
        for name, ck in run.teachers():
            acc, pc = evaluate(ck, run.test)
            out[name] = {"checkpoint": ck.id, "train_accuracy": ck.train_accuracy, "test_accuracy": acc,
                         "per_class": _per_class(pc)}
        return {"teachers": out}
    if exp == "entropy-scan":
        curves = {name: entropy_curve(ck, run.train, tuple(p["temperatures"])).to_dict()
                  for name, ck in run.teachers()}
        return {"curves": curves}
    if exp == "distill":
        name, tch = run.teachers()[0]
        base = remove_class(run.train, p["missing_class"]) if p["missing_class"] is not None else run.train
        if p["n_per_class"] is None:
            ts = full_transfer_set(base)
        else:
            rng = SeededRng(derive_seed(cfg["seed"], "transfer", p["n_per_class"]))
            ts = select_transfer_set(base, p["n_per_class"], p["policy"], tch, p["T_sel"], rng)
        acc, pc = run.student(ts, tch, cfg["distill"]["T"], f"{name}")
        return {"teacher": name, "transfer_size": len(ts), "accuracy": acc, "per_class": _per_class(pc)}
    if exp == "missing-class":
        k = p["missing_class"]
        ts = full_transfer_set(remove_class(run.train, k))
        assert not np.any(ts.labels == k)
        rows = []
        for name, tch in run.teachers():
            miss, overall = [], []
            for T in p["temperatures"]:
                acc, pc = run.student(ts, tch, T, f"{name}_T{T:g}")
                miss.append(float(pc[k]))
                overall.append(acc)
            rows.append({"teacher": name, "missing_class_accuracy": miss, "overall_accuracy": overall})
        return {"table": {"missing_class": k, "temperatures": [float(T) for T in p["temperatures"]],
                          "rows": rows}}
    if exp == "transfer-sweep":
        return {"transfer": run.transfer_curve(run.teachers(), p["sizes"], p["policy"], p["T_sel"],
                                               p["target_accuracy"])}
    if exp == "project":
        classes = p["classes"]
        if classes is None:
            classes = sorted(int(c) for c in SeededRng(derive_seed(cfg["seed"], "classes")).choice(
                run.train.num_classes, 3))
        out = {}
        for name, ck in run.teachers():
            rng = SeededRng(derive_seed(cfg["seed"], "project"))
            pr = penultimate_projection(ck, run.test, classes, p["n_per_class"], rng, p["templates"])
            run.art.write_with(f"projections/{name}.csv", pr.to_csv)
            gram = pr.basis @ pr.basis.T
            out[name] = {"spread": cluster_spread(pr), "orthonormality_error": float(np.abs(gram - np.eye(2)).max()),
                         "points": [[float(x), float(y)] for x, y in pr.points],
                         "labels": [int(c) for c in pr.labels]}
        return {"classes": list(classes), "projections": out}
    if exp == "sweet-spot":
        grid = _grid(cfg)
        spec = _model_spec(cfg["teachers"][0]["model"])
        surface = entropy_surface(spec, run.train, run.test, grid, keep_checkpoints=True)
        refine = RefineConfig(p["refine_iterations"])
        spots = find_sweet_spot(surface, refine,
                                cell_evaluator(spec, run.train, run.test, grid, keep=surface.checkpoints))
        best = spots[0]
        run.art.write_with("surface.csv", surface.to_csv)
        run.art.write_with("summary.json", lambda path: write_summary(path, surface, spots))
        run.art.checkpoint("sweet_spot.kdlb", surface.checkpoints[(best.batch, best.epochs)])
        trends = surface.trends()
        out = {
            "cells": [{"batch": c.batch, "epochs": c.epochs, "entropy": c.entropy, "accuracy": c.accuracy,
                       "checkpoint": c.checkpoint, "error": c.error} for _, c in sorted(surface.cells.items())],
            "floor": surface.floor(),
            "spots": [s.to_dict() for s in spots],
            "trends": {axis: {str(k): v for k, v in t.items()} for axis, t in trends.items()},
        }
        if p["transfer_sizes"]:
            default = run.teacher(cfg["teachers"][0])
            sweet = surface.checkpoints[(best.batch, best.epochs)]
            out["transfer"] = run.transfer_curve([("default", default), ("sweet-spot", sweet)],
                                                 p["transfer_sizes"], p["policy"], p["T_sel"],
                                                 p["target_accuracy"])
        return out
    raise ConfigError("experiment", f"unknown experiment {exp!r}")


def run_experiment(raw, out=None, dry_run=False):
    """Validate ``raw``, run it and write artifacts, the record and a manifest under ``out``.

    With ``dry_run`` nothing is trained or written; the plan is returned as
    a list of strings instead of a record.
    """
    cfg = validate_config(raw)
    out = out or cfg["out"]
    if out is None:
        raise ConfigError("out", "no output directory given")
    cfg["out"] = None  # the location does not change the run
    if dry_run:
        root = dataset_dir(cfg)
        if not root.exists():
            raise DataError(f"dataset directory {root} does not exist")
        return plan(cfg)
    started = _now()
    run = _Run(cfg, out)
    metrics = _execute(cfg, run)
    record = MetricsRecord(cfg["experiment"], cfg, _jsonable(metrics),
                           version={"kdlab": __version__, "git": _git_version()},
                           timestamps={"started": started, "finished": _now()})
    run.art.write_text("record.json", record.to_json())
    run.art.manifest()
    return record


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _jsonable(x):
    """Round-trip through JSON so in-memory and reloaded records compare equal."""
    return json.loads(json.dumps(x, default=float))
