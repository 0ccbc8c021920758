"""Teacher training, soft-label generation, offline distillation, checkpoints."""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import losses
from .analysis import entropy
from .data import LabeledDataset, TransferSet
from .errors import (BadMagicError, CheckpointError, DataError, DivergenceError, LengthMismatchError,
                     ShapeError, VersionMismatchError)
from .nn import Model, ModelSpec, backward, forward, init_params, param_count, predict_logits
from .tensor import FLOAT, SeededRng, derive_seed

CHECKPOINT_MAGIC = b"KDLB"
CHECKPOINT_VERSION = 1


# -- configs ---------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 10
    optimizer: str = "adam"  # adam | sgd_momentum
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True
    loss: str = "cross_entropy"  # cross_entropy | ls
    alpha_ls: float = 0.0
    entropy_T: float = 9.0  # reference temperature for the per-epoch entropy trace
    entropy_probe: int = 1000  # training examples used for that trace (0 disables)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("cross_entropy", "ls"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if not 0.0 <= self.alpha_ls <= 1.0:
            raise ValueError(f"alpha_ls must lie in [0, 1], got {self.alpha_ls}")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class DistillConfig:
    alpha_kd: float = 0.99
    T: float = 9.0
    kl_t_squared: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        losses.LossConfig(alpha_kd=self.alpha_kd, temperature=self.T)  # range checks

    @property
    def loss_config(self):
        return losses.LossConfig(alpha_kd=self.alpha_kd, temperature=self.T, kl_t_squared=self.kl_t_squared)

    def to_dict(self):
        return {"alpha_kd": self.alpha_kd, "T": self.T, "kl_t_squared": self.kl_t_squared,
                "train": self.train.to_dict()}


# -- optimizers ------------------------------------------------------------


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads):
        if self.m is None:
            self.m = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
            self.v = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            for k in p:
                gk = g[k].astype(p[k].dtype, copy=False)
                m[k] *= self.beta1
                m[k] += (1.0 - self.beta1) * gk
                v[k] *= self.beta2
                v[k] += (1.0 - self.beta2) * (gk * gk)
                p[k] -= (self.lr / bc1) * m[k] / (np.sqrt(v[k] / bc2) + self.eps)


class SGDMomentum:
    """v <- mu * v + g;  p <- p - lr * v."""

    def __init__(self, lr=0.01, momentum=0.9):
        self.lr, self.mu = lr, momentum
        self.v = None

    def step(self, params, grads):
        if self.v is None:
            self.v = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
        for p, g, v in zip(params, grads, self.v):
            for k in p:
                v[k] *= self.mu
                v[k] += g[k].astype(p[k].dtype, copy=False)
                p[k] -= self.lr * v[k]


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return SGDMomentum(cfg.lr, cfg.momentum)


# -- checkpoints -----------------------------------------------------------


@dataclass
class Checkpoint:
    model: Model
    provenance: dict = field(default_factory=dict)
    train_accuracy: float | None = None
    test_accuracy: float | None = None
    version: int = CHECKPOINT_VERSION

    @property
    def spec(self):
        return self.model.spec

    def header(self):
        return {
            "spec": self.model.spec.to_dict(),
            "provenance": self.provenance,
            "train_accuracy": self.train_accuracy,
            "test_accuracy": self.test_accuracy,
            "param_count": param_count(self.model.spec),
            "stats_count": int(sum(v.size for s in self.model.stats for v in s.values())),
        }

    def blob(self):
        parts = [v.ravel() for p in self.model.params for v in p.values()]
        parts += [v.ravel() for s in self.model.stats for v in s.values()]
        if not parts:
            return b""
        return np.concatenate(parts).astype("<f4").tobytes()

    @property
    def id(self):
        """Content hash of spec + parameters (12 hex digits)."""
        h = hashlib.sha256(json.dumps(self.model.spec.to_dict(), sort_keys=True).encode())
        h.update(self.blob())
        return h.hexdigest()[:12]


def save_checkpoint(path, ckpt: Checkpoint):
    """Write ``KDLB | u32 version | u32 header length | JSON header | float32 LE blob``."""
    header = json.dumps(ckpt.header(), sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", ckpt.version, len(header)))
        f.write(header)
        f.write(ckpt.blob())
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    if not Path(path).is_file():
        raise DataError(f"checkpoint {path} not found")
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise LengthMismatchError(f"{path}: truncated preamble")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    if len(raw) < 12 + hlen:
        raise LengthMismatchError(f"{path}: header truncated")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
        spec = ModelSpec.from_dict(header["spec"])
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    n_params, n_stats = header["param_count"], header["stats_count"]
    if n_params != param_count(spec):
        raise LengthMismatchError(f"{path}: header declares {n_params} parameters, spec has {param_count(spec)}")
    blob = raw[12 + hlen:]
    if len(blob) != 4 * (n_params + n_stats):
        raise LengthMismatchError(f"{path}: blob has {len(blob)} bytes, expected {4 * (n_params + n_stats)}")
    flat = np.frombuffer(blob, dtype="<f4").astype(FLOAT)
    model = init_params(spec, SeededRng(0))
    pos = 0
    for group in (model.params, model.stats):
        for d in group:
            for k, v in d.items():
                d[k] = flat[pos:pos + v.size].reshape(v.shape).copy()
                pos += v.size
    model.eval()
    return Checkpoint(model, header["provenance"], header["train_accuracy"], header["test_accuracy"], version)


# -- evaluation ------------------------------------------------------------


def evaluate(model, ds: LabeledDataset):
    """Overall accuracy and per-class accuracy (NaN for classes absent from ``ds``)."""
    if len(ds) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    model = getattr(model, "model", model)
    pred = np.argmax(predict_logits(model, ds.images), axis=1)
    correct = pred == ds.labels
    counts = np.bincount(ds.labels, minlength=ds.num_classes)
    hits = np.bincount(ds.labels, weights=correct, minlength=ds.num_classes)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(counts > 0, hits / np.maximum(counts, 1), np.nan)
    return float(correct.mean()), per_class


# -- training loop ---------------------------------------------------------


def _fit(model, images, labels, batch_loss, cfg: TrainConfig, validation=None, probe=None):
    shuffle_rng = SeededRng(derive_seed(cfg.seed, "shuffle"))
    dropout_rng = SeededRng(derive_seed(cfg.seed, "dropout"))
    opt = make_optimizer(cfg)
    n = len(images)
    history = []
    for epoch in range(cfg.epochs):
        model.train()
        order = shuffle_rng.permutation(n) if cfg.shuffle else np.arange(n)
        total, hits = 0.0, 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            logits, _, caches = forward(model, images[idx], dropout_rng)
            value, dlogits = batch_loss(idx, logits)
            if not np.isfinite(value):
                raise DivergenceError(epoch, step, value)
            opt.step(model.params, backward(model, caches, dlogits))
            total += value * len(idx)
            hits += int((np.argmax(logits, axis=1) == labels[idx]).sum())
        rec = {"epoch": epoch + 1, "loss": total / n, "train_accuracy": hits / n}
        if probe is not None and len(probe):
            logits = predict_logits(model, probe)
            rec["entropy"] = float(entropy(losses.softmax_t(logits, cfg.entropy_T)).mean())
        if validation is not None:
            rec["val_accuracy"] = evaluate(model, validation)[0]
        history.append(rec)
    model.eval()
    return history


def _probe(images, cfg):
    return images[:cfg.entropy_probe] if cfg.entropy_probe else None


def _check_compatible(spec, images):
    if tuple(images.shape[1:]) != spec.input_shape:
        raise ShapeError(f"dataset shape {images.shape[1:]} does not match model input {spec.input_shape}")


def train_teacher(spec: ModelSpec, ds: LabeledDataset, cfg: TrainConfig, validation=None):
    """Mini-batch training on hard (or label-smoothed) targets.

    Returns ``(Checkpoint, history)``; one history record per epoch.
    """
    _check_compatible(spec, ds.images)
    model = init_params(spec, SeededRng(derive_seed(cfg.seed, "init")))
    labels = ds.labels
    if cfg.loss == "ls":
        lcfg = losses.LossConfig(alpha_ls=cfg.alpha_ls)
        batch_loss = lambda idx, logits: losses.ls_loss(labels[idx], logits, lcfg)  # noqa: E731
    else:
        batch_loss = lambda idx, logits: losses.ce_loss(labels[idx], logits)  # noqa: E731
    history = _fit(model, ds.images, labels, batch_loss, cfg, validation, _probe(ds.images, cfg))
    ckpt = Checkpoint(model, {"kind": "teacher", "train": cfg.to_dict(), "dataset": ds.name, "n": len(ds)})
    if cfg.epochs:
        ckpt.train_accuracy = evaluate(model, ds)[0]
    if validation is not None:
        ckpt.test_accuracy = evaluate(model, validation)[0]
    model.eval()
    return ckpt, history


# -- soft labels -----------------------------------------------------------


@dataclass
class SoftLabelMatrix:
    probs: np.ndarray  # N×C float64 rows, softened at T
    T: float
    labels: np.ndarray
    indices: np.ndarray
    teacher_id: str = ""

    def __len__(self):
        return len(self.probs)

    @property
    def num_classes(self):
        return self.probs.shape[1]

    def to_csv(self, path):
        C = self.num_classes
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["index", "label"] + [f"p_{j}" for j in range(C)] + ["T"])
            for i, y, row in zip(self.indices, self.labels, self.probs):
                w.writerow([int(i), int(y)] + [repr(float(v)) for v in row] + [repr(float(self.T))])
        return path

    @classmethod
    def from_csv(cls, path, teacher_id=""):
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        head, body = rows[0], rows[1:]
        C = len(head) - 3
        if head[:2] != ["index", "label"] or head[-1] != "T" or head[2:-1] != [f"p_{j}" for j in range(C)]:
            raise DataError(f"{path}: unexpected soft-label header {head}")
        temps = {float(r[-1]) for r in body}
        if len(temps) > 1:
            raise DataError(f"{path}: rows carry different temperatures {sorted(temps)}")
        probs = np.array([[float(v) for v in r[2:-1]] for r in body]).reshape(-1, C)
        return cls(probs, temps.pop() if temps else float("nan"),
                   np.array([int(r[1]) for r in body], dtype=np.int64),
                   np.array([int(r[0]) for r in body], dtype=np.int64), teacher_id)


def generate_soft_labels(teacher, ts: TransferSet, T: float) -> SoftLabelMatrix:
    """Eval-mode teacher responses softened at ``T`` for every transfer-set row."""
    if not T > 0:
        raise ValueError(f"temperature must be > 0, got {T}")
    model = getattr(teacher, "model", teacher)
    _check_compatible(model.spec, ts.dataset.images)
    logits = predict_logits(model, ts.images)
    tid = teacher.id if isinstance(teacher, Checkpoint) else ""
    return SoftLabelMatrix(losses.softmax_t(logits, T), float(T), ts.labels.copy(), ts.indices.copy(), tid)


def distill_student(spec: ModelSpec, ts: TransferSet, soft: SoftLabelMatrix, dcfg: DistillConfig,
                    validation=None):
    """Offline distillation: minimise the KD loss over the transfer set."""
    if soft.T != dcfg.T:
        raise ValueError(f"soft labels were generated at T={soft.T}, config asks for T={dcfg.T}")
    if len(soft) != len(ts) or not np.array_equal(soft.indices, ts.indices):
        raise ValueError("soft labels do not cover exactly the transfer set")
    images = ts.images
    _check_compatible(spec, images)
    labels = ts.labels
    cfg = dcfg.train
    lcfg = dcfg.loss_config
    model = init_params(spec, SeededRng(derive_seed(cfg.seed, "init")))
    probs = soft.probs

    def batch_loss(idx, logits):
        return losses.kd_loss(labels[idx], probs[idx], logits, lcfg)

    history = _fit(model, images, labels, batch_loss, cfg, validation, _probe(images, cfg))
    ckpt = Checkpoint(model, {"kind": "student", "distill": dcfg.to_dict(), "teacher": soft.teacher_id,
                              "dataset": ts.dataset.name, "n": len(ts)})
    if cfg.epochs:
        ckpt.train_accuracy = evaluate(model, ts.as_dataset())[0]
    if validation is not None:
        ckpt.test_accuracy = evaluate(model, validation)[0]
    return ckpt, history


def with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed)
