"""Soft-label diagnostics.

Entropy of teacher responses, variance in response, penultimate-layer
projections with a cluster-tightness score, and the LS-like / KD-like
classification of a soft-label matrix.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DegenerateProjectionError
from .losses import EPS_LOG, softmax_t

DEFAULT_T_GRID = (3.0, 6.0, 9.0, 12.0, 15.0, 20.0)
DEFAULT_NATURE_THRESHOLD = 0.01  # exact LS scores 0; printed teacher rows score 0.01-0.06


def entropy(p, eps_log=EPS_LOG):
    """-sum p log p in nats, per row, clipped to [0, ln C]."""
    p = np.asarray(p, dtype=np.float64)
    e = -(p * np.log(np.maximum(p, eps_log))).sum(axis=-1)
    return np.clip(e, 0.0, np.log(p.shape[-1]))


@dataclass
class EntropyCurve:
    temperatures: list
    mean: list
    std: list

    def to_dict(self):
        return {"T": list(self.temperatures), "mean_entropy": list(self.mean), "std": list(self.std)}

    def at(self, T):
        return self.mean[list(self.temperatures).index(T)]


def entropy_curve_from_logits(logits, T_grid=DEFAULT_T_GRID):
    if len(logits) == 0:
        raise DataError("entropy curve needs at least one example")
    means, stds = [], []
    for T in T_grid:
        e = entropy(softmax_t(logits, T))
        means.append(float(e.mean()))
        stds.append(float(e.std()))
    return EntropyCurve([float(T) for T in T_grid], means, stds)


def entropy_curve(teacher, ds, T_grid=DEFAULT_T_GRID):
    """Mean and std of soft-label entropy over ``ds`` at each temperature."""
    from .nn import predict_logits

    if len(ds) == 0:
        raise DataError("entropy curve needs a non-empty dataset")
    model = getattr(teacher, "model", teacher)
    return entropy_curve_from_logits(predict_logits(model, ds.images), T_grid)


# -- variance in response --------------------------------------------------


@dataclass
class ResponseVarianceReport:
    per_class: dict  # class -> {"n", "confidence_variance", "similarity_variance", "within_example_spread"}
    excluded: list = field(default_factory=list)  # classes with fewer than two rows

    def to_dict(self):
        return {"per_class": {str(k): v for k, v in self.per_class.items()}, "excluded": self.excluded}


def variance_in_response(soft, labels=None) -> ResponseVarianceReport:
    """Example-to-example variation of confidence and similarity labels, grouped by class.

    For class ``c`` with rows ``R``: confidence variance is ``Var(R[:, c])``;
    similarity variance is the mean over ``j != c`` of ``Var(R[:, j])``; the
    within-example spread is the mean over rows of the variance of that row's
    similarity labels. Variances are population variances (ddof=0).
    """
    probs = np.asarray(getattr(soft, "probs", soft), dtype=np.float64)
    labels = np.asarray(getattr(soft, "labels", labels))
    C = probs.shape[1]
    per_class, excluded = {}, []
    for c in np.unique(labels):
        rows = probs[labels == c]
        c = int(c)
        if len(rows) < 2:
            excluded.append(c)
            continue
        others = np.delete(rows, c, axis=1)
        per_class[c] = {
            "n": int(len(rows)),
            "confidence_variance": float(rows[:, c].var()),
            "similarity_variance": float(others.var(axis=0).mean()),
            "within_example_spread": float(others.var(axis=1).mean()),
        }
    if not per_class:
        raise DataError("no class has at least two rows")
    return ResponseVarianceReport(per_class, excluded)


# -- penultimate projection ------------------------------------------------


@dataclass
class ProjectionResult:
    points: np.ndarray  # N×2
    labels: np.ndarray
    basis: np.ndarray  # 2×D orthonormal rows
    classes: tuple
    indices: np.ndarray | None = None

    def to_rows(self):
        return [(float(x), float(y), int(c)) for (x, y), c in zip(self.points, self.labels)]

    def to_csv(self, path):
        """Write ``x,y,class`` rows; floats use repr so they read back exactly."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["x", "y", "class"])
            for x, y, c in self.to_rows():
                w.writerow([repr(x), repr(y), c])
        return path


def plane_basis(t1, t2, t3, tol=1e-9):
    """Gram-Schmidt orthonormal basis of span(t2 - t1, t3 - t1)."""
    v1 = np.asarray(t2, dtype=np.float64) - t1
    v2 = np.asarray(t3, dtype=np.float64) - t1
    n1 = np.linalg.norm(v1)
    if n1 <= tol:
        raise DegenerateProjectionError("templates 1 and 2 coincide; the projection plane is undefined")
    e1 = v1 / n1
    u = v2 - (v2 @ e1) * e1
    nu = np.linalg.norm(u)
    if nu <= tol * max(np.linalg.norm(v2), 1.0):
        raise DegenerateProjectionError("templates are collinear; the projection plane is undefined")
    return np.stack([e1, u / nu])


def penultimate_projection(model, ds, classes, n_per_class=300, rng=None, templates="weights"):
    """Project penultimate activations of sampled examples onto the template plane.

    ``templates="weights"`` uses the final Dense layer's weight vectors of the
    three classes; ``"means"`` uses the classes' mean penultimate activation.
    """
    from .nn import predict_logits

    classes = tuple(int(c) for c in classes)
    if len(classes) != 3 or len(set(classes)) != 3:
        raise ValueError(f"need three distinct classes, got {classes}")
    if rng is None:
        raise ValueError("penultimate_projection needs an rng for example sampling")
    picks = []
    for c in classes:
        members = np.flatnonzero(ds.labels == c)
        if len(members) < n_per_class:
            raise DataError(f"class {c} has {len(members)} examples, {n_per_class} requested")
        picks.append(members[rng.choice(len(members), n_per_class)])
    idx = np.concatenate(picks)
    model = getattr(model, "model", model)
    _, pen = predict_logits(model, ds.images[idx], penultimate=True)
    pen = pen.astype(np.float64)
    labels = ds.labels[idx]
    if templates == "weights":
        W = model.params[model.spec.classifier_index]["W"].astype(np.float64)
        t = [W[:, c] for c in classes]
    elif templates == "means":
        t = [pen[labels == c].mean(axis=0) for c in classes]
    else:
        raise ValueError(f"unknown template kind {templates!r}")
    basis = plane_basis(*t)
    return ProjectionResult(pen @ basis.T, labels, basis, classes, idx)


def cluster_spread(pr: ProjectionResult) -> float:
    """Mean within-class distance to centroid over mean between-centroid distance.

    Within-class distances are averaged per class, then across classes.
    Invariant to rotating, translating or scaling the points; lower is tighter.
    """
    pts = np.asarray(pr.points, dtype=np.float64)
    labels = np.asarray(pr.labels)
    groups = [pts[labels == c] for c in np.unique(labels)]
    groups = [g for g in groups if len(g) >= 2]
    if len(groups) < 2:
        raise DataError("cluster_spread needs two classes with at least two points each")
    centroids = np.stack([g.mean(axis=0) for g in groups])
    within = np.mean([np.linalg.norm(g - m, axis=1).mean() for g, m in zip(groups, centroids)])
    i, j = np.triu_indices(len(centroids), k=1)
    between = np.linalg.norm(centroids[i] - centroids[j], axis=1).mean()
    if between < 1e-9:
        raise DegenerateProjectionError("class centroids coincide")
    return float(within / between)


# -- distillation nature ---------------------------------------------------


@dataclass
class NatureScore:
    score: float
    regime: str  # "LS-like" | "KD-like"
    threshold: float

    def to_dict(self):
        return {"score": self.score, "regime": self.regime, "threshold": self.threshold}


def similarity_information(probs):
    """Per-row KL divergence of the renormalised similarity labels from uniform.

    The similarity labels are every entry except the row's argmax (first
    maximum on ties). Rows whose similarity labels are all equal, including
    all-zero, score exactly 0.
    """
    probs = np.asarray(probs, dtype=np.float64)
    n, C = probs.shape
    if C < 3:
        raise ValueError(f"similarity information needs at least 3 classes, got {C}")
    top = np.argmax(probs, axis=1)
    keep = np.ones_like(probs, dtype=bool)
    keep[np.arange(n), top] = False
    sim = probs[keep].reshape(n, C - 1)
    out = np.zeros(n)
    varied = ~np.all(sim == sim[:, :1], axis=1)
    s = sim[varied] / sim[varied].sum(axis=1, keepdims=True)
    terms = np.where(s > 0, s * np.log(np.where(s > 0, s * (C - 1), 1.0)), 0.0)
    out[varied] = np.maximum(terms.sum(axis=1), 0.0)
    return out


def classify_nature(soft, threshold=DEFAULT_NATURE_THRESHOLD) -> NatureScore:
    """Mean similarity information of a soft-label matrix; KD-like iff above ``threshold``."""
    probs = getattr(soft, "probs", soft)
    s = float(similarity_information(probs).mean())
    return NatureScore(s, "KD-like" if s > threshold else "LS-like", float(threshold))
