"""Temperature softmax, label smoothing and response-based distillation losses.

All logarithms are natural. Loss functions accept a single example
(``logits`` of shape ``(C,)``) or a batch ``(B, C)``; batch values are means
over rows and the returned logit gradients carry the matching ``1/B`` factor.
Inside the losses the log-probabilities come from a max-shifted log-softmax,
so values stay finite for any finite logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

EPS_LOG = 1e-12


@dataclass(frozen=True)
class LossConfig:
    alpha_ls: float = 0.0
    alpha_kd: float = 0.99
    temperature: float = 9.0
    kl_t_squared: bool = True
    eps_log: float = EPS_LOG

    def __post_init__(self):
        for name in ("alpha_ls", "alpha_kd"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")


def _check_t(T):
    if not T > 0:
        raise ValueError(f"temperature must be > 0, got {T}")


def log_softmax_t(logits, T=1.0):
    _check_t(T)
    z = np.asarray(logits, dtype=np.float64) / T
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_t(logits, T=1.0):
    """exp(z_i / T) / sum_j exp(z_j / T), evaluated max-shifted in float64."""
    _check_t(T)
    z = np.asarray(logits, dtype=np.float64) / T
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def one_hot(labels, C):
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (C,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def ls_labels(cls, C, alpha_ls):
    """(1 - alpha) * onehot(cls) + alpha / C; ``cls`` may be an int or an array."""
    if not 0.0 <= alpha_ls <= 1.0:
        raise ValueError(f"alpha_ls must lie in [0, 1], got {alpha_ls}")
    cls_arr = np.asarray(cls)
    if np.any(cls_arr < 0) or np.any(cls_arr >= C):
        raise ValueError(f"class {cls} out of range for C={C}")
    return (1.0 - alpha_ls) * one_hot(cls_arr, C) + alpha_ls / C


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"distribution shapes differ: {a.shape} vs {b.shape}")
    return a, b


def cross_entropy(q, p, eps_log=EPS_LOG):
    """H(q, p) = -sum q log max(p, eps); one value per row."""
    q, p = _pair(q, p)
    return -(q * np.log(np.maximum(p, eps_log))).sum(axis=-1)


def kl_div(a, b, eps_log=EPS_LOG):
    """D_KL(a || b) = sum a log(a / b), clamped inside the logs; rows with a_i = 0 contribute 0."""
    a, b = _pair(a, b)
    la = np.log(np.maximum(a, eps_log))
    lb = np.log(np.maximum(b, eps_log))
    terms = np.where(a > 0, a * (la - lb), 0.0)
    return np.maximum(terms.sum(axis=-1), 0.0)


def _batch(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 1 else x, x.ndim == 1


def _targets(q, C):
    q = np.asarray(q)
    if np.issubdtype(q.dtype, np.integer):
        return one_hot(q, C)
    return q.astype(np.float64)


def _xlogx(a):
    return np.where(a > 0, a * np.log(np.where(a > 0, a, 1.0)), 0.0)


def ls_loss(q, logits, cfg: LossConfig):
    """(1 - a) H(q, p) + a KL(u, p) with p = softmax(logits).

    Returns ``(value, dvalue_dlogits)``; the gradient is ``p - q'`` where
    ``q'`` is the smoothed target.
    """
    z, single = _batch(logits)
    n, C = z.shape
    q = _targets(q, C).reshape(n, C)
    a = cfg.alpha_ls
    logp = log_softmax_t(z, 1.0)
    ce = -(q * logp).sum(axis=1)
    kl_u = -np.log(C) - logp.mean(axis=1)
    value = float(((1.0 - a) * ce + a * kl_u).mean())
    p = np.exp(logp)
    grad = ((1.0 - a) * (p - q) + a * (p - 1.0 / C)) / n
    return value, (grad[0] if single else grad)


def kd_loss(q_true, teacher_probs_T, logits, cfg: LossConfig):
    """(1 - a) H(q_true, p) + a * s * KL(p_T^teacher, p_T).

    ``p = softmax(logits)``, ``p_T = softmax(logits / T)`` and ``s = T**2`` when
    ``cfg.kl_t_squared`` is set, else 1. ``teacher_probs_T`` must already be
    softened at ``cfg.temperature``. Returns ``(value, dvalue_dlogits)``.
    """
    z, single = _batch(logits)
    n, C = z.shape
    q = _targets(q_true, C).reshape(n, C)
    t = np.asarray(teacher_probs_T, dtype=np.float64).reshape(n, C)
    T = cfg.temperature
    a = cfg.alpha_kd
    s = T * T if cfg.kl_t_squared else 1.0
    logp = log_softmax_t(z, 1.0)
    logp_T = log_softmax_t(z, T)
    ce = -(q * logp).sum(axis=1)
    kl = (_xlogx(t) - t * logp_T).sum(axis=1)
    value = float(((1.0 - a) * ce + a * s * kl).mean())
    grad = ((1.0 - a) * (np.exp(logp) - q) + (a * s / T) * (np.exp(logp_T) - t)) / n
    return value, (grad[0] if single else grad)


def ce_loss(labels, logits):
    """Plain cross-entropy against hard labels (``kd_loss`` at alpha_kd = 0)."""
    return ls_loss(labels, logits, LossConfig(alpha_ls=0.0))
