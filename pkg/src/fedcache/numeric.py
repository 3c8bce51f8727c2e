"""Dense float64 kernel: tempered softmax, cross-entropy, KL divergence, SGD.

Every function accepts a single vector; ``softmax_temp`` and the loss
gradients also accept a 2-D batch (one row per sample).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import InvalidArgument

KL_TEACHER_FLOOR = 1e-12


def as_vector(values, name: str = "vector") -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise InvalidArgument(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument(f"{name} contains non-finite entries")
    return arr


def softmax_temp(logits, temperature: float = 1.0) -> np.ndarray:
    """Softmax of ``logits / temperature`` along the last axis."""
    if not temperature > 0 or not np.isfinite(temperature):
        raise InvalidArgument(f"temperature must be positive, got {temperature!r}")
    z = as_vector(logits, "logits") / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(pred, label: int) -> float:
    p = np.asarray(pred, dtype=np.float64)
    if not 0 <= label < p.shape[-1]:
        raise InvalidArgument(f"label {label} out of range for {p.shape[-1]} classes")
    return float(-np.log(p[label]))


def soft_cross_entropy(pred, target) -> float:
    """Cross-entropy of ``pred`` against a soft target distribution."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise InvalidArgument(f"length mismatch: {p.shape} vs {t.shape}")
    return float(-np.sum(t * np.log(p)))


def kl_div(student, teacher) -> float:
    """KL(student || teacher); teacher entries are floored at 1e-12."""
    p = np.asarray(student, dtype=np.float64)
    q = np.asarray(teacher, dtype=np.float64)
    if p.shape != q.shape:
        raise InvalidArgument(f"length mismatch: {p.shape} vs {q.shape}")
    q = np.maximum(q, KL_TEACHER_FLOOR)
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def sgd_step(params, grads, lr: float) -> np.ndarray:
    w = np.asarray(params, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    if w.shape != g.shape:
        raise InvalidArgument(f"length mismatch: {w.shape} vs {g.shape}")
    if not lr > 0:
        raise InvalidArgument(f"lr must be positive, got {lr!r}")
    return w - lr * g


def finite_diff_grad(
    loss_fn: Callable[[np.ndarray], float], point, eps: float = 1e-5
) -> np.ndarray:
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        old = x.flat[i]
        x.flat[i] = old + eps
        up = loss_fn(x)
        x.flat[i] = old - eps
        down = loss_fn(x)
        x.flat[i] = old
        grad.flat[i] = (up - down) / (2 * eps)
    return grad


# Gradients with respect to the raw logits, batched over rows.

def ce_logit_grad(probs: np.ndarray, labels: np.ndarray, temperature: float) -> np.ndarray:
    """d/dz of -log softmax(z/T)[y]."""
    g = probs.copy()
    g[np.arange(len(labels)), labels] -= 1.0
    return g / temperature


def kl_logit_grad(probs: np.ndarray, teacher: np.ndarray, temperature: float) -> np.ndarray:
    """d/dz of KL(softmax(z/T) || teacher) with the teacher held constant."""
    log_ratio = np.log(np.maximum(probs, 1e-300)) - np.log(np.maximum(teacher, KL_TEACHER_FLOOR))
    centred = log_ratio - np.sum(probs * log_ratio, axis=-1, keepdims=True)
    return probs * centred / temperature


def soft_ce_logit_grad(probs: np.ndarray, target: np.ndarray, temperature: float) -> np.ndarray:
    """d/dz of -sum(t * log softmax(z/T)) for a target that sums to one."""
    return (probs - target) / temperature
