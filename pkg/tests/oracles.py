"""Independent reference implementations used to check the library.

Everything here is deliberately written as plain loops over the defining
formulas, sharing no code with the package.
"""
from __future__ import annotations

import math

import numpy as np


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))


def anchor_loss_loop(anchors, others, i: int, tau: float, exclude_positive: bool = False) -> float:
    """One anchor's temperature-scaled contrastive loss, looped term by term.

    s1 is the positive pair, s2 sums same-stack negatives (j != i), s3 sums
    every cross-stack term (including j == i unless excluded).
    """
    m = len(anchors)
    s1 = math.exp(cosine(anchors[i], others[i]) / tau)
    s2 = sum(math.exp(cosine(anchors[i], anchors[j]) / tau) for j in range(m) if j != i)
    s3 = sum(math.exp(cosine(anchors[i], others[j]) / tau)
             for j in range(m) if not (exclude_positive and j == i))
    return -math.log(s1 / (s2 + s3))


def batch_loss_loop(stack_a, stack_b, tau: float, exclude_positive: bool = False) -> float:
    m = len(stack_a)
    total = 0.0
    for i in range(m):
        total += anchor_loss_loop(stack_a, stack_b, i, tau, exclude_positive)
        total += anchor_loss_loop(stack_b, stack_a, i, tau, exclude_positive)
    return total


def cross_modal_loss_loop(z_eeg_a, z_eeg_b, z_pps_a, z_pps_b, tau: float,
                          exclude_positive: bool = False) -> float:
    return (batch_loss_loop(z_eeg_a, z_pps_a, tau, exclude_positive)
            + batch_loss_loop(z_eeg_b, z_pps_b, tau, exclude_positive))


def first_canonical_correlation(x: np.ndarray, y: np.ndarray, reg: float = 1e-6) -> float:
    """Top canonical correlation between two [channels, samples] signals."""
    x = x - x.mean(axis=1, keepdims=True)
    y = y - y.mean(axis=1, keepdims=True)
    n = x.shape[1]
    cxx = x @ x.T / n + reg * np.eye(x.shape[0])
    cyy = y @ y.T / n + reg * np.eye(y.shape[0])
    cxy = x @ y.T / n

    def inv_sqrt(a):
        w, v = np.linalg.eigh(a)
        return v @ np.diag(1.0 / np.sqrt(np.maximum(w, 1e-12))) @ v.T

    m = inv_sqrt(cxx) @ cxy @ inv_sqrt(cyy)
    return float(np.linalg.svd(m, compute_uv=False)[0])
