"""Bipartite matching between prediction and target sets, and the set losses.

Matching runs on detached values; the losses are built from autodiff ops so
gradients flow into the predictions. All matchers break ties toward the
lexicographically smallest assignment for reproducibility.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import PROB_CLAMP, Tensor
from .boxes import LabeledBox, encode_labeled

BRUTE_FORCE_MAX = 8
_TIE_TOL = 1e-9


@dataclass
class PaddedTargets:
    """Ground-truth boxes padded with no-object entries up to the query count.

    ``classes[j] == n_classes`` marks a padding entry; its encoding row is
    undefined (zeros). Real boxes occupy the first ``n_real`` rows.
    """

    classes: np.ndarray    # (M*,) int
    encodings: np.ndarray  # (M*, 10)
    n_real: int
    n_classes: int

    @property
    def m_star(self) -> int:
        return len(self.classes)

    def real_mask(self) -> np.ndarray:
        return self.classes < self.n_classes


def pad_targets(boxes: list[LabeledBox], m_star: int, n_classes: int) -> PaddedTargets:
    if len(boxes) > m_star:
        raise ValueError(f"{len(boxes)} ground-truth boxes exceed {m_star} queries")
    classes = np.full(m_star, n_classes, dtype=np.int64)
    enc = np.zeros((m_star, 10))
    for j, b in enumerate(boxes):
        classes[j] = b.class_id
        enc[j] = encode_labeled(b)
    return PaddedTargets(classes, enc, len(boxes), n_classes)


def assignment_total(cost: np.ndarray, sigma: np.ndarray) -> float:
    return math.fsum(cost[j, sigma[j]] for j in range(len(sigma)))


def _check_cost(cost: np.ndarray) -> np.ndarray:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got {cost.shape}")
    if np.isnan(cost).any():
        raise ValueError("cost matrix contains NaN")
    return cost


def _lsa_total(cost: np.ndarray) -> float:
    if cost.size == 0:
        return 0.0
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum())


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost perfect matching; lexicographically smallest among optima.

    Row j is fixed to the smallest column index that still permits an optimal
    completion of the remaining rows (verified by re-solving the subproblem).
    """
    cost = _check_cost(cost)
    n = cost.shape[0]
    best = _lsa_total(cost)
    tol = _TIE_TOL * max(1.0, abs(best))
    sigma = np.empty(n, dtype=np.int64)
    free = list(range(n))
    fixed = 0.0
    for j in range(n):
        rest_rows = np.arange(j + 1, n)
        for pos, i in enumerate(free):
            sub_cols = free[:pos] + free[pos + 1:]
            total = fixed + cost[j, i] + _lsa_total(cost[np.ix_(rest_rows, sub_cols)])
            if total <= best + tol:
                sigma[j] = i
                fixed += cost[j, i]
                free.pop(pos)
                break
        else:  # numerically impossible, but fail loudly rather than mis-assign
            raise RuntimeError("hungarian failed to extend a partial assignment")
    return sigma


def brute_force_match(cost: np.ndarray) -> np.ndarray:
    """Exhaustive oracle for small instances; same tie rule as :func:`hungarian`."""
    cost = _check_cost(cost)
    n = cost.shape[0]
    if n > BRUTE_FORCE_MAX:
        raise ValueError(f"brute_force_match limited to {BRUTE_FORCE_MAX}x{BRUTE_FORCE_MAX}")
    perms = _all_permutations(n)
    totals = cost[np.arange(n), perms].sum(axis=1)
    # argmin returns the first minimum; perms are in lexicographic order
    return perms[int(np.argmin(totals))].copy()


@functools.lru_cache(maxsize=None)
def _all_permutations(n: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(n))), dtype=np.int64)


def match_cost(targets: PaddedTargets, probs: np.ndarray, encodings: np.ndarray) -> np.ndarray:
    """Cost of assigning target row j to prediction column i.

    Real targets pay -p_i(c_j) plus the L1 distance between box encodings;
    padding rows cost zero everywhere so they never influence which
    predictions take real boxes.
    """
    m = targets.m_star
    if probs.shape[0] != m or encodings.shape[0] != m:
        raise ValueError(
            f"prediction set size {probs.shape[0]} != target set size {m}")
    cost = np.zeros((m, m))
    for j in range(targets.n_real):
        c = targets.classes[j]
        cost[j] = -probs[:, c] + np.abs(encodings - targets.encodings[j]).sum(axis=1)
    return cost


def set_loss(targets: PaddedTargets, probs: Tensor, encodings: Tensor,
             sigma: np.ndarray) -> Tensor:
    """Matched supervised loss: classification on every query, L1 on real boxes."""
    cls = ad.neg_log_prob(ad.gather_rows(probs, sigma), targets.classes)
    real = np.nonzero(targets.real_mask())[0]
    if len(real) == 0:
        return cls
    box = ad.l1(ad.gather_rows(encodings, sigma[real]),
                Tensor(targets.encodings[real]))
    return ad.add(cls, box)


def teacher_classes(teacher_probs: np.ndarray) -> np.ndarray:
    """Hard argmax labels over all C+1 classes, no-object included."""
    return np.argmax(teacher_probs, axis=1)


def distill_match(teacher_probs: np.ndarray, teacher_enc: np.ndarray,
                  student_probs: np.ndarray, student_enc: np.ndarray) -> np.ndarray:
    if teacher_probs.shape != student_probs.shape or teacher_enc.shape != student_enc.shape:
        raise ValueError(
            f"teacher/student set mismatch: {teacher_probs.shape} vs {student_probs.shape}")
    labels = teacher_classes(teacher_probs)
    logp = np.log(np.maximum(student_probs, PROB_CLAMP))
    m = teacher_probs.shape[0]
    cost = np.empty((m, m))
    for j in range(m):
        cost[j] = -logp[:, labels[j]] + np.abs(student_enc - teacher_enc[j]).sum(axis=1)
    return hungarian(cost)


def distill_loss(teacher_probs: np.ndarray, teacher_enc: np.ndarray,
                 student_probs: Tensor, student_enc: Tensor,
                 sigma_d: np.ndarray, mask_empty: bool = False) -> Tensor:
    """Matched teacher-imitation loss.

    The box term covers every query pair by default; ``mask_empty`` drops pairs
    whose teacher label is no-object.
    """
    labels = teacher_classes(teacher_probs)
    cls = ad.neg_log_prob(ad.gather_rows(student_probs, sigma_d), labels)
    n_classes = teacher_probs.shape[1] - 1
    rows = np.nonzero(labels < n_classes)[0] if mask_empty else np.arange(len(labels))
    if len(rows) == 0:
        return cls
    box = ad.l1(ad.gather_rows(student_enc, sigma_d[rows]),
                Tensor(teacher_enc[rows]))
    return ad.add(cls, box)


def combined_loss(sup: Tensor, distill: Tensor, alpha: float = 1.0,
                  beta: float = 1.0) -> Tensor:
    return ad.add(ad.scale(sup, alpha), ad.scale(distill, beta))
