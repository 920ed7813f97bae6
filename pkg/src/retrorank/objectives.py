"""Training losses: symmetric contrastive, smoothed listwise with entropy,
and snapshot-teacher KLD. Each returns (loss, gradient w.r.t. scores)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NonSquare(ValueError):
    pass


class NoPositive(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class TargetDistribution:
    probs: np.ndarray
    positive_mask: np.ndarray


def _log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(_log_softmax(x, axis=axis))


def stage1_loss(S: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean of row-wise and column-wise cross-entropies against the diagonal
    of the in-batch similarity matrix."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise NonSquare(f"similarity matrix must be square, got {S.shape}")
    B = S.shape[0]
    log_rows = _log_softmax(S, axis=1)
    log_cols = _log_softmax(S, axis=0)
    diag = np.arange(B)
    loss = -0.5 * (log_rows[diag, diag].mean() + log_cols[diag, diag].mean())
    eye = np.eye(B)
    grad = 0.5 / B * ((np.exp(log_rows) - eye) + (np.exp(log_cols) - eye))
    return float(loss), grad


def smoothed_targets(positive_mask: np.ndarray, epsilon: float) -> TargetDistribution:
    """Positives share (1-eps)/m plus the uniform eps/C floor; negatives get
    eps/C."""
    mask = np.asarray(positive_mask, dtype=bool)
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must be in [0, 1), got {epsilon}")
    m = int(mask.sum())
    if m == 0:
        raise NoPositive("target distribution needs at least one positive")
    C = mask.size
    probs = np.full(C, epsilon / C, dtype=np.float64)
    probs[mask] += (1.0 - epsilon) / m
    return TargetDistribution(probs, mask)


def stage2_loss(
    scores: np.ndarray, targets: TargetDistribution, beta: float
) -> tuple[float, np.ndarray]:
    """Cross-entropy of the candidate-set softmax policy against the smoothed
    targets, minus beta times the policy entropy."""
    scores = np.asarray(scores, dtype=np.float64)
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    if scores.shape != targets.probs.shape:
        raise LengthMismatch(
            f"scores length {scores.shape} != targets length {targets.probs.shape}"
        )
    log_pi = _log_softmax(scores)
    pi = np.exp(log_pi)
    entropy = -(pi * log_pi).sum()
    loss = -(targets.probs * log_pi).sum() - beta * entropy
    grad = (pi - targets.probs) + beta * pi * (log_pi + entropy)
    return float(loss), grad


def kld_loss(
    teacher_scores: np.ndarray, student_scores: np.ndarray
) -> tuple[float, np.ndarray]:
    """KL(softmax(teacher) || softmax(student)); gradient w.r.t. student only."""
    t = np.asarray(teacher_scores, dtype=np.float64)
    s = np.asarray(student_scores, dtype=np.float64)
    if t.shape != s.shape:
        raise LengthMismatch(f"teacher {t.shape} vs student {s.shape}")
    log_p = _log_softmax(t)
    log_q = _log_softmax(s)
    p = np.exp(log_p)
    loss = (p * (log_p - log_q)).sum()
    grad = np.exp(log_q) - p
    return float(loss), grad


def stage2_loss_rows(
    scores: np.ndarray, target_probs: np.ndarray, beta: float
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized stage2_loss over rows of a (B, C) score matrix; returns
    per-row losses and the (B, C) gradient of the per-row loss."""
    scores = np.asarray(scores, dtype=np.float64)
    log_pi = _log_softmax(scores, axis=1)
    pi = np.exp(log_pi)
    entropy = -(pi * log_pi).sum(1)
    losses = -(target_probs * log_pi).sum(1) - beta * entropy
    grad = (pi - target_probs) + beta * pi * (log_pi + entropy[:, None])
    return losses, grad


def kld_loss_rows(
    teacher_scores: np.ndarray, student_scores: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized kld_loss over rows; gradient w.r.t. student rows."""
    log_p = _log_softmax(np.asarray(teacher_scores, dtype=np.float64), axis=1)
    log_q = _log_softmax(np.asarray(student_scores, dtype=np.float64), axis=1)
    p = np.exp(log_p)
    losses = (p * (log_p - log_q)).sum(1)
    grad = np.exp(log_q) - p
    return losses, grad
