"""Pooled-logits knowledge transfer between models with different vocabularies.

Raw logit rows from two tokenizers are not comparable, so each position's
probability vector is reduced to its top-K masses (sorted descending) plus a
remainder bucket. KL divergence between two pooled rows is then well defined
regardless of vocabulary, and the mutual-learning losses mix that transfer
term with ordinary supervised cross-entropy.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (LOG_FLOOR, Tensor, add, cross_entropy_at,
                       kl_divergence_rows, scale, softmax, softmax_rows, wrap)


@dataclass
class PooledDistribution:
    """Top-k probability masses, sorted descending, plus a remainder bucket.

    values has length k + 1 and sums to 1; the remainder is strictly positive
    because the softmax never assigns zero mass.
    """

    values: np.ndarray
    k: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.k + 1,):
            raise ValueError("pooled distribution must hold k+1 values")


def _pool_rows(probs: np.ndarray, k: int) -> np.ndarray:
    """(S, V) probabilities -> (S, k+1) pooled rows. Pure array math."""
    part = np.sort(probs, axis=-1)[:, ::-1]
    top = part[:, :k]
    rest = part[:, k:].sum(axis=-1, keepdims=True)
    return np.concatenate([top, rest], axis=-1)


def _check_k(k: int, vocab: int) -> None:
    if not 1 <= k < vocab:
        raise ValueError(f"pool size k={k} must satisfy 1 <= k < vocab ({vocab})")


def pool_logits(logits, k: int) -> PooledDistribution:
    """Pool one logit vector into its top-k + remainder distribution."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError("pool_logits expects a vector")
    _check_k(k, z.size)
    p = softmax(z)
    return PooledDistribution(_pool_rows(p[None, :], k)[0], k)


def pool_probs_rows(probs: Tensor, k: int) -> Tensor:
    """Graph op: pool each probability row into top-k + remainder.

    The selection indices come from the forward values; gradients route back
    to the selected entries, and the remainder slot spreads its gradient over
    every unselected entry.
    """
    probs = wrap(probs)
    S, V = probs.data.shape
    _check_k(k, V)
    order = np.argsort(-probs.data, axis=-1, kind="stable")
    top_idx = order[:, :k]
    top = np.take_along_axis(probs.data, top_idx, axis=-1)
    rest_vals = np.take_along_axis(probs.data, order[:, k:], axis=-1)
    out = np.concatenate([top, rest_vals.sum(axis=-1, keepdims=True)], axis=-1)

    def bwd(g):
        if probs.requires_grad:
            gp = np.repeat(g[:, k:], V, axis=-1)  # remainder grad everywhere
            np.put_along_axis(gp, top_idx, g[:, :k], axis=-1)
            probs._accum(gp)

    return Tensor(out, requires_grad=probs.requires_grad, parents=(probs,), bwd=bwd) \
        if probs.requires_grad else Tensor(out)


def kt_loss(teacher_logits: np.ndarray, student_logits, k: int) -> Tensor:
    """Sum over positions of KL(pooled teacher row || pooled student row).

    The teacher side is a plain array (already aligned into student positions
    when vocabularies differ) and receives no gradient. When the sequences
    have different lengths only the first min(S1, S2) rows are compared.
    """
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    student_logits = wrap(student_logits)
    if teacher_logits.ndim != 2 or student_logits.data.ndim != 2:
        raise ValueError("kt_loss expects (positions, vocab) logit arrays")
    _check_k(k, teacher_logits.shape[1])
    _check_k(k, student_logits.data.shape[1])
    s = min(teacher_logits.shape[0], student_logits.data.shape[0])
    if s == 0:
        raise ValueError("kt_loss needs at least one position")

    t_rows = teacher_logits[:s]
    t_rows = t_rows - t_rows.max(axis=-1, keepdims=True)
    t_probs = np.exp(t_rows)
    t_probs /= t_probs.sum(axis=-1, keepdims=True)
    t_pooled = _pool_rows(t_probs, k)

    s_slice = _slice_rows(student_logits, s)
    s_pooled = pool_probs_rows(softmax_rows(s_slice), k)
    return kl_divergence_rows(t_pooled, s_pooled, reduce="sum")


def _slice_rows(t: Tensor, s: int) -> Tensor:
    if t.data.shape[0] == s:
        return t

    def bwd(g):
        if t.requires_grad:
            gt = np.zeros_like(t.data)
            gt[:s] = g
            t._accum(gt)

    return Tensor(t.data[:s], requires_grad=t.requires_grad, parents=(t,), bwd=bwd) \
        if t.requires_grad else Tensor(t.data[:s])


def _mixture_loss(student_logits: Tensor, teacher_logits_aligned, answer_ids,
                  answer_positions, mix: float, k: int) -> Tensor:
    if not 0.0 <= mix <= 1.0:
        raise ValueError("mixing weight must lie in [0, 1]")
    if mix == 0.0:
        return cross_entropy_at(student_logits, answer_ids, answer_positions)
    transfer = kt_loss(teacher_logits_aligned, student_logits, k)
    if mix == 1.0:
        return transfer
    label = cross_entropy_at(student_logits, answer_ids, answer_positions)
    return add(scale(transfer, mix), scale(label, 1.0 - mix))


def saml_loss_dpm(dpm_logits, lm_logits_aligned, answer_ids, answer_positions,
                  alpha: float, k: int) -> Tensor:
    """Proxy-side mutual loss: alpha * transfer from the device LM + (1 - alpha)
    * supervised loss on the proxy's own answer positions.

    At alpha = 0 this is exactly the supervised loss (the transfer term is
    never built), and at alpha = 1 exactly the transfer term.
    """
    return _mixture_loss(dpm_logits, lm_logits_aligned, answer_ids,
                         answer_positions, alpha, k)


def saml_loss_lm(lm_logits, dpm_logits_aligned, answer_ids, answer_positions,
                 beta: float, k: int) -> Tensor:
    """LM-side mutual loss, the mirror image with its own weight beta."""
    return _mixture_loss(lm_logits, dpm_logits_aligned, answer_ids,
                         answer_positions, beta, k)
