"""Dynamic-programming token alignment between two tokenizations of one text.

Two models reading the same string produce different token sequences; to
transfer per-position knowledge between them, every target position needs a
source position to borrow logits from. The alignment minimizes edit cost
where substituting token a for token b costs their character-level edit
distance normalized by the longer length, and insert/delete cost 1.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

_TIE_EPS = 1e-12


@dataclass
class TokenAlignmentMap:
    """For each target position j, mapping[j] is the source position whose
    logits stand in for it. Monotone non-decreasing by construction."""

    src_tokens: list[str]
    tgt_tokens: list[str]
    mapping: list[int]
    cost: float


def levenshtein(a: str, b: str) -> int:
    """Classic character edit distance (unit costs)."""
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1,
                           prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


@lru_cache(maxsize=200_000)
def substitution_cost(a: str, b: str) -> float:
    """Normalized edit distance: 0 for identical tokens, 1 for disjoint ones."""
    if a == b:
        return 0.0
    return levenshtein(a, b) / max(len(a), len(b))


def align_tokens(src_tokens, tgt_tokens) -> TokenAlignmentMap:
    """Minimum-cost edit script from src to tgt, resolved into a position map.

    Ties during backtrace prefer substitution over insertion over deletion.
    When several source tokens collapse onto one target (or one source spreads
    over several targets), the walk records the last source position consumed
    when each target token is emitted: deletions advance the source cursor
    first, and inserted targets reuse the most recently consumed source.
    """
    src = list(src_tokens)
    tgt = list(tgt_tokens)
    if not src or not tgt:
        raise ValueError("align_tokens requires non-empty token lists")
    m, n = len(src), len(tgt)

    cost = np.zeros((m + 1, n + 1))
    cost[0, :] = np.arange(n + 1)
    cost[:, 0] = np.arange(m + 1)
    for i in range(1, m + 1):
        row = cost[i]
        above = cost[i - 1]
        s = src[i - 1]
        for j in range(1, n + 1):
            row[j] = min(above[j - 1] + substitution_cost(s, tgt[j - 1]),
                         row[j - 1] + 1.0,
                         above[j] + 1.0)

    # backtrace; ops come out in reverse order
    ops = []
    i, j = m, n
    while i > 0 or j > 0:
        if i > 0 and j > 0 and abs(
                cost[i - 1, j - 1] + substitution_cost(src[i - 1], tgt[j - 1])
                - cost[i, j]) <= _TIE_EPS:
            ops.append("sub")
            i, j = i - 1, j - 1
        elif j > 0 and abs(cost[i, j - 1] + 1.0 - cost[i, j]) <= _TIE_EPS:
            ops.append("ins")
            j -= 1
        else:
            ops.append("del")
            i -= 1
    ops.reverse()

    mapping: list[int] = []
    consumed = 0
    for op in ops:
        if op == "sub":
            mapping.append(consumed)
            consumed += 1
        elif op == "del":
            consumed += 1
        else:  # ins
            mapping.append(max(consumed - 1, 0))
    assert len(mapping) == n

    return TokenAlignmentMap(src, tgt, mapping, float(cost[m, n]))


def project_logits(src_logits: np.ndarray, amap: TokenAlignmentMap) -> np.ndarray:
    """Gather source logit rows into target positions: out[j] = src[mapping[j]].

    Values are referenced, not transformed; the vocabulary axis stays the
    source model's.
    """
    src_logits = np.asarray(src_logits)
    if src_logits.ndim != 2:
        raise ValueError("project_logits expects a (positions, vocab) array")
    if src_logits.shape[0] != len(amap.src_tokens):
        raise ValueError("logit row count does not match source token count")
    idx = np.asarray(amap.mapping, dtype=np.int64)
    return src_logits[idx]
