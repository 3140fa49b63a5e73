"""Self-verification suite: exhaustive and randomized oracles for the pieces
whose correctness everything else leans on.

Each check accepts the implementation under test as a parameter (defaulting to
the production one), so a deliberately broken implementation must make the
named check fail — the suite is itself testable.
"""

import functools
import itertools
import math
import time
from dataclasses import dataclass

import numpy as np

from cotune import numerics as nm
from cotune import transfer as tr
from cotune.alignment import align_tokens
from cotune.evaluation import rouge_l
from cotune.federation import aggregate_lora
from cotune.model import (ModelConfig, TinyTransformer, attach_domain_adapters,
                          attach_lora, sft_loss)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


# -- lattice machinery for the exhaustive alignment/LCS oracles --------------------
#
# For single-character tokens every cost in the alignment DP (and every entry
# in the LCS table) depends only on the pairwise equality matrix of the two
# sequences, so the full cross product of sequences collapses into one
# representative per distinct equality matrix. The oracle then scores each
# representative against every monotone lattice path (every edit script),
# which is exhaustive-by-construction.


@functools.lru_cache(maxsize=None)
def _lattice_paths(m: int, n: int):
    """All edit scripts (0,0)->(m,n): diagonal indicator rows + indel counts."""
    cells: list[tuple[int, int]] = []
    rows: list[np.ndarray] = []
    indels: list[int] = []

    def walk(i, j, k):
        if i == m and j == n:
            row = np.zeros(m * n)
            for (a, b) in cells:
                row[a * n + b] = 1.0
            rows.append(row)
            indels.append(k)
            return
        if i < m and j < n:
            cells.append((i, j))
            walk(i + 1, j + 1, k)
            cells.pop()
        if i < m:
            walk(i + 1, j, k + 1)
        if j < n:
            walk(i, j + 1, k + 1)

    walk(0, 0, 0)
    return np.stack(rows), np.array(indels, dtype=np.float64)


@functools.lru_cache(maxsize=None)
def _equality_classes(m: int, n: int, alphabet: int):
    """Unique equality matrices over all sequence pairs, plus one witness pair."""
    a = np.array(list(itertools.product(range(alphabet), repeat=m)), dtype=np.int8)
    b = np.array(list(itertools.product(range(alphabet), repeat=n)), dtype=np.int8)
    eq = (a[:, None, :, None] == b[None, :, None, :])
    flat = eq.reshape(-1, m * n).astype(np.uint8)
    uniq, first = np.unique(flat, axis=0, return_index=True)
    witnesses = [(a[i // len(b)], b[i % len(b)]) for i in first]
    return uniq.astype(np.float64), witnesses


def check_alignment(align_fn=None, max_len: int = 6, alphabet: int = 3,
                    tol: float = 1e-9):
    """DP alignment cost equals the exhaustive edit-script minimum."""
    align_fn = align_fn or align_tokens
    letters = [chr(ord("a") + i) for i in range(alphabet)]
    pairs_covered = 0
    for m in range(1, max_len + 1):
        for n in range(1, max_len + 1):
            paths, indels = _lattice_paths(m, n)
            classes, witnesses = _equality_classes(m, n, alphabet)
            # substitution costs: 0 on equal letters, 1 otherwise
            sub = 1.0 - classes
            # chunked: classes x paths can reach ~88k x 9k cells at (6,6)
            oracle = np.empty(len(sub))
            pt = paths.T
            for lo in range(0, len(sub), 2048):
                blk = sub[lo:lo + 2048] @ pt + indels[None, :]
                oracle[lo:lo + 2048] = blk.min(axis=1)
            for row, (src, tgt) in enumerate(witnesses):
                got = align_fn([letters[i] for i in src],
                               [letters[j] for j in tgt]).cost
                if abs(got - oracle[row]) > tol:
                    return False, (f"cost mismatch at m={m} n={n} "
                                   f"src={src.tolist()} tgt={tgt.tolist()}: "
                                   f"dp={got} oracle={oracle[row]}")
            pairs_covered += alphabet ** m * alphabet ** n
    return True, f"{pairs_covered} sequence pairs via equality-class dedup"


def _is_subsequence(sub, seq) -> bool:
    it = iter(seq)
    return all(x in it for x in sub)


def _f1(lcs: float, m: int, n: int) -> float:
    if lcs == 0:
        return 0.0
    p, r = lcs / m, lcs / n
    return 2 * p * r / (p + r)


def check_rouge_lcs(rouge_fn=None, max_len: int = 6, alphabet: int = 3,
                    tol: float = 1e-12):
    """Word-overlap score agrees with two independent brute-force oracles.

    Stage one enumerates every subsequence directly (no dedup) for lengths up
    to 3. Stage two covers lengths up to max_len through equality-class dedup,
    with the common-subsequence length obtained as the maximum matched-cell
    count over every monotone lattice path, which enumerates every possible
    monotone word matching.
    """
    rouge_fn = rouge_fn or rouge_l
    words = ["red", "blue", "green", "gold", "teal"][:alphabet]
    seqs = [s for length in range(1, 4)
            for s in itertools.product(range(alphabet), repeat=length)]
    for src in seqs:
        for tgt in seqs:
            a = [words[i] for i in src]
            b = [words[j] for j in tgt]
            best = 0
            for mask in range(1, 1 << len(a)):
                cand = [a[i] for i in range(len(a)) if mask >> i & 1]
                if len(cand) > best and _is_subsequence(cand, b):
                    best = len(cand)
            got = rouge_fn(" ".join(a), " ".join(b))
            want = _f1(best, len(a), len(b))
            if abs(got - want) > tol:
                return False, (f"direct-stage mismatch a={a} b={b}: "
                               f"got={got} oracle={want}")

    pairs_covered = 0
    for m in range(1, max_len + 1):
        for n in range(1, max_len + 1):
            paths, _ = _lattice_paths(m, n)
            classes, witnesses = _equality_classes(m, n, alphabet)
            lcs = np.empty(len(classes))
            pt = paths.T
            for lo in range(0, len(classes), 2048):
                lcs[lo:lo + 2048] = (classes[lo:lo + 2048] @ pt).max(axis=1)
            for row, (src, tgt) in enumerate(witnesses):
                a = [words[i] for i in src]
                b = [words[j] for j in tgt]
                got = rouge_fn(" ".join(a), " ".join(b))
                want = _f1(lcs[row], m, n)
                if abs(got - want) > tol:
                    return False, (f"score mismatch at m={m} n={n} a={a} b={b}: "
                                   f"got={got} oracle={want}")
            pairs_covered += alphabet ** m * alphabet ** n
    return True, f"{pairs_covered} word-sequence pairs via equality-class dedup"


def check_pooling(pool_fn=None, n: int = 1000, seed: int = 0,
                  tol: float = 1e-12):
    """Pooled distribution equals the sort-then-split oracle."""
    pool_fn = pool_fn or tr.pool_logits
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        v = int(rng.integers(2, 33))
        k = int(rng.integers(1, v))
        logits = rng.normal(0.0, 3.0, size=v)
        shifted = logits - logits.max()
        e = np.exp(shifted)
        probs = sorted(e / e.sum(), reverse=True)
        want = np.array(probs[:k] + [sum(probs[k:])])
        got = pool_fn(logits, k).values
        worst = max(worst, float(np.max(np.abs(got - want))))
        if worst > tol:
            return False, f"max abs diff {worst} exceeds {tol} (V={v}, K={k})"
    return True, f"{n} random vectors, max abs diff {worst:.2e}"


def check_kl(kl_fn=None, n: int = 500, seed: int = 1, tol: float = 1e-12):
    """KL divergence matches a plain summation loop."""
    kl_fn = kl_fn or nm.kl_divergence
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        v = int(rng.integers(2, 24))
        p = rng.dirichlet(np.full(v, 0.7))
        q = rng.dirichlet(np.full(v, 0.7))
        want = sum(pi * (math.log(pi) - math.log(qi))
                   for pi, qi in zip(p, q) if pi > 0)
        got = kl_fn(p, q)
        worst = max(worst, abs(got - want))
        if worst > tol:
            return False, f"diff {worst} exceeds {tol}"
    return True, f"{n} simplex pairs, max abs diff {worst:.2e}"


def check_aggregate(agg_fn=None, n: int = 50, seed: int = 2,
                    tol: float = 1e-15):
    """Aggregation equals the naive elementwise mean."""
    agg_fn = agg_fn or aggregate_lora
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        members = int(rng.integers(1, 6))
        shapes = {"a": (int(rng.integers(1, 5)), int(rng.integers(1, 5))),
                  "b": (int(rng.integers(1, 7)),)}
        sets = [{k: rng.normal(size=s) for k, s in shapes.items()}
                for _ in range(members)]
        got = agg_fn(sets)
        for k in shapes:
            acc = np.zeros(shapes[k])
            for s in sets:
                acc += s[k]
            want = acc / members
            worst = max(worst, float(np.max(np.abs(got[k] - want))))
        if worst > tol:
            return False, f"diff {worst} exceeds {tol}"
    return True, f"{n} random block sets, max abs diff {worst:.2e}"


def _grad_fixture(seed: int):
    rng = np.random.default_rng(seed)
    vocab = int(rng.integers(8, 12))
    cfg = ModelConfig(layers=1, heads=2, hidden=6, ffn=10, vocab=vocab,
                      max_seq=12)
    model = TinyTransformer(cfg, seed=seed)
    attach_lora(model, ("wq", "wv"), rank=2, seed=seed + 1)
    attach_domain_adapters(model, bottleneck=4, seed=seed + 2)
    model.mark_trainable(base=False, lora=True, adapters=True)
    seq = list(rng.integers(0, vocab, size=6))
    answers = list(rng.integers(0, vocab, size=3))
    positions = [2, 3, 4]
    teacher = rng.normal(0.0, 2.0, size=(6, vocab + 3))
    return model, seq, answers, positions, teacher


def check_gradients(seeds: int = 20, tol: float = 1e-4):
    """Analytic gradients of all four training losses vs central differences."""
    worst = {"supervised": 0.0, "transfer": 0.0, "mixture_proxy": 0.0,
             "mixture_peer": 0.0}
    for seed in range(seeds):
        model, seq, answers, positions, teacher = _grad_fixture(seed)
        params = [p for p in model.parameters() if p.trainable]
        cases = {
            "supervised": lambda: sft_loss(model, seq[:3], answers),
            "transfer": lambda: tr.kt_loss(teacher, model.forward(seq), k=5),
            "mixture_proxy": lambda: tr.saml_loss_dpm(
                model.forward(seq), teacher, answers, positions, 0.45, 5),
            "mixture_peer": lambda: tr.saml_loss_lm(
                model.forward(seq), teacher, answers, positions, 0.8, 5),
        }
        for name, fn in cases.items():
            err = nm.grad_check(fn, params, eps=1e-5)
            worst[name] = max(worst[name], err)
            if err > tol:
                return False, f"{name} gradient error {err:.2e} at seed {seed}"
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return True, f"{seeds} seeds; worst errors: {detail}"


CHECKS = (
    ("alignment", check_alignment),
    ("pooling", check_pooling),
    ("kl", check_kl),
    ("rouge-lcs", check_rouge_lcs),
    ("aggregate", check_aggregate),
    ("gradients", check_gradients),
)


def run_checks(only=None) -> list[CheckResult]:
    names = {name for name, _ in CHECKS}
    if only:
        unknown = set(only) - names
        if unknown:
            raise ValueError(f"unknown check {sorted(unknown)[0]!r}; "
                             f"available: {sorted(names)}")
    results = []
    for name, fn in CHECKS:
        if only and name not in only:
            continue
        start = time.perf_counter()
        passed, detail = fn()
        results.append(CheckResult(name, passed, detail,
                                   time.perf_counter() - start))
    return results
