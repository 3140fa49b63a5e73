"""Sequence-overlap metrics and per-round model evaluation.

Both metrics normalize the same way (trim, collapse whitespace, lowercase),
so an exact match always implies a perfect overlap score.
"""

from dataclasses import dataclass, field

from cotune.data import render_prompt
from cotune.model import generate_text


def _normalize(text: str) -> str:
    return " ".join(text.split()).lower()


def _lcs_len(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    """Longest-common-subsequence F1 over normalized words; 0 if either is empty."""
    cand = _normalize(candidate).split()
    ref = _normalize(reference).split()
    if not cand or not ref:
        return 0.0
    lcs = _lcs_len(cand, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    return 2 * precision * recall / (precision + recall)


def exact_match(candidates, references) -> float:
    """Fraction of pairs equal after normalization."""
    candidates, references = list(candidates), list(references)
    if not candidates:
        raise ValueError("empty input lists")
    if len(candidates) != len(references):
        raise ValueError(f"length mismatch: {len(candidates)} candidates, "
                         f"{len(references)} references")
    hits = sum(_normalize(c) == _normalize(r)
               for c, r in zip(candidates, references))
    return hits / len(candidates)


@dataclass
class EvalResult:
    rouge_l: float
    em: float
    records: list = field(default_factory=list)


def evaluate(model, tokenizer, test_set, max_new: int = 16) -> EvalResult:
    """Greedy-decode every test sample and aggregate both metrics."""
    test_set = list(test_set)
    if not test_set:
        raise ValueError("empty test set")
    records = []
    for i, sample in enumerate(test_set):
        prompt = render_prompt(sample)
        try:
            prediction = generate_text(model, tokenizer, prompt, max_new)
        except Exception as e:
            raise RuntimeError(f"generation failed on sample {i}: {e}") from e
        records.append({
            "index": i,
            "prompt": prompt,
            "prediction": prediction,
            "reference": sample.output,
            "rouge_l": rouge_l(prediction, sample.output),
            "em": float(_normalize(prediction) == _normalize(sample.output)),
        })
    return EvalResult(
        rouge_l=sum(r["rouge_l"] for r in records) / len(records),
        em=sum(r["em"] for r in records) / len(records),
        records=records,
    )
