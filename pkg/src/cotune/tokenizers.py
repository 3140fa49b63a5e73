"""Character and byte-pair tokenizers over printable ASCII corpora.

Both kinds share one Vocabulary/TokenizerSpec shape so models can stay
agnostic about which they were paired with. BPE training is the classic
greedy highest-count merge loop with a lexicographic tie-break, applied to
whole texts (spaces are ordinary symbols).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
_SPECIALS = (PAD, BOS, EOS, UNK)

FORMAT_TAG = "tokenizer-v1"


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate token strings in vocabulary")
        for i, s in enumerate(_SPECIALS):
            if self.tokens[i] != s:
                raise ValueError("vocabulary must start with the special tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def unk_id(self) -> int:
        return 3


@dataclass
class TokenizerSpec:
    """A trained tokenizer: kind, vocabulary, and (for bpe) the merge table."""

    kind: str
    vocab: Vocabulary
    merges: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("char", "bpe"):
            raise ValueError(f"unknown tokenizer kind {self.kind!r}")
        if self.kind == "char" and self.merges:
            raise ValueError("char tokenizer cannot carry merges")

    def __len__(self) -> int:
        return len(self.vocab)

    # -- encoding ------------------------------------------------------------

    def encode(self, text: str) -> list[int]:
        """Text to ids; characters outside the alphabet become unk."""
        idx = self.vocab.index
        unk = self.vocab.unk_id
        pieces = [c if c in idx else UNK for c in text]
        for a, b in self.merges:
            pieces = _apply_merge(pieces, a, b)
        return [idx.get(p, unk) for p in pieces]

    def decode(self, ids: list[int]) -> str:
        """Ids back to text; special tokens render as empty strings."""
        out = []
        for i in ids:
            if not 0 <= i < len(self.vocab):
                raise ValueError(f"token id {i} out of range")
            tok = self.vocab.tokens[i]
            if tok in _SPECIALS:
                continue
            out.append(tok)
        return "".join(out)

    def token_strings(self, ids: list[int]) -> list[str]:
        """Surface string per id, specials included verbatim ("<bos>", ...)."""
        for i in ids:
            if not 0 <= i < len(self.vocab):
                raise ValueError(f"token id {i} out of range")
        return [self.vocab.tokens[i] for i in ids]


def _apply_merge(pieces: list[str], a: str, b: str) -> list[str]:
    # greedy left-to-right application of one merge rule
    out = []
    i = 0
    n = len(pieces)
    while i < n:
        if i + 1 < n and pieces[i] == a and pieces[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(pieces[i])
            i += 1
    return out


def train_char(corpus: list[str]) -> TokenizerSpec:
    """Character vocabulary over everything seen in the corpus."""
    if not corpus:
        raise ValueError("cannot train a tokenizer on an empty corpus")
    chars = sorted({c for text in corpus for c in text})
    _check_ascii(chars)
    return TokenizerSpec("char", Vocabulary(list(_SPECIALS) + chars))


def train_bpe(corpus: list[str], num_merges: int) -> TokenizerSpec:
    """Greedy BPE: repeatedly merge the most frequent adjacent pair.

    Ties break on the lexicographically smallest pair, so training is fully
    deterministic. Stops early if no pair occurs twice.
    """
    if not corpus:
        raise ValueError("cannot train a tokenizer on an empty corpus")
    if num_merges < 0:
        raise ValueError("num_merges must be non-negative")
    base = sorted({c for text in corpus for c in text})
    _check_ascii(base)
    seqs = [list(text) for text in corpus if text]
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        counts: dict[tuple[str, str], int] = {}
        for seq in seqs:
            for i in range(len(seq) - 1):
                pair = (seq[i], seq[i + 1])
                counts[pair] = counts.get(pair, 0) + 1
        if not counts:
            break
        best = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if best[1] < 2:
            break
        pair = best[0]
        merges.append(pair)
        seqs = [_apply_merge(seq, *pair) for seq in seqs]
    tokens = list(_SPECIALS) + base + [a + b for a, b in merges]
    return TokenizerSpec("bpe", Vocabulary(tokens), merges)


def _check_ascii(chars) -> None:
    for c in chars:
        if not (32 <= ord(c) < 127):
            raise ValueError(f"corpus character {c!r} outside printable ASCII")


# -- serialization -------------------------------------------------------------
# Line-oriented text format: a header line, one JSON-escaped vocabulary entry
# per line, then one JSON-escaped merge pair per line.


def save_tokenizer(spec: TokenizerSpec, path: str) -> None:
    lines = [f"{FORMAT_TAG} {spec.kind} {len(spec.vocab)} {len(spec.merges)}"]
    lines += [json.dumps(tok) for tok in spec.vocab.tokens]
    lines += [json.dumps([a, b]) for a, b in spec.merges]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_tokenizer(path: str) -> TokenizerSpec:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty tokenizer file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != FORMAT_TAG:
        raise ValueError(f"{path}: bad tokenizer header {lines[0]!r}")
    kind, n_vocab, n_merges = head[1], int(head[2]), int(head[3])
    if len(lines) != 1 + n_vocab + n_merges:
        raise ValueError(f"{path}: line count does not match header")
    tokens = [json.loads(s) for s in lines[1:1 + n_vocab]]
    merges = [tuple(json.loads(s)) for s in lines[1 + n_vocab:]]
    return TokenizerSpec(kind, Vocabulary(tokens), merges)
