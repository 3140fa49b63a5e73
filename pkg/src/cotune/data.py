"""Synthetic multi-domain QA corpus, Dirichlet partitioning, JSONL ingestion.

Each domain draws its content words from a disjoint syllable pool, so domain
skew has a measurable effect on token statistics and on what a model trained
under one mixture can answer under another.
"""

import json
from dataclasses import dataclass, field

import numpy as np

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"

_INSTRUCTION_FORMS = (
    "give the {rel} of",
    "what is the {rel} of",
    "recall the {rel} of",
)

# answer shape per domain index: bare value, value+unit, unit+value
_ANSWER_FORMS = ("{val}", "{val} {unit}", "{unit} {val}")

_ENTITIES = 8
_RELATIONS = 4


@dataclass(frozen=True)
class QASample:
    instruction: str
    input: str
    output: str
    domain: str

    def __post_init__(self):
        if not self.output:
            raise ValueError("sample output must be non-empty")


def render_prompt(sample: QASample) -> str:
    if sample.input:
        return f"{sample.instruction} {sample.input}"
    return sample.instruction


def render_pair(sample: QASample) -> tuple[str, str]:
    """(prompt text, answer text) as consumed by the training procedures."""
    return render_prompt(sample), sample.output


def generate_corpus(domains, per_domain: int, seed: int) -> list[QASample]:
    """Deterministic templated QA pairs, `per_domain` samples per domain.

    Content words (entities, relations, values) are domain-local; only the
    instruction glue is shared. Answers stay 1-2 words so exact match is in
    reach for small models.
    """
    domains = list(domains)
    if len(domains) < 2:
        raise ValueError("need at least 2 domains")
    if len(set(domains)) != len(domains):
        raise ValueError("duplicate domain labels")
    if per_domain < 1:
        raise ValueError("per_domain must be positive")
    if seed < 0:
        raise ValueError("seed must be non-negative")

    syllables = [c + v for c in _CONSONANTS for v in _VOWELS]
    out: list[QASample] = []
    for di, domain in enumerate(domains):
        pool = syllables[di::len(domains)]
        words = [a + b for a in pool for b in pool]
        rng = np.random.default_rng(np.random.SeedSequence([seed, di]))
        order = rng.permutation(len(words))
        picked = [words[j] for j in order]

        entities = picked[:_ENTITIES]
        relations = picked[_ENTITIES:_ENTITIES + _RELATIONS]
        unit = picked[_ENTITIES + _RELATIONS]
        values = picked[_ENTITIES + _RELATIONS + 1:
                        _ENTITIES + _RELATIONS + 1 + _ENTITIES * _RELATIONS]
        answer_form = _ANSWER_FORMS[di % len(_ANSWER_FORMS)]
        fact_order = rng.permutation(_ENTITIES * _RELATIONS)

        for j in range(per_domain):
            fact = int(fact_order[j % fact_order.size])
            ri, ei = divmod(fact, _ENTITIES)
            form = _INSTRUCTION_FORMS[j % len(_INSTRUCTION_FORMS)]
            out.append(QASample(
                instruction=form.format(rel=relations[ri]),
                input=entities[ei],
                output=answer_form.format(val=values[fact], unit=unit),
                domain=domain,
            ))
    return out


# -- partitioning --------------------------------------------------------------------


@dataclass(frozen=True)
class PartitionSpec:
    n_devices: int
    lam: float
    per_device: int = 1000
    train_fraction: float = 0.8
    server_size: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.n_devices < 1:
            raise ValueError("need at least one device")
        if not self.lam > 0:
            raise ValueError("concentration must be positive")
        if self.per_device < 2 or self.server_size < 2:
            raise ValueError("per-device and server sizes must be at least 2")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train fraction must lie in (0, 1)")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass
class Split:
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.train) + len(self.test)


@dataclass
class Partition:
    devices: list
    server: Split
    mixtures: list  # per-device domain mixture actually drawn


def _split(samples, fraction, rng) -> Split:
    order = rng.permutation(len(samples))
    shuffled = [samples[i] for i in order]
    n_train = int(round(fraction * len(shuffled)))
    n_train = max(1, min(len(shuffled) - 1, n_train))
    return Split(train=shuffled[:n_train], test=shuffled[n_train:])


def dirichlet_partition(corpus, spec: PartitionSpec) -> Partition:
    """Skewed per-device datasets plus a uniform server dataset.

    Each device draws a domain mixture from a symmetric Dirichlet(lam) and
    fills its quota without replacement from per-domain pools (renormalizing
    over the domains that still have samples). Devices are pairwise disjoint;
    the server draws uniformly from the full corpus and may overlap them.
    """
    corpus = list(corpus)
    domains = sorted({s.domain for s in corpus})
    if len(domains) < 2:
        raise ValueError("corpus must cover at least 2 domains")
    if spec.server_size > len(corpus):
        raise ValueError("server size exceeds corpus size")

    rng = np.random.default_rng(np.random.SeedSequence([spec.seed]))
    pools: dict[str, list] = {d: [] for d in domains}
    for s in corpus:
        pools[s.domain].append(s)
    for d in domains:
        order = rng.permutation(len(pools[d]))
        pools[d] = [pools[d][i] for i in order]

    devices: list[Split] = []
    mixtures: list[np.ndarray] = []
    for _ in range(spec.n_devices):
        mixture = rng.dirichlet([spec.lam] * len(domains))
        if not np.all(np.isfinite(mixture)):
            # gamma draws can all underflow at extreme concentrations
            mixture = np.zeros(len(domains))
            mixture[rng.integers(len(domains))] = 1.0
        mixtures.append(mixture)

        taken: list = []
        need = spec.per_device
        while need > 0:
            live = [i for i, d in enumerate(domains) if pools[d]]
            if not live:
                raise ValueError("corpus exhausted while filling device quotas")
            weights = mixture[live]
            total = weights.sum()
            weights = weights / total if total > 0 else np.full(len(live), 1.0 / len(live))
            counts = rng.multinomial(need, weights)
            for idx, c in zip(live, counts):
                pool = pools[domains[idx]]
                grab = min(int(c), len(pool))
                if grab:
                    taken.extend(pool[-grab:])
                    del pool[-grab:]
                    need -= grab
        devices.append(_split(taken, spec.train_fraction, rng))

    server_idx = rng.choice(len(corpus), size=spec.server_size, replace=False)
    server = _split([corpus[i] for i in server_idx], spec.train_fraction, rng)
    return Partition(devices=devices, server=server, mixtures=mixtures)


def domain_counts(samples) -> dict[str, int]:
    out: dict[str, int] = {}
    for s in samples:
        out[s.domain] = out.get(s.domain, 0) + 1
    return out


def partition_manifest(partition: Partition) -> dict:
    """Audit view: per-endpoint sizes and domain histograms."""
    def entry(split):
        return {
            "train": len(split.train),
            "test": len(split.test),
            "domains": domain_counts(split.train + split.test),
        }

    return {
        "devices": [entry(s) for s in partition.devices],
        "server": entry(partition.server),
        "mixtures": [[float(x) for x in m] for m in partition.mixtures],
    }


# -- jsonl ----------------------------------------------------------------------------

_FIELDS = ("instruction", "input", "output", "domain")


def save_jsonl(samples, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({f: getattr(s, f) for f in _FIELDS}) + "\n")


def load_jsonl(path) -> list[QASample]:
    """Order-preserving parse; every error names its 1-based line number."""
    out: list[QASample] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"line {lineno}: invalid JSON ({e.msg})") from e
            if not isinstance(obj, dict):
                raise ValueError(f"line {lineno}: expected an object")
            missing = [f for f in _FIELDS if f not in obj]
            if missing:
                raise ValueError(f"line {lineno}: missing field {missing[0]!r}")
            bad = [f for f in _FIELDS if not isinstance(obj[f], str)]
            if bad:
                raise ValueError(f"line {lineno}: field {bad[0]!r} must be a string")
            try:
                out.append(QASample(**{f: obj[f] for f in _FIELDS}))
            except ValueError as e:
                raise ValueError(f"line {lineno}: {e}") from e
    return out
