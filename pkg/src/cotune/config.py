"""Experiment configuration: declarative schema, defaults, and resolution.

Every default lives here so a resolved config is fully materialized; run
directories echo the materialized form, making each run self-describing.
"""

import dataclasses
import json
from dataclasses import dataclass, field

METHODS = ("cotuning", "standalone", "fedlora")
TOKENIZER_KINDS = ("char", "bpe")


@dataclass
class ArchSpec:
    """One transformer architecture plus the tokenizer it reads."""
    layers: int = 2
    heads: int = 2
    hidden: int = 64
    ffn: int = 128
    max_seq: int = 64
    tokenizer: str = "char"
    bpe_merges: int = 48
    arch_tag: str = ""

    def __post_init__(self):
        if not self.arch_tag:
            self.arch_tag = (f"L{self.layers}H{self.heads}D{self.hidden}"
                             f"F{self.ffn}-{self.tokenizer}")

    def validate(self, path: str) -> None:
        for name in ("layers", "heads", "hidden", "ffn", "max_seq"):
            if getattr(self, name) < 1:
                raise ValueError(f"{path}.{name}: must be positive")
        if self.hidden % self.heads != 0:
            raise ValueError(f"{path}.hidden: must be divisible by {path}.heads")
        if self.tokenizer not in TOKENIZER_KINDS:
            raise ValueError(f"{path}.tokenizer: must be one of {TOKENIZER_KINDS}")
        if self.tokenizer == "bpe" and self.bpe_merges < 1:
            raise ValueError(f"{path}.bpe_merges: must be positive")


@dataclass
class LoraSpec:
    targets: tuple = ("wq", "wv")
    rank: int = 8

    def validate(self, path: str) -> None:
        if self.rank < 1:
            raise ValueError(f"{path}.rank: must be positive")
        if not self.targets:
            raise ValueError(f"{path}.targets: must be non-empty")


@dataclass
class OptimSpec:
    lr: float = 0.05
    warmup_epochs: int = 2
    distill_steps: int = 300
    distill_lr: float = 0.1
    dst_epochs: int = 1
    saml_epochs: int = 1

    def validate(self, path: str) -> None:
        if self.lr <= 0 or self.distill_lr <= 0:
            raise ValueError(f"{path}.lr: learning rates must be positive")
        for name in ("warmup_epochs", "distill_steps", "dst_epochs", "saml_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{path}.{name}: must be non-negative")


@dataclass
class DataSpec:
    domains: tuple = ("meadow", "harbor", "forge")
    per_domain: int = 2500
    per_device: int = 1000
    train_fraction: float = 0.8
    server_size: int = 1000
    jsonl_path: str = ""

    def validate(self, path: str) -> None:
        if not self.jsonl_path and len(self.domains) < 2:
            raise ValueError(f"{path}.domains: need at least 2")
        if self.per_domain < 1 or self.per_device < 2 or self.server_size < 2:
            raise ValueError(f"{path}.per_domain: corpus and split sizes too small")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"{path}.train_fraction: must lie in (0, 1)")


@dataclass
class AblationSpec:
    no_dst: bool = False
    no_server_saml: bool = False

    def validate(self, path: str) -> None:
        pass


@dataclass
class ExperimentConfig:
    method: str = "cotuning"
    n_devices: int = 3
    rounds: int = 10
    lam: float = 0.1
    seeds: tuple = (0,)
    alpha: float = 0.5
    beta: float = 0.5
    pool_k: int = 10
    adapter_bottleneck: int = 16
    eval_max_new: int = 12
    out_dir: str = "runs"
    llm: ArchSpec = field(default_factory=lambda: ArchSpec(
        layers=4, heads=4, hidden=128, ffn=256, tokenizer="bpe", bpe_merges=96))
    dpm: ArchSpec = field(default_factory=lambda: ArchSpec(
        layers=2, heads=2, hidden=32, ffn=64, tokenizer="bpe", bpe_merges=96))
    slms: tuple = field(default_factory=lambda: (
        ArchSpec(layers=2, heads=2, hidden=64, ffn=128, tokenizer="char"),
        ArchSpec(layers=2, heads=4, hidden=64, ffn=128, tokenizer="bpe"),
        ArchSpec(layers=3, heads=2, hidden=48, ffn=96, tokenizer="char"),
    ))
    lora: LoraSpec = field(default_factory=LoraSpec)
    optim: OptimSpec = field(default_factory=OptimSpec)
    data: DataSpec = field(default_factory=DataSpec)
    ablations: AblationSpec = field(default_factory=AblationSpec)

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"method: must be one of {METHODS}")
        if self.n_devices < 1:
            raise ValueError("n_devices: must be positive")
        if self.rounds < 0:
            raise ValueError("rounds: must be non-negative")
        if not self.lam > 0:
            raise ValueError("lam: must be positive")
        if not self.seeds:
            raise ValueError("seeds: must be non-empty")
        if any(s < 0 for s in self.seeds):
            raise ValueError("seeds: must be non-negative")
        for name in ("alpha", "beta"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name}: must lie in [0, 1]")
        if self.pool_k < 1:
            raise ValueError("pool_k: must be positive")
        if self.adapter_bottleneck < 1:
            raise ValueError("adapter_bottleneck: must be positive")
        if self.eval_max_new < 1:
            raise ValueError("eval_max_new: must be positive")
        if not self.slms:
            raise ValueError("slms: must be non-empty")
        self.llm.validate("llm")
        self.dpm.validate("dpm")
        for i, slm in enumerate(self.slms):
            slm.validate(f"slms[{i}]")
        self.lora.validate("lora")
        self.optim.validate("optim")
        self.data.validate("data")
        self.ablations.validate("ablations")
        if self.dpm.layers >= self.llm.layers or self.dpm.hidden >= self.llm.hidden:
            raise ValueError("dpm: must be strictly smaller than llm "
                             "in layers and hidden")
        if self.dpm.tokenizer != self.llm.tokenizer or \
                self.dpm.bpe_merges != self.llm.bpe_merges:
            raise ValueError("dpm.tokenizer: must match llm (shared vocabulary)")
        narrowest = min([self.llm.hidden, self.dpm.hidden] +
                        [s.hidden for s in self.slms])
        if self.lora.rank > narrowest // 2:
            raise ValueError(f"lora.rank: {self.lora.rank} exceeds half the "
                             f"narrowest hidden size ({narrowest})")

    def slm_for(self, device: int) -> ArchSpec:
        return self.slms[device % len(self.slms)]


def _coerce(cls, raw, path):
    """Build a dataclass from a plain dict, naming the offending field path."""
    if dataclasses.is_dataclass(raw):
        return raw
    if not isinstance(raw, dict):
        raise ValueError(f"{path or 'config'}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ValueError(f"{path or 'config'}: unknown field "
                         f"{sorted(unknown)[0]!r}")
    kwargs = {}
    for name, f in known.items():
        if name not in raw:
            continue
        sub_path = f"{path}.{name}" if path else name
        value = raw[name]
        if dataclasses.is_dataclass(f.type) or f.type in (
                ArchSpec, LoraSpec, OptimSpec, DataSpec, AblationSpec):
            kwargs[name] = _coerce(f.type, value, sub_path)
        elif name == "slms":
            if not isinstance(value, (list, tuple)):
                raise ValueError(f"{sub_path}: expected a list")
            kwargs[name] = tuple(_coerce(ArchSpec, v, f"{sub_path}[{i}]")
                                 for i, v in enumerate(value))
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ValueError(f"{path or 'config'}: {e}") from e


def resolve(raw: dict) -> ExperimentConfig:
    """Dict (e.g. parsed JSON) to a validated, fully-defaulted config."""
    cfg = _coerce(ExperimentConfig, raw, "")
    cfg.validate()
    return cfg


def materialize(cfg: ExperimentConfig) -> dict:
    """JSON-ready dict with every effective value spelled out."""
    return dataclasses.asdict(cfg)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: invalid JSON at line {e.lineno}") from e
    return resolve(raw)


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(materialize(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
