"""Tiny decoder-only transformers with attachable LoRA and domain adapters.

Pre-norm residual blocks, learned positional embeddings, bias-free base
linears, parameter-free RMSNorm. Two kinds of plug-in parameters can attach
after construction: low-rank (A, B) deltas on the attention projections, and
per-layer bottleneck adapters after the feed-forward sublayer. Both start as
exact no-ops so attaching never changes the forward pass.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import blockio
from .numerics import (Parameter, Tensor, add, causal_attention, cross_entropy_at,
                       embedding, gelu, linear, no_grad, rmsnorm, wrap)

LORA_TARGETS = ("wq", "wk", "wv")

_EMB_STD = 0.1
_W_STD = 0.08
_LORA_A_STD = 0.1
_ADAPTER_IN_STD = 0.08

CHECKPOINT_KIND = "tiny-transformer"


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    heads: int
    hidden: int
    ffn: int
    vocab: int
    max_seq: int
    arch_tag: str = ""

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1 or self.hidden < 1:
            raise ValueError("layers, heads and hidden must be positive")
        if self.hidden % self.heads != 0:
            raise ValueError("hidden must be divisible by heads")
        if self.ffn < 1 or self.vocab < 5 or self.max_seq < 2:
            raise ValueError("bad ffn/vocab/max_seq in model config")


class LoraModule:
    """Low-rank delta W0 + b @ a on one projection; b starts at zero."""

    def __init__(self, name: str, out_dim: int, in_dim: int, rank: int, rng):
        self.rank = rank
        self.a = Parameter(rng.normal(0.0, _LORA_A_STD, size=(rank, in_dim)),
                           name=f"{name}.a")
        self.b = Parameter(np.zeros((out_dim, rank)), name=f"{name}.b")

    def parameters(self):
        return [self.a, self.b]


class DomainAdapter:
    """Bottleneck MLP with residual; the zero output layer makes it identity."""

    def __init__(self, name: str, hidden: int, bottleneck: int, rng):
        self.bottleneck = bottleneck
        self.w_in = Parameter(rng.normal(0.0, _ADAPTER_IN_STD, size=(bottleneck, hidden)),
                              name=f"{name}.w_in")
        self.b_in = Parameter(np.zeros(bottleneck), name=f"{name}.b_in")
        self.w_out = Parameter(np.zeros((hidden, bottleneck)), name=f"{name}.w_out")
        self.b_out = Parameter(np.zeros(hidden), name=f"{name}.b_out")

    def parameters(self):
        return [self.w_in, self.b_in, self.w_out, self.b_out]

    def __call__(self, x: Tensor) -> Tensor:
        h = gelu(add(linear(x, self.w_in), self.b_in))
        return add(x, add(linear(h, self.w_out), self.b_out))


class TinyTransformer:
    """A causal LM small enough to train on a desk, one sequence at a time."""

    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        d, V = config.hidden, config.vocab
        self.tok_emb = Parameter(rng.normal(0.0, _EMB_STD, size=(V, d)), name="emb.tok")
        self.pos_emb = Parameter(rng.normal(0.0, _EMB_STD, size=(config.max_seq, d)),
                                 name="emb.pos")
        self.layers = []
        for i in range(config.layers):
            blk = {}
            for tgt in LORA_TARGETS:
                blk[tgt] = Parameter(rng.normal(0.0, _W_STD, size=(d, d)),
                                     name=f"layer{i}.attn.{tgt}")
            blk["wo"] = Parameter(rng.normal(0.0, _W_STD, size=(d, d)),
                                  name=f"layer{i}.attn.wo")
            blk["w_up"] = Parameter(rng.normal(0.0, _W_STD, size=(config.ffn, d)),
                                    name=f"layer{i}.ffn.w_up")
            blk["w_down"] = Parameter(rng.normal(0.0, _W_STD, size=(d, config.ffn)),
                                      name=f"layer{i}.ffn.w_down")
            self.layers.append(blk)
        self.head = Parameter(rng.normal(0.0, _EMB_STD, size=(V, d)), name="head.out")
        self.lora: dict[str, LoraModule] = {}
        self.lora_targets: tuple[str, ...] = ()
        self.lora_rank = 0
        self.adapters: list[DomainAdapter] = []
        self.adapter_bottleneck = 0
        self._pre_lora_flags: dict[int, bool] | None = None

    # -- parameter groups ------------------------------------------------------

    def base_parameters(self) -> list[Parameter]:
        out = [self.tok_emb, self.pos_emb]
        for blk in self.layers:
            out.extend(blk[k] for k in ("wq", "wk", "wv", "wo", "w_up", "w_down"))
        out.append(self.head)
        return out

    def lora_parameters(self) -> list[Parameter]:
        return [p for mod in self.lora.values() for p in mod.parameters()]

    def adapter_parameters(self) -> list[Parameter]:
        return [p for ad in self.adapters for p in ad.parameters()]

    def parameters(self) -> list[Parameter]:
        return self.base_parameters() + self.lora_parameters() + self.adapter_parameters()

    def scalar_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def mark_trainable(self, *, base=None, lora=None, adapters=None) -> None:
        """Set trainability per group; None leaves a group untouched."""
        if base is not None:
            for p in self.base_parameters():
                p.trainable = base
        if lora is not None:
            for p in self.lora_parameters():
                p.trainable = lora
        if adapters is not None:
            for p in self.adapter_parameters():
                p.trainable = adapters

    # -- forward ----------------------------------------------------------------

    def _project(self, h: Tensor, layer: int, target: str) -> Tensor:
        blk = self.layers[layer]
        out = linear(h, blk[target])
        mod = self.lora.get(f"{layer}.{target}")
        if mod is not None:
            out = add(out, linear(linear(h, mod.a), mod.b))
        return out

    def forward(self, ids) -> Tensor:
        """Logits (S, vocab) for a token id sequence of length S <= max_seq."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ValueError("forward expects a non-empty 1-d id sequence")
        S = ids.size
        if S > self.config.max_seq:
            raise ValueError(f"sequence length {S} exceeds max_seq {self.config.max_seq}")
        if ids.min() < 0 or ids.max() >= self.config.vocab:
            raise ValueError("token id out of vocabulary range")

        x = add(embedding(self.tok_emb, ids), embedding(self.pos_emb, np.arange(S)))
        for i, blk in enumerate(self.layers):
            h = rmsnorm(x)
            attn = causal_attention(self._project(h, i, "wq"),
                                    self._project(h, i, "wk"),
                                    self._project(h, i, "wv"),
                                    self.config.heads)
            x = add(x, linear(attn, blk["wo"]))
            f = linear(gelu(linear(rmsnorm(x), blk["w_up"])), blk["w_down"])
            x = add(x, f)
            if self.adapters:
                x = self.adapters[i](x)
        return linear(rmsnorm(x), self.head)


# -- plug-in parameters ---------------------------------------------------------


def attach_lora(model: TinyTransformer, targets=("wq", "wv"), rank: int = 8,
                seed: int = 0) -> None:
    """Add low-rank deltas to the chosen attention projections.

    The forward pass is unchanged at attach time (B is zero). The trainable
    set becomes exactly the new A/B matrices; previous flags are saved so
    detach_lora can restore them.
    """
    if model.lora:
        raise ValueError("model already has LoRA attached")
    targets = tuple(targets)
    if not targets or any(t not in LORA_TARGETS for t in targets):
        raise ValueError(f"lora targets must be a non-empty subset of {LORA_TARGETS}")
    if len(set(targets)) != len(targets):
        raise ValueError("duplicate lora target")
    d = model.config.hidden
    if rank < 1 or rank > d // 2:
        raise ValueError(f"lora rank must satisfy 1 <= rank <= {d // 2}")
    rng = np.random.default_rng(seed)
    model._pre_lora_flags = {id(p): p.trainable for p in model.parameters()}
    for i in range(model.config.layers):
        for tgt in targets:
            model.lora[f"{i}.{tgt}"] = LoraModule(f"lora.layer{i}.{tgt}", d, d, rank, rng)
    model.lora_targets = targets
    model.lora_rank = rank
    model.mark_trainable(base=False, lora=True, adapters=False)


def detach_lora(model: TinyTransformer) -> None:
    """Drop the low-rank deltas and restore pre-attach trainability flags."""
    if not model.lora:
        raise ValueError("model has no LoRA attached")
    flags = model._pre_lora_flags or {}
    model.lora = {}
    model.lora_targets = ()
    model.lora_rank = 0
    model._pre_lora_flags = None
    for p in model.parameters():
        if id(p) in flags:
            p.trainable = flags[id(p)]


def attach_domain_adapters(model: TinyTransformer, bottleneck: int, seed: int = 0) -> None:
    """Insert one bottleneck adapter after each layer's feed-forward sublayer."""
    if model.adapters:
        raise ValueError("model already has domain adapters attached")
    if bottleneck < 1:
        raise ValueError("adapter bottleneck must be positive")
    rng = np.random.default_rng(seed)
    model.adapters = [DomainAdapter(f"adapter.layer{i}", model.config.hidden,
                                    bottleneck, rng)
                      for i in range(model.config.layers)]
    model.adapter_bottleneck = bottleneck


def merge_lora(model: TinyTransformer) -> TinyTransformer:
    """Clone with every low-rank delta folded into its base weight."""
    out = clone_model(model)
    for key, mod in model.lora.items():
        layer, tgt = key.split(".")
        out.layers[int(layer)][tgt].data += mod.b.data @ mod.a.data
    out.lora = {}
    out.lora_targets = ()
    out.lora_rank = 0
    return out


# -- named blocks / checkpointing -------------------------------------------------


def named_parameters(model: TinyTransformer) -> dict[str, Parameter]:
    out = {p.name: p for p in model.base_parameters()}
    for key, mod in model.lora.items():
        out[mod.a.name] = mod.a
        out[mod.b.name] = mod.b
    for ad in model.adapters:
        for p in ad.parameters():
            out[p.name] = p
    return out


def lora_blocks(model: TinyTransformer) -> dict[str, np.ndarray]:
    """Copies of the low-rank matrices, keyed by block name."""
    out = {}
    for key in sorted(model.lora):
        mod = model.lora[key]
        out[mod.a.name] = mod.a.data.copy()
        out[mod.b.name] = mod.b.data.copy()
    return out


def load_lora_blocks(model: TinyTransformer, blocks: dict[str, np.ndarray]) -> None:
    """Overwrite the model's low-rank matrices from named blocks (exact copy)."""
    own = {}
    for mod in model.lora.values():
        own[mod.a.name] = mod.a
        own[mod.b.name] = mod.b
    if set(own) != set(blocks):
        raise ValueError("lora block names do not match the attached modules")
    for name, arr in blocks.items():
        p = own[name]
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != p.data.shape:
            raise ValueError(f"shape mismatch for block {name}")
        p.data[...] = arr


def save_checkpoint(model: TinyTransformer, path: str) -> None:
    blocks = {name: p.data for name, p in named_parameters(model).items()}
    meta = {
        "kind": CHECKPOINT_KIND,
        "config": asdict(model.config),
        "lora": {"targets": list(model.lora_targets), "rank": model.lora_rank}
        if model.lora else None,
        "adapter_bottleneck": model.adapter_bottleneck or None,
    }
    blockio.write_blocks(path, blocks, meta)


def load_checkpoint(path: str) -> TinyTransformer:
    blocks, meta = blockio.read_blocks(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise ValueError(f"{path}: not a model checkpoint")
    model = TinyTransformer(ModelConfig(**meta["config"]), seed=0)
    if meta.get("lora"):
        attach_lora(model, tuple(meta["lora"]["targets"]), meta["lora"]["rank"], seed=0)
    if meta.get("adapter_bottleneck"):
        attach_domain_adapters(model, meta["adapter_bottleneck"], seed=0)
    params = named_parameters(model)
    if set(params) != set(blocks):
        raise ValueError(f"{path}: checkpoint blocks do not match the rebuilt model")
    for name, arr in blocks.items():
        if params[name].data.shape != arr.shape:
            raise ValueError(f"{path}: shape mismatch for {name}")
        params[name].data[...] = arr
    return model


def clone_model(model: TinyTransformer) -> TinyTransformer:
    """Deep copy: same config, bitwise-equal parameters, same plug-ins."""
    out = TinyTransformer(model.config, model.seed)
    if model.lora:
        attach_lora(out, model.lora_targets, model.lora_rank, seed=0)
    if model.adapters:
        attach_domain_adapters(out, model.adapter_bottleneck, seed=0)
    src = named_parameters(model)
    dst = named_parameters(out)
    for name, p in src.items():
        dst[name].data[...] = p.data
        dst[name].trainable = p.trainable
    return out


# -- task heads -------------------------------------------------------------------


def encode_example(tokenizer, prompt_text: str, answer_text: str,
                   max_seq: int) -> tuple[list[int], list[int]]:
    """Pack one QA pair: [bos] + prompt ids, answer ids + [eos].

    Overlong prompts are trimmed from the front so the answer always fits;
    an answer too long to fit at all is an error.
    """
    vocab = tokenizer.vocab
    prompt_ids = [vocab.bos_id] + tokenizer.encode(prompt_text)
    answer_ids = tokenizer.encode(answer_text) + [vocab.eos_id]
    budget = max_seq + 1 - len(answer_ids)
    if budget < 1:
        raise ValueError("answer does not fit in the model context")
    if len(prompt_ids) > budget:
        prompt_ids = prompt_ids[-budget:]
    return prompt_ids, answer_ids


def sft_loss(model: TinyTransformer, prompt_ids, answer_ids) -> Tensor:
    """Mean next-token cross-entropy over the answer positions only."""
    prompt_ids = list(prompt_ids)
    answer_ids = list(answer_ids)
    if not prompt_ids:
        raise ValueError("empty prompt")
    if not answer_ids:
        raise ValueError("empty answer")
    seq = prompt_ids + answer_ids
    logits = model.forward(seq[:-1])
    positions = np.arange(len(prompt_ids) - 1, len(seq) - 1)
    return cross_entropy_at(logits, answer_ids, positions)


def generate(model: TinyTransformer, prompt_ids, max_new: int, eos_id: int) -> list[int]:
    """Greedy decoding; stops at eos or max_new. Returns only the new ids."""
    ids = list(prompt_ids)
    if not ids:
        raise ValueError("empty prompt")
    if max_new < 0:
        raise ValueError("max_new must be non-negative")
    out: list[int] = []
    with no_grad():
        for _ in range(max_new):
            window = ids[-model.config.max_seq:]
            logits = model.forward(window)
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == eos_id:
                break
            out.append(nxt)
            ids.append(nxt)
    return out


def generate_text(model: TinyTransformer, tokenizer, prompt_text: str,
                  max_new: int) -> str:
    prompt_ids = [tokenizer.vocab.bos_id] + tokenizer.encode(prompt_text)
    room = model.config.max_seq - max_new
    if room >= 1 and len(prompt_ids) > room:
        prompt_ids = prompt_ids[-room:]
    ids = generate(model, prompt_ids, max_new, tokenizer.vocab.eos_id)
    return tokenizer.decode(ids)
