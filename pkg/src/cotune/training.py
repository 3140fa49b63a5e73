"""Training procedures: distillation init, domain tuning, and mutual learning.

All procedures mutate their models in place and return loss traces; the
trainable set is selected at entry (base for distillation and pretraining,
adapters for domain tuning, LoRA for mutual learning) so freeze contracts
hold by construction.
"""

from dataclasses import dataclass, field

import numpy as np

from cotune import numerics as nm
from cotune.alignment import align_tokens, project_logits
from cotune.model import (ModelConfig, TinyTransformer, encode_example,
                          lora_blocks, sft_loss)
from cotune.transfer import saml_loss_dpm, saml_loss_lm

DEFAULT_LR = 0.05


def sgd_step(params, lr: float) -> None:
    """In-place gradient descent on the trainable params, then zero all grads."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for p in params:
        if p.trainable:
            p.data -= lr * p.grad
        p.grad[...] = 0.0


def _encode_corpus(tokenizer, corpus, max_seq):
    # corpus: iterable of (prompt text, answer text) pairs
    return [encode_example(tokenizer, prompt, answer, max_seq)
            for prompt, answer in corpus]


def _sft_pass(model, encoded, params, lr, order=None):
    losses = []
    idx = range(len(encoded)) if order is None else order
    for i in idx:
        prompt_ids, answer_ids = encoded[i]
        loss = sft_loss(model, prompt_ids, answer_ids)
        loss.backward()
        losses.append(loss.item())
        sgd_step(params, lr)
    return losses


def pretrain(model: TinyTransformer, corpus, tokenizer, epochs: int,
             lr: float = DEFAULT_LR, seed=None) -> list[float]:
    """Supervised warmup on all currently-trainable parameters.

    Returns the per-epoch mean loss. With a seed, sample order is reshuffled
    each epoch; without one, corpus order is kept.
    """
    if not corpus:
        raise ValueError("empty corpus")
    encoded = _encode_corpus(tokenizer, corpus, model.config.max_seq)
    params = model.parameters()
    nm.zero_grads(params)
    rng = None if seed is None else np.random.default_rng(seed)
    out = []
    for _ in range(epochs):
        order = None if rng is None else rng.permutation(len(encoded))
        losses = _sft_pass(model, encoded, params, lr, order)
        out.append(float(np.mean(losses)))
    return out


# -- distillation -----------------------------------------------------------------


def distill_loss(teacher: TinyTransformer, student: TinyTransformer, ids):
    """Mean per-position KL(teacher dist over the shared vocab, student dist)."""
    if teacher.config.vocab != student.config.vocab:
        raise ValueError("distillation requires a shared vocabulary")
    with nm.no_grad():
        t_logits = teacher.forward(ids)
    # same softmax code path on both sides, so a cloned teacher scores exactly 0
    p = nm.softmax_rows(nm.constant(t_logits.data)).data
    q = nm.softmax_rows(student.forward(ids))
    return nm.kl_divergence_rows(p, q, reduce="mean")


def distill_init(llm: TinyTransformer, dpm_config: ModelConfig, corpus,
                 steps: int, seed: int, *, tokenizer,
                 lr: float = DEFAULT_LR) -> tuple[TinyTransformer, list[float]]:
    """Train a fresh compact proxy to match the big model's distributions.

    Returns the proxy and the pre-update loss trace (one entry per step).
    """
    if dpm_config.vocab != llm.config.vocab:
        raise ValueError("proxy vocab must equal the big model's vocab")
    if dpm_config.layers >= llm.config.layers or dpm_config.hidden >= llm.config.hidden:
        raise ValueError("proxy must be strictly smaller in layers and hidden")
    if not corpus:
        raise ValueError("empty corpus")
    dpm = TinyTransformer(dpm_config, seed)
    max_seq = min(llm.config.max_seq, dpm_config.max_seq)
    encoded = _encode_corpus(tokenizer, corpus, max_seq)
    params = dpm.parameters()
    losses = []
    for i in range(steps):
        prompt_ids, answer_ids = encoded[i % len(encoded)]
        ids = (prompt_ids + answer_ids)[:-1]
        loss = distill_loss(llm, dpm, ids)
        loss.backward()
        losses.append(loss.item())
        sgd_step(params, lr)
    return dpm, losses


def distill_eval(llm: TinyTransformer, dpm: TinyTransformer, corpus,
                 tokenizer) -> float:
    """Mean distillation loss over a corpus, no updates."""
    if not corpus:
        raise ValueError("empty corpus")
    max_seq = min(llm.config.max_seq, dpm.config.max_seq)
    total = 0.0
    for prompt_ids, answer_ids in _encode_corpus(tokenizer, corpus, max_seq):
        ids = (prompt_ids + answer_ids)[:-1]
        with nm.no_grad():
            total += distill_loss(llm, dpm, ids).item()
    return total / len(corpus)


# -- domain-specific tuning ---------------------------------------------------------


def dst(dpm: TinyTransformer, dataset, *, tokenizer, epochs: int = 1,
        lr: float = DEFAULT_LR) -> list[float]:
    """Finetune only the domain adapters on local data.

    Base weights and LoRA stay bitwise fixed; returns the per-sample loss trace.
    """
    if not dpm.adapters:
        raise ValueError("domain adapters missing; attach them before tuning")
    if epochs > 0 and not dataset:
        raise ValueError("empty dataset")
    dpm.mark_trainable(base=False, lora=False, adapters=True)
    params = dpm.parameters()
    nm.zero_grads(params)
    encoded = _encode_corpus(tokenizer, dataset, dpm.config.max_seq)
    losses = []
    for _ in range(epochs):
        losses.extend(_sft_pass(dpm, encoded, params, lr))
    return losses


# -- mutual learning ----------------------------------------------------------------


@dataclass
class SamlResult:
    """Outcome of one mutual-learning phase: the proxy's upload plus loss traces."""
    lora: dict = field(default_factory=dict)
    proxy_losses: list = field(default_factory=list)
    peer_losses: list = field(default_factory=list)


def saml(proxy: TinyTransformer, peer: TinyTransformer, dataset,
         alpha: float, beta: float, k: int, steps: int, *,
         proxy_tokenizer, peer_tokenizer, lr: float = DEFAULT_LR) -> SamlResult:
    """Mutual learning between a proxy and a peer over mismatched tokenizers.

    Per sample: encode under both tokenizers, forward both models, align each
    model's token positions onto the other's, then take one LoRA-only step on
    the proxy (supervised + transfer, weight alpha) and one on the peer
    (weight beta). Both steps consume the same pre-step forward snapshots, so
    the update is symmetric in roles. Only LoRA parameters change.
    """
    if not proxy.lora:
        raise ValueError("proxy has no LoRA attached")
    if not peer.lora:
        raise ValueError("peer has no LoRA attached")
    min_vocab = min(proxy.config.vocab, peer.config.vocab)
    if not 1 <= k < min_vocab:
        raise ValueError(f"pool size k={k} must satisfy 1 <= k < {min_vocab}")
    if steps > 0 and not dataset:
        raise ValueError("empty dataset")
    proxy.mark_trainable(base=False, lora=True, adapters=False)
    peer.mark_trainable(base=False, lora=True, adapters=False)
    nm.zero_grads(proxy.parameters())
    nm.zero_grads(peer.parameters())

    result = SamlResult()
    n = len(dataset) if dataset else 0
    for i in range(steps):
        prompt, answer = dataset[i % n]
        p_prompt, p_ans = encode_example(proxy_tokenizer, prompt, answer,
                                         proxy.config.max_seq)
        q_prompt, q_ans = encode_example(peer_tokenizer, prompt, answer,
                                         peer.config.max_seq)
        p_in = (p_prompt + p_ans)[:-1]
        q_in = (q_prompt + q_ans)[:-1]
        p_pos = np.arange(len(p_prompt) - 1, len(p_in))
        q_pos = np.arange(len(q_prompt) - 1, len(q_in))

        p_surface = proxy_tokenizer.token_strings(p_in)
        q_surface = peer_tokenizer.token_strings(q_in)
        onto_proxy = align_tokens(q_surface, p_surface)
        onto_peer = align_tokens(p_surface, q_surface)

        p_logits = proxy.forward(p_in)
        q_logits = peer.forward(q_in)
        # teachers are detached snapshots taken before either side updates
        teacher_for_proxy = project_logits(q_logits.data, onto_proxy)
        teacher_for_peer = project_logits(p_logits.data, onto_peer)

        loss_p = saml_loss_dpm(p_logits, teacher_for_proxy, p_ans, p_pos, alpha, k)
        loss_p.backward()
        result.proxy_losses.append(loss_p.item())
        sgd_step(proxy.lora_parameters(), lr)

        loss_q = saml_loss_lm(q_logits, teacher_for_peer, q_ans, q_pos, beta, k)
        loss_q.backward()
        result.peer_losses.append(loss_q.item())
        sgd_step(peer.lora_parameters(), lr)

    result.lora = lora_blocks(proxy)
    return result
