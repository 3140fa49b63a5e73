"""Round orchestration: device/server states, LoRA aggregation, the simulated
network with exact communication accounting, ablations, and baselines.

The wire bytes for every parameter transfer come from the same block container
used for checkpoints, so message sizes are bit-exactly auditable.
"""

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from cotune import numerics as nm
from cotune.blockio import decode_blocks, encode_blocks, scalar_count
from cotune.config import ExperimentConfig
from cotune.data import (PartitionSpec, dirichlet_partition, generate_corpus,
                         load_jsonl, partition_manifest, render_pair)
from cotune.evaluation import evaluate
from cotune.model import (ModelConfig, TinyTransformer, attach_domain_adapters,
                          attach_lora, clone_model, encode_example, lora_blocks,
                          load_lora_blocks, sft_loss)
from cotune.tokenizers import train_bpe, train_char
from cotune.training import distill_init, dst, pretrain, saml, sgd_step


# -- messages and accounting -----------------------------------------------------


@dataclass(frozen=True)
class Message:
    t: int
    direction: str  # "upload" | "download"
    sender: str
    receiver: str
    payload: bytes
    blocks: tuple  # ((name, shape), ...) descriptor
    scalar_count: int

    @property
    def byte_count(self) -> int:
        return self.scalar_count * 8


def make_message(t: int, direction: str, sender: str, receiver: str,
                 blocks: dict) -> Message:
    payload = encode_blocks(blocks, meta={"round": t, "direction": direction})
    descriptor = tuple((name, tuple(arr.shape)) for name, arr in blocks.items())
    return Message(t, direction, sender, receiver, payload, descriptor,
                   scalar_count(blocks))


@dataclass
class CommLedger:
    messages: list = field(default_factory=list)

    def append(self, msg: Message) -> None:
        self.messages.append(msg)

    def round_totals(self) -> dict:
        out: dict[int, dict] = {}
        for m in self.messages:
            entry = out.setdefault(m.t, {"upload": 0, "download": 0, "messages": 0})
            entry[m.direction] += m.scalar_count
            entry["messages"] += 1
        return out

    def endpoint_scalars(self, endpoint: str) -> int:
        return sum(m.scalar_count for m in self.messages
                   if endpoint in (m.sender, m.receiver))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "direction", "sender", "receiver",
                        "scalar_count", "byte_count", "blocks"])
            for m in self.messages:
                names = ";".join(name for name, _ in m.blocks)
                w.writerow([m.t, m.direction, m.sender, m.receiver,
                            m.scalar_count, m.byte_count, names])


def read_ledger_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["round"] = int(r["round"])
        r["scalar_count"] = int(r["scalar_count"])
        r["byte_count"] = int(r["byte_count"])
    return rows


def comm_ratio(ledger: CommLedger, endpoint: str, resident_scalars: int) -> float:
    """Per-round average of scalars moved for an endpoint, over its resident size."""
    if resident_scalars <= 0:
        raise ValueError("resident scalar count must be positive")
    touched = ledger.endpoint_scalars(endpoint)
    if touched == 0:
        return 0.0
    rounds = len({m.t for m in ledger.messages})
    return touched / rounds / resident_scalars


def lora_scalar_count(layers: int, hidden: int, targets, rank: int) -> int:
    """Closed-form size of one model's LoRA block set (A is rank x hidden,
    B is hidden x rank per adapted projection)."""
    return layers * len(targets) * 2 * rank * hidden


# -- world state -------------------------------------------------------------------


@dataclass
class DeviceState:
    device_id: int
    arch_tag: str
    slm: TinyTransformer
    slm_tokenizer: object
    train: list  # QASample
    test: list
    train_pairs: list  # rendered (prompt, answer)
    dpm: TinyTransformer = None

    @property
    def name(self) -> str:
        return f"device{self.device_id}"


@dataclass
class ServerState:
    tokenizer: object
    train: list
    test: list
    train_pairs: list
    llm: TinyTransformer = None
    dpm: TinyTransformer = None


@dataclass
class World:
    config: ExperimentConfig
    seed: int
    devices: list
    server: ServerState
    manifest: dict


@dataclass
class RoundReport:
    t: int
    devices: list
    server: dict | None
    comm: dict

    def to_dict(self) -> dict:
        return {"t": self.t, "devices": self.devices, "server": self.server,
                "comm": self.comm}


def _train_tokenizer(spec, texts):
    if spec.tokenizer == "char":
        return train_char(texts)
    return train_bpe(texts, num_merges=spec.bpe_merges)


def _model_config(spec, vocab: int) -> ModelConfig:
    return ModelConfig(layers=spec.layers, heads=spec.heads, hidden=spec.hidden,
                       ffn=spec.ffn, vocab=vocab, max_seq=spec.max_seq)


def _seed_table(seed: int, n_devices: int) -> dict:
    state = np.random.SeedSequence([seed]).generate_state(8 + 3 * n_devices)
    table = {
        "corpus": int(state[0]), "partition": int(state[1]),
        "llm_init": int(state[2]), "llm_warmup": int(state[3]),
        "distill": int(state[4]), "lora": int(state[5]),
        "llm_lora": int(state[6]), "adapters": int(state[7]),
    }
    for i in range(n_devices):
        table[f"slm_init{i}"] = int(state[8 + 3 * i])
        table[f"slm_warmup{i}"] = int(state[9 + 3 * i])
        table[f"slm_lora{i}"] = int(state[10 + 3 * i])
    return table


def world_data(cfg: ExperimentConfig, seed: int):
    """Corpus and partition exactly as a run with this (config, seed) sees them."""
    seeds = _seed_table(seed, cfg.n_devices)
    if cfg.data.jsonl_path:
        corpus = load_jsonl(cfg.data.jsonl_path)
    else:
        corpus = generate_corpus(cfg.data.domains, cfg.data.per_domain,
                                 seeds["corpus"])
    part = dirichlet_partition(corpus, PartitionSpec(
        n_devices=cfg.n_devices, lam=cfg.lam, per_device=cfg.data.per_device,
        train_fraction=cfg.data.train_fraction, server_size=cfg.data.server_size,
        seed=seeds["partition"]))
    return corpus, part


def init_world(cfg: ExperimentConfig, seed: int, *,
               with_server_models: bool = True) -> World:
    """Data, tokenizers, and warmed-up models shared by every method.

    The same (config, seed) pair always yields the same world, so method
    comparisons are paired: identical corpora, partitions, and model inits.
    """
    seeds = _seed_table(seed, cfg.n_devices)
    corpus, part = world_data(cfg, seed)

    texts = [f"{p} {a}" for p, a in (render_pair(s) for s in corpus)]
    server_tok = _train_tokenizer(cfg.llm, texts)
    server_pairs = [render_pair(s) for s in part.server.train]
    server = ServerState(tokenizer=server_tok, train=part.server.train,
                         test=part.server.test, train_pairs=server_pairs)
    if with_server_models:
        server.llm = TinyTransformer(_model_config(cfg.llm, len(server_tok)),
                                     seeds["llm_init"])
        pretrain(server.llm, server_pairs, server_tok, cfg.optim.warmup_epochs,
                 cfg.optim.lr, seed=seeds["llm_warmup"])

    devices = []
    for i, split in enumerate(part.devices):
        spec = cfg.slm_for(i)
        tok = server_tok if (spec.tokenizer == cfg.llm.tokenizer and
                             spec.bpe_merges == cfg.llm.bpe_merges) else \
            _train_tokenizer(spec, texts)
        slm = TinyTransformer(_model_config(spec, len(tok)),
                              seeds[f"slm_init{i}"])
        pretrain(slm, server_pairs, tok, cfg.optim.warmup_epochs, cfg.optim.lr,
                 seed=seeds[f"slm_warmup{i}"])
        attach_lora(slm, cfg.lora.targets, cfg.lora.rank,
                    seed=seeds[f"slm_lora{i}"])
        devices.append(DeviceState(
            device_id=i, arch_tag=spec.arch_tag, slm=slm, slm_tokenizer=tok,
            train=split.train, test=split.test,
            train_pairs=[render_pair(s) for s in split.train]))
    return World(config=cfg, seed=seed, devices=devices, server=server,
                 manifest=partition_manifest(part))


def _held_out_loss(model, tokenizer, samples) -> float:
    total = 0.0
    with nm.no_grad():
        for s in samples:
            prompt, answer = render_pair(s)
            pi, ai = encode_example(tokenizer, prompt, answer, model.config.max_seq)
            total += sft_loss(model, pi, ai).item()
    return total / len(samples)


def _mean(xs) -> float:
    return float(np.mean(xs)) if xs else 0.0


def setup_cotuning(world: World) -> None:
    """Distill the proxy, attach LoRA everywhere, distribute to devices."""
    cfg = world.config
    seeds = _seed_table(world.seed, cfg.n_devices)
    dpm, _ = distill_init(
        world.server.llm, _model_config(cfg.dpm, len(world.server.tokenizer)),
        world.server.train_pairs, cfg.optim.distill_steps, seeds["distill"],
        tokenizer=world.server.tokenizer, lr=cfg.optim.distill_lr)
    attach_lora(dpm, cfg.lora.targets, cfg.lora.rank, seed=seeds["lora"])
    attach_lora(world.server.llm, cfg.lora.targets, cfg.lora.rank,
                seed=seeds["llm_lora"])
    world.server.dpm = dpm
    for dev in world.devices:
        dev.dpm = clone_model(dpm)
        if not cfg.ablations.no_dst:
            attach_domain_adapters(dev.dpm, cfg.adapter_bottleneck,
                                   seed=seeds["adapters"])


def run_round(world: World, t: int, ledger: CommLedger) -> RoundReport:
    """One co-tuning round: device phases, upload, aggregate, server phase,
    download. Every transfer lands in the ledger."""
    cfg = world.config
    server = world.server
    device_reports = []
    uploads = []
    for dev in world.devices:
        try:
            steps = cfg.optim.saml_epochs * len(dev.train_pairs)
            if cfg.ablations.no_dst:
                dst_losses = []
            else:
                dst_losses = dst(dev.dpm, dev.train_pairs,
                                 tokenizer=server.tokenizer,
                                 epochs=cfg.optim.dst_epochs, lr=cfg.optim.lr)
            res = saml(dev.dpm, dev.slm, dev.train_pairs, cfg.alpha, cfg.beta,
                       cfg.pool_k, steps, proxy_tokenizer=server.tokenizer,
                       peer_tokenizer=dev.slm_tokenizer, lr=cfg.optim.lr)
        except Exception as e:
            raise RuntimeError(f"round {t} failed on {dev.name}: {e}") from e
        msg = make_message(t, "upload", dev.name, "server", res.lora)
        ledger.append(msg)
        uploads.append(msg)
        metrics = evaluate(dev.slm, dev.slm_tokenizer, dev.test,
                           max_new=cfg.eval_max_new)
        device_reports.append({
            "device": dev.device_id, "arch_tag": dev.arch_tag,
            "rouge_l": metrics.rouge_l, "em": metrics.em,
            "losses": {"dst": _mean(dst_losses),
                       "saml_dpm": _mean(res.proxy_losses),
                       "saml_slm": _mean(res.peer_losses)},
        })

    try:
        blocks = aggregate_lora([decode_blocks(m.payload)[0] for m in uploads])
        load_lora_blocks(server.dpm, blocks)
        if cfg.ablations.no_server_saml:
            server_losses = {"saml_dpm": 0.0, "saml_llm": 0.0}
        else:
            steps = cfg.optim.saml_epochs * len(server.train_pairs)
            res = saml(server.dpm, server.llm, server.train_pairs, cfg.alpha,
                       cfg.beta, cfg.pool_k, steps,
                       proxy_tokenizer=server.tokenizer,
                       peer_tokenizer=server.tokenizer, lr=cfg.optim.lr)
            server_losses = {"saml_dpm": _mean(res.proxy_losses),
                             "saml_llm": _mean(res.peer_losses)}
    except Exception as e:
        raise RuntimeError(f"round {t} failed on server: {e}") from e

    out_blocks = lora_blocks(server.dpm)
    for dev in world.devices:
        msg = make_message(t, "download", "server", dev.name, out_blocks)
        ledger.append(msg)
        received, _ = decode_blocks(msg.payload)
        load_lora_blocks(dev.dpm, received)

    server_metrics = evaluate(server.dpm, server.tokenizer, server.test,
                              max_new=cfg.eval_max_new)
    server_report = {
        "rouge_l": server_metrics.rouge_l, "em": server_metrics.em,
        "held_out_loss": _held_out_loss(server.dpm, server.tokenizer,
                                        server.test),
        "losses": server_losses,
    }
    totals = ledger.round_totals()[t]
    return RoundReport(t=t, devices=device_reports, server=server_report,
                       comm=totals)


def aggregate_lora(blocks_list) -> dict:
    """Elementwise unweighted mean of shape-identical named block sets."""
    if not blocks_list:
        raise ValueError("nothing to aggregate")
    first = blocks_list[0]
    keys = list(first.keys())
    for i, blocks in enumerate(blocks_list[1:], start=1):
        if set(blocks.keys()) != set(keys):
            raise ValueError(f"block set {i} names differ from block set 0")
        for k in keys:
            if blocks[k].shape != first[k].shape:
                raise ValueError(f"block {k!r} shape mismatch in set {i}")
    return {k: np.mean([b[k] for b in blocks_list], axis=0) for k in keys}


# -- baselines ----------------------------------------------------------------------


def _lora_sft_steps(model, tokenizer, pairs, steps: int, lr: float) -> list[float]:
    # matched local compute: same per-round step count the co-tuned peer gets
    model.mark_trainable(base=False, lora=True, adapters=False)
    params = model.lora_parameters()
    nm.zero_grads(model.parameters())
    losses = []
    for i in range(steps):
        prompt, answer = pairs[i % len(pairs)]
        pi, ai = encode_example(tokenizer, prompt, answer, model.config.max_seq)
        loss = sft_loss(model, pi, ai)
        loss.backward()
        losses.append(loss.item())
        sgd_step(params, lr)
    return losses


def _baseline_round(world: World, t: int, ledger: CommLedger,
                    federate: bool) -> RoundReport:
    cfg = world.config
    device_reports = []
    uploads = []
    for dev in world.devices:
        steps = cfg.optim.saml_epochs * len(dev.train_pairs)
        losses = _lora_sft_steps(dev.slm, dev.slm_tokenizer, dev.train_pairs,
                                 steps, cfg.optim.lr)
        if federate:
            msg = make_message(t, "upload", dev.name, "server",
                               lora_blocks(dev.slm))
            ledger.append(msg)
            uploads.append(msg)
        metrics = evaluate(dev.slm, dev.slm_tokenizer, dev.test,
                           max_new=cfg.eval_max_new)
        device_reports.append({
            "device": dev.device_id, "arch_tag": dev.arch_tag,
            "rouge_l": metrics.rouge_l, "em": metrics.em,
            "losses": {"sft": _mean(losses)},
        })
    if federate:
        blocks = aggregate_lora([decode_blocks(m.payload)[0] for m in uploads])
        for dev in world.devices:
            msg = make_message(t, "download", "server", dev.name, blocks)
            ledger.append(msg)
            received, _ = decode_blocks(msg.payload)
            load_lora_blocks(dev.slm, received)
    totals = ledger.round_totals().get(t, {"upload": 0, "download": 0,
                                           "messages": 0})
    return RoundReport(t=t, devices=device_reports, server=None, comm=totals)


@dataclass
class ExperimentResult:
    world: World
    reports: list
    ledger: CommLedger


def run_experiment(cfg: ExperimentConfig, seed: int) -> ExperimentResult:
    """End-to-end run of the selected method for one seed."""
    cfg.validate()
    method = cfg.method
    if method == "fedlora":
        tags = {cfg.slm_for(i).arch_tag for i in range(cfg.n_devices)}
        if len(tags) > 1:
            raise ValueError("fedlora cannot accommodate model heterogeneity; "
                             f"got arch tags {sorted(tags)}")
        toks = {(cfg.slm_for(i).tokenizer, cfg.slm_for(i).bpe_merges)
                for i in range(cfg.n_devices)}
        if len(toks) > 1:
            raise ValueError("fedlora requires a shared device tokenizer")
    world = init_world(cfg, seed, with_server_models=(method == "cotuning"))
    ledger = CommLedger()
    reports = []
    if method == "cotuning":
        setup_cotuning(world)
        for t in range(1, cfg.rounds + 1):
            reports.append(run_round(world, t, ledger))
    else:
        for t in range(1, cfg.rounds + 1):
            reports.append(_baseline_round(world, t, ledger,
                                           federate=(method == "fedlora")))
    return ExperimentResult(world=world, reports=reports, ledger=ledger)


def baseline_standalone(cfg: ExperimentConfig, seed: int) -> ExperimentResult:
    return run_experiment(replace(cfg, method="standalone"), seed)


def baseline_fedlora(cfg: ExperimentConfig, seed: int) -> ExperimentResult:
    return run_experiment(replace(cfg, method="fedlora"), seed)
