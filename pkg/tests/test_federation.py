import numpy as np
import pytest

from cotune import federation as fed
from cotune.blockio import decode_blocks
from cotune.config import resolve
from cotune.model import lora_blocks, named_parameters


def tiny_cfg(**overrides):
    base = {
        "method": "cotuning", "n_devices": 2, "rounds": 1, "lam": 0.5,
        "seeds": [0], "pool_k": 5, "adapter_bottleneck": 4, "eval_max_new": 6,
        "llm": {"layers": 2, "heads": 2, "hidden": 24, "ffn": 48,
                "max_seq": 40, "tokenizer": "char"},
        "dpm": {"layers": 1, "heads": 2, "hidden": 12, "ffn": 24,
                "max_seq": 40, "tokenizer": "char"},
        "slms": [
            {"layers": 1, "heads": 2, "hidden": 12, "ffn": 24, "max_seq": 40,
             "tokenizer": "char"},
            {"layers": 1, "heads": 2, "hidden": 12, "ffn": 24, "max_seq": 40,
             "tokenizer": "bpe", "bpe_merges": 12},
        ],
        "lora": {"targets": ["wq", "wv"], "rank": 2},
        "optim": {"lr": 0.05, "warmup_epochs": 0, "distill_steps": 4,
                  "distill_lr": 0.1, "dst_epochs": 1, "saml_epochs": 1},
        "data": {"domains": ["alpha", "beta"], "per_domain": 30,
                 "per_device": 12, "train_fraction": 0.8, "server_size": 10},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            base[key].update(value)
        else:
            base[key] = value
    return resolve(base)


# --- aggregation -------------------------------------------------------------------


def test_aggregate_single_is_identity():
    blocks = {"lora.x": np.array([1.0, 2.0])}
    out = fed.aggregate_lora([blocks])
    assert np.array_equal(out["lora.x"], blocks["lora.x"])


def test_aggregate_hand_mean():
    out = fed.aggregate_lora([{"w": np.array([2.0])}, {"w": np.array([4.0])}])
    assert out["w"][0] == 3.0


def test_aggregate_matches_loop_oracle():
    rng = np.random.default_rng(0)
    sets = [{"a": rng.normal(size=(3, 2)), "b": rng.normal(size=(4,))}
            for _ in range(3)]
    out = fed.aggregate_lora(sets)
    for key in ("a", "b"):
        want = np.zeros_like(sets[0][key])
        for s in sets:
            want += s[key]
        want /= 3
        assert np.max(np.abs(out[key] - want)) < 1e-15


def test_aggregate_validation():
    with pytest.raises(ValueError):
        fed.aggregate_lora([])
    with pytest.raises(ValueError):
        fed.aggregate_lora([{"a": np.zeros(2)}, {"b": np.zeros(2)}])
    with pytest.raises(ValueError):
        fed.aggregate_lora([{"a": np.zeros(2)}, {"a": np.zeros(3)}])


# --- messages and ledger -------------------------------------------------------------


def test_message_counts_and_descriptor():
    blocks = {"lora.a": np.zeros((2, 3)), "lora.b": np.ones(4)}
    msg = fed.make_message(1, "upload", "device0", "server", blocks)
    assert msg.scalar_count == 10
    assert msg.byte_count == 80
    assert msg.blocks == (("lora.a", (2, 3)), ("lora.b", (4,)))
    decoded, meta = decode_blocks(msg.payload)
    assert np.array_equal(decoded["lora.b"], blocks["lora.b"])
    assert meta["round"] == 1


def test_ledger_totals_and_csv_round_trip(tmp_path):
    ledger = fed.CommLedger()
    blocks = {"lora.a": np.zeros(5)}
    for t in (1, 1, 2):
        ledger.append(fed.make_message(t, "upload", "device0", "server", blocks))
        ledger.append(fed.make_message(t, "download", "server", "device0", blocks))
    totals = ledger.round_totals()
    assert totals[1] == {"upload": 10, "download": 10, "messages": 4}
    assert totals[2] == {"upload": 5, "download": 5, "messages": 2}
    path = tmp_path / "ledger.csv"
    ledger.to_csv(path)
    rows = fed.read_ledger_csv(path)
    assert len(rows) == 6
    assert rows[0]["blocks"] == "lora.a"
    assert sum(r["scalar_count"] for r in rows) == 30
    assert all(r["byte_count"] == r["scalar_count"] * 8 for r in rows)


def test_comm_ratio_empty_and_hand_case():
    ledger = fed.CommLedger()
    assert fed.comm_ratio(ledger, "device0", 1000) == 0.0
    blocks = {"lora.a": np.zeros(100)}
    for t in (1, 2):
        ledger.append(fed.make_message(t, "upload", "device0", "server", blocks))
        ledger.append(fed.make_message(t, "download", "server", "device0", blocks))
    # 200 scalars per round for device0, resident 1000 -> 0.2
    assert fed.comm_ratio(ledger, "device0", 1000) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        fed.comm_ratio(ledger, "device0", 0)


def test_lora_scalar_count_matches_model():
    from cotune.model import ModelConfig, TinyTransformer, attach_lora
    from cotune.blockio import scalar_count
    m = TinyTransformer(ModelConfig(layers=2, heads=2, hidden=12, ffn=24,
                                    vocab=11, max_seq=16), seed=0)
    attach_lora(m, ("wq", "wv"), rank=2, seed=1)
    assert scalar_count(lora_blocks(m)) == fed.lora_scalar_count(2, 12, ("wq", "wv"), 2)


# --- world construction ---------------------------------------------------------------


def test_init_world_is_paired_across_calls():
    cfg = tiny_cfg()
    w1 = fed.init_world(cfg, seed=3, with_server_models=False)
    w2 = fed.init_world(cfg, seed=3, with_server_models=False)
    assert w1.manifest == w2.manifest
    for d1, d2 in zip(w1.devices, w2.devices):
        p1, p2 = named_parameters(d1.slm), named_parameters(d2.slm)
        for k in p1:
            assert np.array_equal(p1[k].data, p2[k].data)
        assert d1.slm_tokenizer.vocab.tokens == d2.slm_tokenizer.vocab.tokens
        assert [s.output for s in d1.train] == [s.output for s in d2.train]


def test_init_world_sizes():
    cfg = tiny_cfg()
    world = fed.init_world(cfg, seed=0, with_server_models=True)
    assert len(world.devices) == 2
    for dev in world.devices:
        assert len(dev.train) == 10 and len(dev.test) == 2
    assert len(world.server.train) == 8 and len(world.server.test) == 2
    assert world.server.llm is not None
    assert world.devices[0].slm_tokenizer.kind == "char"
    assert world.devices[1].slm_tokenizer.kind == "bpe"


# --- the protocol round ---------------------------------------------------------------


def run_one_round(cfg, seed=0):
    world = fed.init_world(cfg, seed, with_server_models=True)
    fed.setup_cotuning(world)
    ledger = fed.CommLedger()
    report = fed.run_round(world, 1, ledger)
    return world, ledger, report


def test_round_message_pattern_and_payload_privacy():
    cfg = tiny_cfg()
    world, ledger, report = run_one_round(cfg)
    ups = [m for m in ledger.messages if m.direction == "upload"]
    downs = [m for m in ledger.messages if m.direction == "download"]
    assert len(ups) == 2 and len(downs) == 2
    want = fed.lora_scalar_count(cfg.dpm.layers, cfg.dpm.hidden,
                                 cfg.lora.targets, cfg.lora.rank)
    for m in ledger.messages:
        assert m.scalar_count == want
        assert all(name.startswith("lora.") for name, _ in m.blocks)


def test_round_downloads_synchronize_dpm_lora():
    world, ledger, report = run_one_round(tiny_cfg())
    server_blocks = lora_blocks(world.server.dpm)
    for dev in world.devices:
        dev_blocks = lora_blocks(dev.dpm)
        for k in server_blocks:
            assert np.array_equal(dev_blocks[k], server_blocks[k])


def test_round_keeps_dpm_base_frozen():
    cfg = tiny_cfg()
    world = fed.init_world(cfg, 0, with_server_models=True)
    fed.setup_cotuning(world)
    before = {dev.device_id: {k: p.data.copy()
                              for k, p in named_parameters(dev.dpm).items()
                              if not (k.startswith("lora") or k.startswith("adapter"))}
              for dev in world.devices}
    fed.run_round(world, 1, fed.CommLedger())
    for dev in world.devices:
        now = named_parameters(dev.dpm)
        for k, arr in before[dev.device_id].items():
            assert np.array_equal(now[k].data, arr), k


def test_round_report_shape():
    cfg = tiny_cfg()
    _, ledger, report = run_one_round(cfg)
    assert report.t == 1
    assert len(report.devices) == 2
    for entry in report.devices:
        assert 0.0 <= entry["rouge_l"] <= 1.0
        assert 0.0 <= entry["em"] <= 1.0
        assert set(entry["losses"]) == {"dst", "saml_dpm", "saml_slm"}
    assert set(report.server["losses"]) == {"saml_dpm", "saml_llm"}
    assert report.server["held_out_loss"] > 0
    assert report.comm["messages"] == 4


def test_no_server_saml_downloads_plain_aggregate():
    cfg = tiny_cfg(ablations={"no_server_saml": True})
    world, ledger, _ = run_one_round(cfg)
    ups = [decode_blocks(m.payload)[0] for m in ledger.messages
           if m.direction == "upload"]
    want = fed.aggregate_lora(ups)
    down = decode_blocks([m for m in ledger.messages
                          if m.direction == "download"][0].payload)[0]
    for k in want:
        assert np.array_equal(down[k], want[k])


def test_no_dst_skips_adapters():
    cfg = tiny_cfg(ablations={"no_dst": True})
    world, ledger, report = run_one_round(cfg)
    for dev in world.devices:
        assert not dev.dpm.adapters
    for entry in report.devices:
        assert entry["losses"]["dst"] == 0.0


# --- run_experiment and baselines ------------------------------------------------------


def test_run_experiment_zero_rounds():
    cfg = tiny_cfg(rounds=0)
    result = fed.run_experiment(cfg, seed=0)
    assert result.reports == []
    assert result.ledger.messages == []
    assert result.world.server.dpm is not None  # initialization still ran


def test_run_experiment_deterministic_reports():
    cfg = tiny_cfg()
    a = fed.run_experiment(cfg, seed=1)
    b = fed.run_experiment(cfg, seed=1)
    assert [r.to_dict() for r in a.reports] == [r.to_dict() for r in b.reports]
    assert [m.payload for m in a.ledger.messages] == \
           [m.payload for m in b.ledger.messages]


def test_standalone_has_empty_ledger_and_shared_schema():
    cfg = tiny_cfg(method="standalone")
    result = fed.run_experiment(cfg, seed=0)
    assert result.ledger.messages == []
    report = result.reports[0]
    assert report.server is None
    for entry in report.devices:
        assert set(entry["losses"]) == {"sft"}
        assert 0.0 <= entry["rouge_l"] <= 1.0
    assert report.comm == {"upload": 0, "download": 0, "messages": 0}


def test_fedlora_rejects_heterogeneous_devices():
    cfg = tiny_cfg(method="fedlora")
    with pytest.raises(ValueError, match="heterogeneity|tokenizer"):
        fed.run_experiment(cfg, seed=0)


def test_fedlora_homogeneous_round():
    slm = {"layers": 1, "heads": 2, "hidden": 12, "ffn": 24, "max_seq": 40,
           "tokenizer": "char"}
    cfg = tiny_cfg(method="fedlora", slms=[slm, slm])
    result = fed.run_experiment(cfg, seed=0)
    ups = [m for m in result.ledger.messages if m.direction == "upload"]
    downs = [m for m in result.ledger.messages if m.direction == "download"]
    assert len(ups) == 2 and len(downs) == 2
    want = fed.lora_scalar_count(1, 12, cfg.lora.targets, cfg.lora.rank)
    assert all(m.scalar_count == want for m in ups)
    # devices end the round with identical slm lora
    b0 = lora_blocks(result.world.devices[0].slm)
    b1 = lora_blocks(result.world.devices[1].slm)
    for k in b0:
        assert np.array_equal(b0[k], b1[k])


def test_baseline_helpers_override_method():
    cfg = tiny_cfg(rounds=0)
    res = fed.baseline_standalone(cfg, seed=0)
    assert res.world.config.method == "standalone"


def test_comm_ratio_ordering_from_closed_form():
    # proxy lora blocks are smaller than device-model lora blocks whenever the
    # proxy is narrower, and the co-tuning denominator is larger as well
    cfg = tiny_cfg()
    dpm_up = fed.lora_scalar_count(cfg.dpm.layers, cfg.dpm.hidden,
                                   cfg.lora.targets, cfg.lora.rank)
    slm = cfg.slms[0]
    slm_up = fed.lora_scalar_count(slm.layers, slm.hidden, cfg.lora.targets,
                                   cfg.lora.rank)
    assert dpm_up <= slm_up
