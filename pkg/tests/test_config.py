import dataclasses
import json
import math

import pytest

from fedcodec.accounting import calibrate_sigma
from fedcodec.config import (
    DEFAULT_EPS_GRID,
    DEFAULT_FIXED_DELTA,
    AccountantConfig,
    PayloadSpec,
    apply_overrides,
    codec_fingerprint,
    load_config,
    parse_config,
)
from fedcodec.errors import ConfigError

TASK = {
    "n": 10, "r": 2, "layers": 1, "module_tags": ["q", "v"], "classes": 3,
    "clients": 4, "samples_per_client": 12, "eval_samples": 32,
}
FED = {"mode": "identity", "sigma": 0.0, "rounds_max": 3}


def test_parse_minimal_document():
    cfg = parse_config({})
    assert cfg.seed == 0 and cfg.out_dir == "out"
    assert cfg.task is None and cfg.fed is None
    with pytest.raises(ConfigError, match="federation"):
        cfg.require_fed()
    with pytest.raises(ConfigError, match="accountant"):
        cfg.require_accountant()
    with pytest.raises(ConfigError, match="payload"):
        cfg.require_payload()


def test_parse_full_document():
    cfg = parse_config({
        "seed": 7,
        "out_dir": "runs/x",
        "task": TASK,
        "federation": FED,
        "estimator": {"beta1": 0.8},
        "accountant": {"eps": [2.0, 1.0], "rounds": 5, "population": 100},
        "payload": {"n": 4, "r": 2, "modules": 1, "layers": 1, "epochs": 1},
    })
    assert cfg.seed == 7
    assert cfg.fed.seed == 7  # seed propagates into the federation block
    assert cfg.fed.task.module_tags == ("q", "v")
    assert cfg.fed.estimator.beta1 == 0.8
    assert cfg.accountant.eps == (2.0, 1.0)
    assert cfg.payload.raw_count == 4 * 2 * 2


def test_unknown_keys_fail_closed_at_every_level():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config({"extra": 1})
    with pytest.raises(ConfigError, match="task: unknown key"):
        parse_config({"task": {**TASK, "bogus": 1}})
    with pytest.raises(ConfigError, match="federation: unknown key"):
        parse_config({"task": TASK, "federation": {**FED, "bogus": 1}})
    with pytest.raises(ConfigError, match="accountant: unknown key"):
        parse_config({"accountant": {"bogus": 1}})
    with pytest.raises(ConfigError, match="payload: unknown key"):
        parse_config({"payload": {"n": 4, "r": 2, "modules": 1, "layers": 1,
                                  "epochs": 1, "bogus": 1}})
    with pytest.raises(ConfigError, match="estimator: unknown key"):
        parse_config({"estimator": {"bogus": 1}})
    # reserved bindings cannot be smuggled into the federation section
    with pytest.raises(ConfigError, match="federation: unknown key"):
        parse_config({"task": TASK, "federation": {**FED, "seed": 3}})


def test_parse_rejects_bad_shapes():
    with pytest.raises(ConfigError, match="root"):
        parse_config([1, 2])
    with pytest.raises(ConfigError, match="seed"):
        parse_config({"seed": "three"})
    with pytest.raises(ConfigError, match="seed"):
        parse_config({"seed": True})
    with pytest.raises(ConfigError, match="out_dir"):
        parse_config({"out_dir": ""})
    with pytest.raises(ConfigError, match="needs a 'task'"):
        parse_config({"federation": FED})
    with pytest.raises(ConfigError, match="federation"):
        parse_config({"task": TASK, "federation": {**FED, "mode": "magic"}})


def test_parse_accepts_inf_strings_and_lr_lists():
    cfg = parse_config({
        "task": TASK,
        "federation": {**FED, "clip": math.inf, "lr_server": [1.0, 0.5]},
        "accountant": {"eps": ["inf", 8, 4]},
    })
    assert math.isinf(cfg.fed.clip)
    assert cfg.fed.lr_server == (1.0, 0.5)
    assert cfg.accountant.eps[0] == math.inf
    assert cfg.accountant.eps[1:] == (8.0, 4.0)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(str(bad))
    ok = tmp_path / "ok.json"
    ok.write_text(json.dumps({"seed": 4, "task": TASK, "federation": FED}))
    assert load_config(str(ok)).fed.seed == 4


def test_apply_overrides():
    cfg = parse_config({
        "seed": 1, "task": TASK, "federation": FED,
        "accountant": {"eps": [1.0], "delta": 0.01},
    })
    out = apply_overrides(cfg, seed=9, out_dir="elsewhere", delta=0.001)
    assert out.seed == 9 and out.fed.seed == 9
    assert out.out_dir == "elsewhere"
    assert out.fed.delta == 0.001
    assert out.accountant.delta == 0.001
    # None leaves everything alone
    again = apply_overrides(out)
    assert again == out


def test_accountant_delta_modes():
    acct = AccountantConfig(eps=(1.0,), population=200, delta=0.05)
    assert acct.resolved_delta("one-over-n") == pytest.approx(1 / 200)
    assert acct.resolved_delta("fixed") == 0.05
    assert AccountantConfig(eps=(1.0,)).resolved_delta("fixed") == DEFAULT_FIXED_DELTA
    with pytest.raises(ConfigError, match="population"):
        AccountantConfig(eps=(1.0,)).resolved_delta("one-over-n")
    with pytest.raises(ConfigError, match="delta mode"):
        acct.resolved_delta("auto")
    with pytest.raises(ValueError, match="nonempty"):
        AccountantConfig(eps=())
    with pytest.raises(ValueError, match="positive"):
        AccountantConfig(eps=(1.0, -2.0))
    assert AccountantConfig().eps == DEFAULT_EPS_GRID


def test_payload_spec_counts():
    # 7B decoder deployment: rank-64 adapters on 7 modules of 32 layers,
    # streamed over 10 epochs
    spec = PayloadSpec(n=4096, r=64, modules=7, layers=32, epochs=10)
    assert spec.cells == 2 * 7 * 32 * 10
    assert spec.raw_count == 4096 * 64 * spec.cells
    assert spec.stats_count == 2 * spec.cells
    assert spec.ratio == pytest.approx(2 / (4096 * 64))
    row = spec.as_row()
    assert row["raw_bytes"] == spec.raw_count * 8
    assert row["stats_bytes"] == spec.stats_count * 8
    with pytest.raises(ValueError, match=">= 1"):
        PayloadSpec(n=0, r=1, modules=1, layers=1, epochs=1)


def make_fed(**kw):
    doc = {"task": TASK, "federation": {**FED, **kw}}
    return parse_config(doc).fed


def test_fingerprint_scope_excludes_round_knobs():
    base = codec_fingerprint(make_fed())
    # sweep knobs: same artifacts stay valid across these
    assert codec_fingerprint(make_fed(sigma=2.5)) == base
    assert codec_fingerprint(make_fed(sigma=None, eps=4.0, delta=0.01)) == base
    assert codec_fingerprint(make_fed(rounds_max=50)) == base
    assert codec_fingerprint(make_fed(sample_rate=0.3)) == base
    assert codec_fingerprint(make_fed(lr_server=[2.0, 1.0])) == base
    assert codec_fingerprint(make_fed(local_epochs=4)) == base
    assert codec_fingerprint(make_fed(resample_empty=True)) == base
    assert codec_fingerprint(make_fed(aggregate_latents=True)) == base


def test_fingerprint_scope_includes_pretraining_knobs():
    base = codec_fingerprint(make_fed())
    changed = [
        make_fed(mode="random-prior"),
        make_fed(clip=2.0),
        make_fed(normalize_transmit=False),
        make_fed(lr_local=0.9),
        make_fed(batch_size=5),
        make_fed(adapter_scale=0.1),
        make_fed(pretrain_epochs=2),
        make_fed(codec_latent_dim=8),
        make_fed(codec_train_steps=33),
        make_fed(codec_per_part=True),
        make_fed(codec_latent_noise=0.5),
        make_fed(stats_elementwise=True),
    ]
    prints = [codec_fingerprint(f) for f in changed]
    assert all(p != base for p in prints)
    assert len(set(prints)) == len(prints)
    # the task and seed shape the pretraining data, so they are in scope
    other_task = parse_config(
        {"task": {**TASK, "n": 12}, "federation": FED}
    ).fed
    assert codec_fingerprint(other_task) != base
    other_seed = parse_config(
        {"seed": 5, "task": TASK, "federation": FED}
    ).fed
    assert codec_fingerprint(other_seed) != base


def test_fingerprint_stable_across_processes():
    # value equality, not object identity, drives the hash
    a = codec_fingerprint(make_fed())
    b = codec_fingerprint(make_fed())
    assert a == b and len(a) == 64 and set(a) <= set("0123456789abcdef")
    inf_clip = codec_fingerprint(make_fed(clip=math.inf))
    assert inf_clip != codec_fingerprint(make_fed(clip=1.0))


def test_budget_config_resolves_like_library_calibration():
    fed = make_fed(sigma=None, eps=2.0, delta=0.01, rounds_max=4, sample_rate=1.0)
    assert fed.resolved_sigma() == pytest.approx(
        calibrate_sigma(2.0, 0.01, 1.0, 4), rel=1e-12
    )
