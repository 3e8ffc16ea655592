import filecmp
import json

import pytest

import fedcodec.cli as cli
from fedcodec.errors import InfeasibleBudgetError

TASK = {
    "n": 10, "r": 2, "layers": 1, "module_tags": ["q", "v"], "classes": 3,
    "clients": 4, "samples_per_client": 12, "eval_samples": 32,
}
IDENTITY_FED = {"mode": "identity", "sigma": 0.0, "rounds_max": 2,
                "lr_local": 0.2, "lr_server": 0.5, "batch_size": 6}
CODEC_FED = {
    "mode": "random-prior", "sigma": 0.0, "rounds_max": 2, "lr_local": 0.2,
    "lr_server": 0.5, "batch_size": 6, "pretrain_epochs": 2,
    "codec_latent_dim": 8, "codec_hidden_dim": 16, "codec_train_steps": 40,
}


def write_cfg(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture
def acct_cfg(tmp_path):
    return write_cfg(tmp_path / "acct.json", {
        "out_dir": str(tmp_path / "out"),
        "accountant": {"eps": ["inf", 4, 1], "sample_rate": 1.0, "rounds": 4,
                       "population": 149, "delta": 0.01},
    })


@pytest.fixture
def fed_cfg(tmp_path):
    return write_cfg(tmp_path / "fed.json", {
        "out_dir": str(tmp_path / "run"),
        "task": TASK,
        "federation": IDENTITY_FED,
    })


@pytest.fixture
def codec_cfg(tmp_path):
    return write_cfg(tmp_path / "codec.json", {
        "out_dir": str(tmp_path / "run"),
        "task": TASK,
        "federation": CODEC_FED,
    })


def read_csv_rows(path):
    lines = path.read_bytes().decode().split("\r\n")
    header = lines[0].split(",")
    return [dict(zip(header, line.split(","))) for line in lines[1:] if line]


def test_calibrate_writes_table(tmp_path, acct_cfg, capsys):
    assert cli.main(["calibrate", "--config", acct_cfg]) == 0
    out = tmp_path / "out"
    rows = read_csv_rows(out / "accountant.csv")
    assert [r["eps_target"] for r in rows] == ["inf", "4.0", "1.0"]
    assert rows[0]["sigma"] == "0.0"  # the non-private row carries no noise
    assert float(rows[1]["sigma"]) < float(rows[2]["sigma"])  # tighter -> noisier
    assert float(rows[1]["gdp_eps"]) == pytest.approx(4.0, rel=1e-6)
    assert (out / "trace.csv").is_file()
    assert (out / "accountant.json").is_file()
    assert (out / "meta.json").is_file()
    assert "accountant.csv" in capsys.readouterr().out


def test_calibrate_delta_modes_differ(tmp_path, acct_cfg):
    a, b = tmp_path / "fixed", tmp_path / "overn"
    assert cli.main(["calibrate", "--config", acct_cfg, "--out-dir", str(a)]) == 0
    assert cli.main(["calibrate", "--config", acct_cfg, "--out-dir", str(b),
                     "--delta-mode", "one-over-n"]) == 0
    ra = read_csv_rows(a / "accountant.csv")
    rb = read_csv_rows(b / "accountant.csv")
    # 1/149 is a tighter delta than the fixed 0.01, so it needs more noise
    assert float(rb[1]["sigma"]) > float(ra[1]["sigma"])
    # the --delta flag overrides the fixed value
    c = tmp_path / "override"
    assert cli.main(["calibrate", "--config", acct_cfg, "--out-dir", str(c),
                     "--delta", "0.001"]) == 0
    rc_rows = read_csv_rows(c / "accountant.csv")
    assert float(rc_rows[1]["sigma"]) > float(ra[1]["sigma"])


def test_payload_arithmetic(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "pay.json", {
        "out_dir": str(tmp_path / "out"),
        "payload": {"n": 16, "r": 2, "modules": 2, "layers": 3, "epochs": 5},
    })
    assert cli.main(["payload", "--config", cfg]) == 0
    row = json.loads((tmp_path / "out" / "payload.json").read_text())
    cells = 2 * 2 * 3 * 5
    assert row["raw_count"] == 16 * 2 * cells
    assert row["stats_count"] == 2 * cells
    assert "ratio" in capsys.readouterr().out


def test_simulate_writes_record_and_reruns_identically(tmp_path, fed_cfg):
    a, b = tmp_path / "runA", tmp_path / "runB"
    assert cli.main(["simulate", "--config", fed_cfg, "--out-dir", str(a)]) == 0
    assert cli.main(["simulate", "--config", fed_cfg, "--out-dir", str(b)]) == 0
    record = json.loads((a / "record.json").read_text())
    assert record["status"] == "completed"
    assert len(record["rounds"]) == 2
    match, mismatch, errors = filecmp.cmpfiles(
        a, b, ["record.csv", "record.json"], shallow=False
    )
    assert match == ["record.csv", "record.json"] and not mismatch and not errors
    # meta.json is the one artifact allowed to differ (it holds a timestamp)
    assert (a / "meta.json").is_file()


def test_simulate_seed_override_changes_run(tmp_path, fed_cfg):
    a, b = tmp_path / "s0", tmp_path / "s1"
    assert cli.main(["simulate", "--config", fed_cfg, "--out-dir", str(a)]) == 0
    assert cli.main(["simulate", "--config", fed_cfg, "--out-dir", str(b),
                     "--seed", "1"]) == 0
    ja = json.loads((a / "record.json").read_text())
    jb = json.loads((b / "record.json").read_text())
    assert ja["seed"] == 0 and jb["seed"] == 1
    assert ja["rounds"] != jb["rounds"]


def test_gradient_log_and_histograms(tmp_path, fed_cfg):
    run = tmp_path / "logged"
    assert cli.main(["simulate", "--config", fed_cfg, "--out-dir", str(run),
                     "--log-gradients"]) == 0
    assert (run / "gradients.npy").is_file()
    assert (run / "gradients_index.csv").is_file()
    hout = tmp_path / "hist"
    assert cli.main(["histograms", "--config", fed_cfg, "--run-dir", str(run),
                     "--out-dir", str(hout), "--bins", "12"]) == 0
    rows = read_csv_rows(hout / "histograms.csv")
    # layers x epochs x parts groups, 12 bins each
    assert len(rows) == 1 * 1 * 2 * 12
    assert sum(int(r["count"]) for r in rows) > 0


def test_histograms_without_log_is_a_missing_artifact(tmp_path, fed_cfg):
    run = tmp_path / "plain"
    assert cli.main(["simulate", "--config", fed_cfg, "--out-dir", str(run)]) == 0
    rc = cli.main(["histograms", "--config", fed_cfg, "--run-dir", str(run),
                   "--out-dir", str(tmp_path / "h")])
    assert rc == 4


def test_pretrain_then_simulate_handoff(tmp_path, codec_cfg):
    art = tmp_path / "art"
    assert cli.main(["pretrain", "--config", codec_cfg, "--out-dir", str(art)]) == 0
    for name in ("encoder.json", "decoder.json", "stats.json", "pretrain.json"):
        assert (art / name).is_file()
    summary = json.loads((art / "pretrain.json").read_text())
    assert summary["clients"] == TASK["clients"]
    assert summary["final_loss"] < summary["initial_loss"]

    run = tmp_path / "run"
    assert cli.main(["simulate", "--config", codec_cfg, "--out-dir", str(run),
                     "--codec-dir", str(art)]) == 0
    record = json.loads((run / "record.json").read_text())
    assert record["status"] == "completed"

    # the same config pretrains inline to the identical run
    inline = tmp_path / "inline"
    assert cli.main(["simulate", "--config", codec_cfg, "--out-dir", str(inline)]) == 0
    assert (inline / "record.csv").read_bytes() == (run / "record.csv").read_bytes()


def test_simulate_rejects_foreign_codec(tmp_path, codec_cfg):
    art = tmp_path / "art"
    assert cli.main(["pretrain", "--config", codec_cfg, "--out-dir", str(art)]) == 0
    other = write_cfg(tmp_path / "other.json", {
        "out_dir": str(tmp_path / "run"),
        "task": TASK,
        "federation": {**CODEC_FED, "codec_train_steps": 41},
    })
    rc = cli.main(["simulate", "--config", other, "--out-dir",
                   str(tmp_path / "r2"), "--codec-dir", str(art)])
    assert rc == 2
    # sweep knobs outside the fingerprint scope still accept the artifacts
    sweep = write_cfg(tmp_path / "sweep.json", {
        "out_dir": str(tmp_path / "r3"),
        "task": TASK,
        "federation": {**CODEC_FED, "sigma": 0.5, "rounds_max": 1},
    })
    assert cli.main(["simulate", "--config", sweep, "--codec-dir", str(art)]) == 0


def test_simulate_codec_dir_guards(tmp_path, fed_cfg, codec_cfg):
    rc = cli.main(["simulate", "--config", codec_cfg, "--codec-dir",
                   str(tmp_path / "nowhere")])
    assert rc == 4  # artifacts absent
    rc = cli.main(["simulate", "--config", fed_cfg, "--codec-dir",
                   str(tmp_path / "anything")])
    assert rc == 2  # identity mode takes no pretrained codec


def test_pretrain_rejects_codecless_modes(tmp_path, fed_cfg):
    assert cli.main(["pretrain", "--config", fed_cfg]) == 2


def test_report_merges_levels_and_renders_figures(tmp_path):
    runs = []
    for label, fed in (("inf", IDENTITY_FED), ("noisy", {**IDENTITY_FED, "sigma": 0.5})):
        for seed in (0, 1):
            out = tmp_path / f"{label}-{seed}"
            cfg = write_cfg(tmp_path / f"{label}-{seed}.json", {
                "out_dir": str(out), "task": TASK, "federation": fed,
            })
            assert cli.main(["simulate", "--config", cfg, "--seed", str(seed)]) == 0
            runs.append(str(out))
    rep = tmp_path / "report"
    cfg = write_cfg(tmp_path / "rep.json", {"out_dir": str(rep), "task": TASK})
    assert cli.main(["report", "--config", cfg, *runs]) == 0
    levels = read_csv_rows(rep / "report.csv")
    assert [r["level"] for r in levels] == ["inf", "sigma=0.5"]
    assert all(r["runs"] == "2" for r in levels)
    rounds = read_csv_rows(rep / "rounds.csv")
    assert len(rounds) == 2
    assert (rep / "report.json").is_file()
    assert (rep / "utility_vs_privacy.png").is_file()
    assert (rep / "rounds.png").is_file()


def test_report_missing_run_dir(tmp_path, fed_cfg):
    rc = cli.main(["report", "--config", fed_cfg, str(tmp_path / "ghost")])
    assert rc == 4


def test_config_errors_exit_2(tmp_path):
    assert cli.main(["simulate", "--config", str(tmp_path / "none.json")]) == 2
    bad = write_cfg(tmp_path / "bad.json", {"task": TASK, "federation": IDENTITY_FED,
                                            "surprise": 1})
    assert cli.main(["simulate", "--config", bad]) == 2
    # a command missing its section is a config error too
    acct_only = write_cfg(tmp_path / "acct.json", {"accountant": {"eps": [1.0]}})
    assert cli.main(["simulate", "--config", acct_only]) == 2
    assert cli.main(["payload", "--config", acct_only]) == 2


def test_infeasible_budget_exits_3(tmp_path, acct_cfg, monkeypatch):
    def refuse(eps, delta, p, rounds):
        raise InfeasibleBudgetError("forced for the exit-code contract")

    monkeypatch.setattr(cli, "calibrate_sigma", refuse)
    assert cli.main(["calibrate", "--config", acct_cfg]) == 3
