"""Command-line front end: six subcommands driven by one JSON config.

calibrate  noise-multiplier table plus per-round accountant trace
payload    transmission-count arithmetic for raw vs stats shipping
pretrain   codec training; encoder/decoder/stats artifacts
simulate   one federated run; record files and optional gradient log
report     multi-seed merge: medians, plot data, rendered figures
histograms fixed-bin gradient histograms from a logged run

Exit codes: 0 success, 2 bad config, 3 infeasible privacy budget,
4 missing artifact, 5 diverged run.
"""

from __future__ import annotations

import argparse
import pathlib
import sys

from .accounting import build_report, calibrate_sigma
from .codec import load_artifact, model_from_artifacts, save_artifact, split_and_dispatch
from .config import (
    DELTA_MODES,
    apply_overrides,
    codec_fingerprint,
    load_config,
)
from .errors import (
    ConfigError,
    InfeasibleBudgetError,
    MissingArtifactError,
    TrainingDivergedError,
)
from .fedsim import FedSimulator, make_toy_task, pretrain
from .plots import render_report_figures
from .reporting import (
    build_histograms,
    load_gradient_log,
    load_json,
    save_gradient_log,
    write_accountant,
    write_csv,
    write_json,
    write_report,
    write_run_record,
    write_sidecar,
)
from .stats import serialize_stats


def _load(args):
    cfg = load_config(args.config)
    return apply_overrides(
        cfg, seed=args.seed, out_dir=args.out_dir, delta=args.delta
    )


def cmd_calibrate(args) -> int:
    cfg = _load(args)
    acct = cfg.require_accountant()
    params = acct.privacy_params(args.delta_mode)
    sigmas = [
        calibrate_sigma(eps, params.delta, params.sample_rate, params.rounds)
        for eps in acct.eps
    ]
    report = build_report(sigmas, params)
    out = pathlib.Path(cfg.out_dir)
    write_accountant(out, list(acct.eps), report)
    write_sidecar(out, "calibrate", delta_mode=args.delta_mode)
    print(
        f"wrote {out / 'accountant.csv'} ({len(sigmas)} rows, "
        f"delta={params.delta}, p={params.sample_rate}, T={params.rounds})"
    )
    return 0


def cmd_payload(args) -> int:
    cfg = _load(args)
    row = cfg.require_payload().as_row()
    out = pathlib.Path(cfg.out_dir)
    write_csv(out / "payload.csv", tuple(row), [tuple(row.values())])
    write_json(out / "payload.json", row)
    write_sidecar(out, "payload")
    print(
        f"raw scalars {row['raw_count']}, stats scalars {row['stats_count']}, "
        f"ratio {row['ratio']:.3e}"
    )
    print(f"wrote {out / 'payload.csv'}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load(args)
    fed = cfg.require_fed()
    if fed.mode not in ("random-prior", "real-gradient"):
        raise ConfigError(f"mode {fed.mode!r} has no codec to pretrain")
    task = make_toy_task(fed.task, fed.seed)
    result = pretrain(task, fed)
    fingerprint = codec_fingerprint(fed)
    enc, dec = split_and_dispatch(result.codec, fingerprint)

    out = pathlib.Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_artifact(enc, str(out / "encoder.json"))
    save_artifact(dec, str(out / "decoder.json"))
    write_json(
        out / "stats.json",
        {"clients": [serialize_stats(b) for b in result.bundles]},
    )
    tr = result.train_result
    write_json(
        out / "pretrain.json",
        {
            "fingerprint": fingerprint,
            "mode": fed.mode,
            "seed": fed.seed,
            "clients": len(result.bundles),
            "initial_loss": tr.initial_loss,
            "final_loss": tr.final_loss,
            "steps": tr.steps,
            "latent_dim": result.codec.total_latent_dim,
            "arch": result.codec.arch.to_dict(),
        },
    )
    write_sidecar(out, "pretrain")
    print(
        f"holdout loss {tr.initial_loss:.5f} -> {tr.final_loss:.5f} "
        f"over {tr.steps} steps"
    )
    print(f"wrote {out / 'encoder.json'}, {out / 'decoder.json'}")
    return 0


def cmd_simulate(args) -> int:
    cfg = _load(args)
    fed = cfg.require_fed()
    codec = None
    if args.codec_dir is not None:
        if fed.mode not in ("random-prior", "real-gradient"):
            raise ConfigError(f"mode {fed.mode!r} takes no pretrained codec")
        codec_dir = pathlib.Path(args.codec_dir)
        enc = load_artifact(str(codec_dir / "encoder.json"), "encoder")
        dec = load_artifact(str(codec_dir / "decoder.json"), "decoder")
        fingerprint = codec_fingerprint(fed)
        for artifact, name in ((enc, "encoder"), (dec, "decoder")):
            if artifact["fingerprint"] != fingerprint:
                raise ConfigError(
                    f"{name} in {codec_dir} was trained under fingerprint "
                    f"{artifact['fingerprint']}, this config needs "
                    f"{fingerprint}; re-run pretrain"
                )
        codec = model_from_artifacts(enc, dec)

    sim = FedSimulator(fed, codec=codec, log_gradients=args.log_gradients)
    record = sim.run()
    out = pathlib.Path(cfg.out_dir)
    write_run_record(out, record)
    if args.log_gradients:
        save_gradient_log(out, sim.gradient_log)
    write_sidecar(out, "simulate", log_gradients=bool(args.log_gradients))
    print(
        f"status {record.status}; final accuracy {record.final_accuracy:.4f} "
        f"(pre-update {record.baseline_accuracy:.4f}, "
        f"{len(record.rounds)} rounds)"
    )
    print(f"wrote {out / 'record.json'}")
    return 5 if record.status == "diverged" else 0


def cmd_report(args) -> int:
    cfg = _load(args)
    summaries = [
        load_json(pathlib.Path(run_dir) / "record.json") for run_dir in args.runs
    ]
    out = pathlib.Path(cfg.out_dir)
    merged = write_report(out, summaries)
    figures = render_report_figures(out, merged)
    write_sidecar(out, "report", runs=[str(r) for r in args.runs])
    for row in merged["levels"]:
        print(
            f"eps={row['level']}: median final {row['final_median']:.4f} "
            f"over {row['runs']} run(s)"
        )
    names = ", ".join(p.name for p in figures)
    print(f"wrote {out / 'report.csv'}, {out / 'rounds.csv'}, {names}")
    return 0


def cmd_histograms(args) -> int:
    cfg = _load(args)
    entries = load_gradient_log(args.run_dir)
    header, rows = build_histograms(entries, bins=args.bins)
    out = pathlib.Path(cfg.out_dir)
    write_csv(out / "histograms.csv", header, rows)
    write_sidecar(out, "histograms", run_dir=str(args.run_dir), bins=args.bins)
    print(f"wrote {out / 'histograms.csv'} ({len(rows)} rows)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedcodec",
        description="Private federated LoRA fine-tuning simulator and codec bench.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="path to the JSON run config")
    common.add_argument("--seed", type=int, default=None, help="override config seed")
    common.add_argument("--out-dir", default=None, help="override config out_dir")
    common.add_argument(
        "--delta", type=float, default=None, help="override the DP delta"
    )

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "calibrate", parents=[common], help="emit the noise-multiplier table"
    )
    p.add_argument(
        "--delta-mode",
        choices=DELTA_MODES,
        default="fixed",
        help="delta convention: 1/population or the fixed value",
    )
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser(
        "payload", parents=[common], help="emit transmission-count arithmetic"
    )
    p.set_defaults(func=cmd_payload)

    p = sub.add_parser("pretrain", parents=[common], help="train and save the codec")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("simulate", parents=[common], help="run one federated job")
    p.add_argument(
        "--codec-dir",
        default=None,
        help="directory with pretrain artifacts; omit to pretrain inline",
    )
    p.add_argument(
        "--log-gradients",
        action="store_true",
        help="persist every local factor update for histogram export",
    )
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser(
        "report", parents=[common], help="merge simulate runs into one report"
    )
    p.add_argument("runs", nargs="+", help="simulate output directories")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser(
        "histograms", parents=[common], help="export gradient histograms"
    )
    p.add_argument(
        "--run-dir", required=True, help="simulate output with a gradient log"
    )
    p.add_argument("--bins", type=int, default=40)
    p.set_defaults(func=cmd_histograms)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InfeasibleBudgetError as e:
        print(f"error: infeasible budget: {e}", file=sys.stderr)
        return 3
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except MissingArtifactError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except TrainingDivergedError as e:
        print(f"error: diverged: {e}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
