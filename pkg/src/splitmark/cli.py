"""Command-line entry point: ``splitmark <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or input-file
error, 3 a verification fell below its threshold.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import harness
from .attacks import load_trigger
from .data import load_dataset
from .errors import ConfigError, FormatError, SplitmarkError
from .nn import load_model
from .watermark import DEFAULT_TAU, VerificationReport, load_wm, verify_bottom, verify_top

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_BELOW = 0, 1, 2, 3


def _out_dir(cfg: harness.ExperimentConfig, override: str | None) -> Path:
    return Path(override or cfg.output_dir)


def _print_rows(report: harness.RunReport) -> None:
    for row in report.rows:
        rec = row.csv_record()
        label = row.stage if not row.attack else f"{row.stage}[{row.attack_param}]"
        note = f"  ERROR {row.error}" if row.error else ""
        print(f"seed={rec['seed']} {label:<28} acc={rec['acc_main']} theta_F={rec['theta_F']} "
              f"theta_B_mean={rec['theta_B_mean']} theta_B_min={rec['theta_B_min']}{note}")


def _finish(report: harness.RunReport, out: Path) -> int:
    harness.emit_metrics(report, out)
    _print_rows(report)
    print(f"wrote {out / 'metrics.csv'}")
    return EXIT_FAIL if any(r.error for r in report.rows) else EXIT_OK


def cmd_train(args) -> int:
    cfg = dataclasses.replace(harness.load_config(args.config), attack_grid=())
    out = _out_dir(cfg, args.out)
    report = harness.run_experiment(cfg, save_dir=out)
    return _finish(report, out)


def cmd_run(args) -> int:
    cfg = harness.load_config(args.config)
    out = _out_dir(cfg, args.out)
    report = harness.run_experiment(cfg, save_dir=out if args.save else None)
    return _finish(report, out)


def cmd_attack(args) -> int:
    cfg = harness.load_config(args.config)
    cfg = dataclasses.replace(cfg, stages=("rise",), attack_grid=(args.kind,))
    out = _out_dir(cfg, args.out) / f"attack-{args.kind}"
    report = harness.RunReport(harness.config_dict(cfg))
    for seed in cfg.seeds:
        pretrained = None
        if args.checkpoints:
            try:
                pretrained = {"rise": harness.load_pair(args.checkpoints, seed, "rise", cfg.train.split_index)}
            except OSError as exc:
                raise ConfigError(f"missing rise checkpoint for seed {seed}: {exc}") from exc
        harness.run_seed(cfg, seed, report, pretrained=pretrained)
    return _finish(report, out)


def cmd_verify_top(args) -> int:
    top = load_model(args.checkpoint)
    fw = load_wm(args.wmfile)
    theta = verify_top(top, fw)
    print(json.dumps({"theta_F": round(theta, 4), "tau": args.tau, "decision": theta >= args.tau}))
    return EXIT_OK if theta >= args.tau else EXIT_BELOW


def cmd_verify_bottom(args) -> int:
    bottom, top = load_model(args.bottom), load_model(args.top)
    trig = load_trigger(args.trigger)
    test = load_dataset(args.dataset)
    res = verify_bottom(bottom, top, trig, test, args.rho, args.tau, args.seed)
    client = args.client
    report = VerificationReport(None, {client: res.theta_B}, args.tau, n_triggered={client: res.n_triggered})
    print(report.to_json())
    return EXIT_OK if res.decision else EXIT_BELOW


def cmd_report(args) -> int:
    report = harness.load_report(args.dir)
    summary = report.summary()
    for key, cell in sorted(summary["cells"].items()):
        parts = [f"{name}={v['mean']:.4f}+-{v['std']:.4f}" for name, v in cell.items()]
        print(f"{key:<32} n={cell['acc_main']['n']} " + " ".join(parts))
    for name, test in summary["tests"].items():
        print(f"mann-whitney {name}: {test['a']} > {test['b']} on {test['metric']}  U={test['U']:.1f} p={test['p']:.4f}")
    errors = [r for r in report.rows if r.error]
    for r in errors:
        print(f"error seed={r.seed} stage={r.stage}: {r.error}")
    return EXIT_FAIL if errors else EXIT_OK


def cmd_audit(args) -> int:
    cfg = harness.load_config(args.config)
    out = _out_dir(cfg, args.out)
    results = []
    status = EXIT_OK
    for seed in cfg.seeds:
        outcome = harness.audit_freeriders(cfg, seed, args.benign)
        entry = {"seed": seed, "acc_main": round(outcome.acc_main, 4), "clients": {}}
        for client, res in outcome.results.items():
            role = outcome.roles[client]
            entry["clients"][str(client)] = {"role": role, **{k: (round(v, 4) if isinstance(v, float) else v)
                                                               for k, v in res.items()}}
            print(f"seed={seed} client={client} role={role:<6} theta_B={res['theta_B']:.4f} "
                  f"{'PASS' if res['passed'] else 'FAIL'}")
            if role == "benign" and not res["passed"]:
                status = EXIT_BELOW
        results.append(entry)
    out.mkdir(parents=True, exist_ok=True)
    (out / "freeriders.json").write_text(json.dumps(results, indent=2))
    return status


def cmd_dp_sweep(args) -> int:
    cfg = harness.load_config(args.config)
    out = _out_dir(cfg, args.out)
    report = harness.RunReport(harness.config_dict(cfg))
    for seed in cfg.seeds:
        for row in harness.dp_sweep(cfg, seed, args.sigmas):
            row.stage = "rise"
            row.attack, row.attack_param = "dp", f"{row.extra['dp_sigma']:g}"
            report.rows.append(row)
    return _finish(report, out / "dp-sweep")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splitmark", description="Dual watermarking for split federated learning.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train the configured stages and save checkpoints")
    s.add_argument("config")
    s.add_argument("--out", help="output directory (default: [output] output_dir)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("run", help="train, verify, run the attack grid and write metrics")
    s.add_argument("config")
    s.add_argument("--out")
    s.add_argument("--save", action="store_true", help="also save checkpoints and seed artifacts")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("attack", help="run one attack family on the dual-watermarked model")
    s.add_argument("kind", choices=harness.ATTACKS)
    s.add_argument("config")
    s.add_argument("--out")
    s.add_argument("--checkpoints", help="directory written by 'train'; skips retraining")
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("verify-top", help="server-side feature watermark check")
    s.add_argument("checkpoint")
    s.add_argument("wmfile")
    s.add_argument("--tau", type=float, default=1.0, help="minimum theta_F (default 1.0)")
    s.set_defaults(func=cmd_verify_top)

    s = sub.add_parser("verify-bottom", help="client-side backdoor watermark check")
    s.add_argument("bottom")
    s.add_argument("top")
    s.add_argument("trigger")
    s.add_argument("dataset")
    s.add_argument("--rho", type=float, default=0.5)
    s.add_argument("--tau", type=float, default=DEFAULT_TAU)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--client", type=int, default=0, help="client id used in the JSON report")
    s.set_defaults(func=cmd_verify_bottom)

    s = sub.add_parser("report", help="summarise a run directory")
    s.add_argument("dir")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("audit-freeriders", help="benign clients plus Type I and Type II free-riders")
    s.add_argument("config")
    s.add_argument("--out")
    s.add_argument("--benign", type=int, default=3)
    s.set_defaults(func=cmd_audit)

    s = sub.add_parser("dp-sweep", help="dual-watermark training under increasing activation noise")
    s.add_argument("config")
    s.add_argument("--out")
    s.add_argument("--sigmas", type=float, nargs="+", default=list(harness.DP_SIGMAS))
    s.set_defaults(func=cmd_dp_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError) as exc:
        print(f"splitmark: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SplitmarkError as exc:
        print(f"splitmark: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except OSError as exc:
        print(f"splitmark: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
