"""
Command line entry point.

    topofl compare  --config cfg.json --seed 0 --out results/
    topofl sweep    --config cfg.json --out results/
    topofl ablation --out results/
    topofl drift    --out results/
    topofl privacy  --out results/

Exit status: 0 on success, 2 for configuration errors, 3 for failures
while running. A failed run leaves a PARTIAL marker in the output folder.
"""

import argparse
import json
import sys
from pathlib import Path

from . import harness
from .errors import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
PARTIAL_MARKER = "PARTIAL"


def _write_timings(out, records):
    harness.write_text_atomic(out / "timings.json",
                              json.dumps(harness.timings(records), indent=2, sort_keys=True) + "\n")


def cmd_compare(cfg, out):
    records = harness.run_experiment(cfg, methods=cfg.methods)
    harness.write_csv(out / "rounds.csv", harness.ROUND_FIELDS,
                      [harness.record_row(r) for r in records])
    harness.write_csv(out / "summary.csv", harness.SUMMARY_FIELDS, harness.summary_rows(records))
    _write_timings(out, records)
    return ["rounds.csv", "summary.csv"]


def cmd_sweep(cfg, out):
    rows, records = harness.run_sweep(cfg)
    harness.write_csv(out / "sweep.csv", harness.SWEEP_FIELDS, rows)
    harness.write_csv(out / "sweep_summary.csv", harness.SWEEP_SUMMARY_FIELDS,
                      harness.sweep_summary_rows(rows))
    _write_timings(out, records)
    return ["sweep.csv", "sweep_summary.csv"]


def cmd_ablation(cfg, out):
    rows, records = harness.run_ablation(cfg)
    harness.write_csv(out / "ablation.csv", harness.ABLATION_FIELDS, rows)
    harness.write_csv(out / "ablation_summary.csv", harness.ABLATION_SUMMARY_FIELDS,
                      harness.ablation_summary_rows(rows))
    return ["ablation.csv", "ablation_summary.csv"]


def cmd_drift(cfg, out):
    harness.write_csv(out / "drift.csv", harness.DRIFT_FIELDS, harness.run_drift_study(cfg))
    return ["drift.csv"]


def cmd_privacy(cfg, out):
    harness.write_csv(out / "privacy.csv", harness.PRIVACY_FIELDS, harness.run_privacy_report(cfg))
    return ["privacy.csv"]


COMMANDS = {
    "compare": (cmd_compare, "all methods on one scenario, every seed"),
    "sweep": (cmd_sweep, "final AUC against the share of adversarial clients"),
    "ablation": (cmd_ablation, "full model against one-component-removed variants"),
    "drift": (cmd_drift, "per-round descriptor entropies and drift"),
    "privacy": (cmd_privacy, "reconstruction risk and information proxies per client"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="topofl", description=__doc__.split("\n\n")[0].strip())
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="flat JSON experiment config")
        p.add_argument("--seed", type=int, help="run this single seed (overrides the config)")
        p.add_argument("--out", type=Path, help="output folder (overrides output_dir)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = {}
    if args.seed is not None:
        overrides.update(seeds=[args.seed], master_seed=args.seed)
    if args.out is not None:
        overrides["output_dir"] = str(args.out)
    try:
        cfg = harness.load_config(args.config, **overrides)
    except ConfigError as exc:
        print(f"topofl: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(cfg.output_dir)
    marker = out / PARTIAL_MARKER
    run, _ = COMMANDS[args.command]
    try:
        out.mkdir(parents=True, exist_ok=True)
        if marker.exists():
            marker.unlink()
        written = run(cfg, out)
    except ConfigError as exc:
        print(f"topofl: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure aborts the run
        try:
            marker.write_text(f"{args.command} failed: {type(exc).__name__}: {exc}\n",
                              encoding="utf-8")
        except OSError:
            pass
        print(f"topofl: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for name in written:
        print(out / name)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
