"""Command-line entry point.

Subcommands:
  run            boot the full desk-scale loop for one scenario
  compare-modes  run the same seeded scenario under processing modes 1/2/3
  train          fit the defect-risk model from a labeled dataset
  deploy         upload a model file to a running gateway
  export         pull the labeled dataset from the cloud sink
  report         recompute the report from a run's artifacts

Exit codes: 0 ok, 2 invalid configuration, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path

import requests

from . import phase1, quality, report as report_mod, sim
from .errors import DsmError
from .orchestrate import run_live
from .wires.graph import GraphValidationError, load_graph

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _load_scenario(args) -> sim.ScenarioConfig:
    if args.scenario:
        config = sim.load_scenario(args.scenario)
    else:
        config = sim.ScenarioConfig()
    if getattr(args, "seed", None) is not None:
        config = sim.ScenarioConfig.from_doc({**config.to_doc(), "seed": args.seed})
    if getattr(args, "duration", None) is not None:
        config = sim.ScenarioConfig.from_doc({**config.to_doc(), "duration_s": args.duration})
    return config


def cmd_run(args) -> int:
    try:
        config = _load_scenario(args)
        graph_doc = None
        if args.graph:
            graph_doc = json.loads(Path(args.graph).read_text())
            load_graph(json.dumps(graph_doc))  # validate before booting anything
    except GraphValidationError as exc:
        print("invalid graph:", file=sys.stderr)
        for violation in exc.violations:
            print(f"  {violation}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, DsmError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = Path(args.out)
    try:
        artifacts = asyncio.run(
            run_live(
                config,
                out_dir,
                graph_doc=graph_doc,
                model_path=args.model,
                mode_override=args.mode,
                auto_apply=args.auto_apply,
                sink_url=args.sink,
            )
        )
    except DsmError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    run_report = report_mod.write_report(out_dir)
    print(report_mod.render_report(run_report))
    print(f"artifacts in {out_dir}")
    return EXIT_OK


def cmd_compare_modes(args) -> int:
    try:
        config = _load_scenario(args)
    except (OSError, ValueError, DsmError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(args.out)
    reports = {}
    for mode in (1, 2, 3):
        mode_dir = out_dir / f"mode{mode}"
        try:
            asyncio.run(run_live(config, mode_dir, mode_override=mode, sink_url=args.sink))
        except DsmError as exc:
            print(f"mode {mode} run failed: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        reports[str(mode)] = report_mod.write_report(mode_dir)
    comparison = {
        "scenario": config.to_doc(),
        "per_mode": {
            mode: {
                "totals": r["totals"],
                "energy": {
                    "cpu_units": sum(n["cpu_units"] for n in r["per_node"].values()),
                    "radio_units": sum(n["radio_units"] for n in r["per_node"].values()),
                },
                "gateway_records": r["gateway"]["records_processed"],
            }
            for mode, r in reports.items()
        },
    }
    (out_dir / "comparison.json").write_text(json.dumps(comparison, indent=2, sort_keys=True) + "\n")
    print(report_mod.render_mode_comparison(reports))
    return EXIT_OK


def _read_dataset(path) -> list:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            records.append(
                quality.SessionRecord(
                    features=dict(doc["features"]),
                    label=int(doc["label"]),
                    session_id=str(doc["session_id"]),
                    t_us=int(doc["t_us"]),
                )
            )
    return records


def _rectangularize(records) -> list:
    """Keep only feature names present in every row (warn about the rest)."""
    if not records:
        return records
    common = set(records[0].features)
    for r in records:
        common &= set(r.features)
    dropped = set().union(*(set(r.features) for r in records)) - common
    if dropped:
        log.warning("dropping non-universal features: %s", ", ".join(sorted(dropped)))
    return [
        quality.SessionRecord(
            features={k: r.features[k] for k in common},
            label=r.label,
            session_id=r.session_id,
            t_us=r.t_us,
        )
        for r in records
    ]


def cmd_train(args) -> int:
    try:
        if args.dataset:
            records = _read_dataset(args.dataset)
        else:
            configs = phase1.training_campaign(args.generate_sessions, base_seed=args.seed or 100)
            records = phase1.build_training_records(configs)
        records = _rectangularize(records)
        train_sessions, holdout_sessions = quality.split_sessions(r.session_id for r in records)
        train_records = [r for r in records if r.session_id in train_sessions]
        holdout_records = [r for r in records if r.session_id in holdout_sessions]
        model, trace = quality.fit_quality_model(
            train_records,
            lr=args.lr,
            l2=args.l2,
            epochs=args.epochs,
            threshold=args.threshold,
            version=args.version,
        )
    except (OSError, ValueError, KeyError) as exc:
        print(f"invalid dataset: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except quality.SingleClass as exc:
        print(f"training failed: single-class dataset ({exc})", file=sys.stderr)
        return EXIT_CONFIG
    except DsmError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    quality.save_model(model, args.out)
    print(f"trained on {len(train_records)} rows from {len(train_sessions)} sessions")
    print(f"final loss {trace[-1]:.6f} (epoch 0: {trace[0]:.6f})")
    if holdout_records:
        y = [r.label for r in holdout_records]
        scores = [quality.predict_risk(model, r.features) for r in holdout_records]
        auc = quality.auc_score(y, scores)
        accuracy = sum(int((s >= model.threshold) == bool(l)) for s, l in zip(scores, y)) / len(y)
        print(f"held-out sessions {len(holdout_sessions)}: AUC {auc:.4f}  accuracy {accuracy:.4f}")
    weights = sorted(zip(model.feature_names, model.w), key=lambda nv: -abs(nv[1]))
    print("weights (standardized):")
    for name, w in weights:
        print(f"  {w:+.4f}  {name}")
    print(f"model written to {args.out}")
    return EXIT_OK


def cmd_deploy(args) -> int:
    try:
        doc = quality.model_to_doc(quality.load_model(args.model))
    except quality.InvalidModelFile as exc:
        print(f"invalid model file: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    url = args.gateway.rstrip("/") + "/v1/model"
    try:
        response = requests.post(url, json=doc, timeout=10)
    except requests.RequestException as exc:
        print(f"gateway unreachable: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    body = response.json()
    if response.status_code != 200 or not body.get("ok"):
        print(f"deploy rejected: {body.get('error', response.status_code)}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"active model version: {body['active_version']}")
    return EXIT_OK


def cmd_export(args) -> int:
    url = args.sink.rstrip("/") + "/v1/export"
    if args.session:
        url += f"?session={args.session}"
    try:
        response = requests.get(url, timeout=30)
    except requests.RequestException as exc:
        print(f"sink unreachable: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if response.status_code == 404:
        print("no sessions matched", file=sys.stderr)
        return EXIT_RUNTIME
    rows = response.json()["records"]
    with open(args.out, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False, separators=(",", ":")) + "\n")
    print(f"exported {len(rows)} labeled records to {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        run_report = report_mod.write_report(args.out)
    except (OSError, ValueError, KeyError) as exc:
        print(f"cannot build report from {args.out}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(report_mod.render_report(run_report))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scenario through the full stack")
    p.add_argument("--scenario", help="scenario config JSON (default: built-in scenario)")
    p.add_argument("--graph", help="gateway graph JSON (default: generated)")
    p.add_argument("--model", help="model file to score with on the edge")
    p.add_argument("--seed", type=int)
    p.add_argument("--duration", type=int, help="override duration_s")
    p.add_argument("--mode", type=int, choices=(1, 2, 3), help="force a processing mode")
    p.add_argument("--out", default="out/run", help="artifact directory")
    p.add_argument("--sink", help="external cloud-sink URL (default: embedded sink)")
    p.add_argument("--auto-apply", action="store_true", help="auto-apply recommendations")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare-modes", help="same seeded scenario under modes 1, 2, 3")
    p.add_argument("--scenario")
    p.add_argument("--seed", type=int)
    p.add_argument("--duration", type=int)
    p.add_argument("--out", default="out/compare")
    p.add_argument("--sink")
    p.set_defaults(func=cmd_compare_modes)

    p = sub.add_parser("train", help="train the defect-risk model")
    p.add_argument("--dataset", help="labeled dataset NDJSON (from export)")
    p.add_argument("--generate-sessions", type=int, default=20,
                   help="without --dataset: number of training sessions to simulate")
    p.add_argument("--seed", type=int, help="base seed for generated sessions")
    p.add_argument("--lr", type=float, default=quality.DEFAULT_LR)
    p.add_argument("--l2", type=float, default=quality.DEFAULT_L2)
    p.add_argument("--epochs", type=int, default=quality.DEFAULT_EPOCHS)
    p.add_argument("--threshold", type=float, default=quality.DEFAULT_THRESHOLD)
    p.add_argument("--version", default="v1")
    p.add_argument("--out", default="model.json")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("deploy", help="upload a model to a running gateway")
    p.add_argument("--model", required=True)
    p.add_argument("--gateway", required=True, help="gateway admin URL, e.g. http://127.0.0.1:8081")
    p.set_defaults(func=cmd_deploy)

    p = sub.add_parser("export", help="download the labeled dataset from the sink")
    p.add_argument("--sink", required=True, help="sink URL, e.g. http://127.0.0.1:8080")
    p.add_argument("--session", help="restrict to one session id")
    p.add_argument("--out", default="dataset.ndjson")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("report", help="recompute the report from run artifacts")
    p.add_argument("--out", required=True, help="run artifact directory")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
