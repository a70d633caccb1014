"""Command-line entry point: ``jitai <subcommand> ...``.

Exit codes: 0 success, 1 validation or usage error, 2 I/O error.
Diagnostics go to stderr; data goes to files or stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from datetime import date
from pathlib import Path
from typing import Sequence

from . import codec
from .domain import LabelKind, Mechanism, MicroSurveyResponse, Phase, PhaseConfig, TriggerConfig
from .personalize import InsufficientSurveys, PersonalModel, plan_day, train_personal_model, training_history
from .sim import SCENARIOS, CohortSpec, SpecError, read_summary, run_phase, summarize, write_run, write_summary
from .spatial import DEFAULT_EDGE_M, bin_records, export_geojson
from .store import CSV_FILENAMES, Series, StreamKey, TimeSeriesStore, read_csv

logger = logging.getLogger("jitai")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="jitai", description="Heat and noise JITAI decision engine and simulator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("ingest", help="append a JSONL batch to a store directory")
    p.add_argument("jsonl", type=Path)
    p.add_argument("--store", type=Path, default=Path("store"), help="store snapshot directory")

    p = sub.add_parser("simulate", help="run a synthetic cohort through the engine")
    p.add_argument("config", type=Path, help="cohort TOML or JSON file")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--participants", type=int)
    p.add_argument("--weekdays", type=int)
    p.add_argument("--phase", choices=[ph.value for ph in Phase])
    p.add_argument("--weather", help=f"scenario ({', '.join(SCENARIOS)}) or fixture CSV")

    p = sub.add_parser("replay", help="re-run a simulation from a run directory's resolved config")
    p.add_argument("run", type=Path)
    p.add_argument("--out", type=Path, required=True)

    for name, helptext in (("train", "fit a participant's two preference models"),
                           ("plan", "print a participant's personalized plan for a date")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--participant", required=True)
        p.add_argument("--run", type=Path, default=Path("."), help="run or store directory")
        p.add_argument("--seed", type=int, default=0)
        if name == "plan":
            p.add_argument("--date", required=True, type=date.fromisoformat)

    p = sub.add_parser("summarize", help="per-participant message counts of a run")
    p.add_argument("run", type=Path)

    p = sub.add_parser("bin", help="hexagon density of sent messages as GeoJSON")
    p.add_argument("run", type=Path)
    p.add_argument("--hex-edge-m", type=float, default=DEFAULT_EDGE_M)
    p.add_argument("--origin", help="lat,lon of the projection origin (default: centroid)")
    p.add_argument("--mechanism", choices=[m.value for m in Mechanism])

    p = sub.add_parser("export", help="export a store directory to long-format CSV")
    p.add_argument("store", type=Path)
    p.add_argument("--out", type=Path)
    return parser


def _load_trigger_config(data: dict) -> TriggerConfig:
    return TriggerConfig.from_dict(data.get("trigger", {}))


def cmd_simulate(args) -> int:
    spec = CohortSpec.load(args.config)
    raw = _read_config(args.config)
    config = _load_trigger_config(raw)
    overrides = {}
    if args.seed is not None:
        overrides["rng_seed"] = args.seed
    if args.participants is not None:
        overrides["n_participants"] = args.participants
    if args.weekdays is not None:
        overrides["duration_weekdays"] = args.weekdays
    if args.phase is not None:
        overrides["phase"] = Phase(args.phase)
    if args.weather is not None:
        overrides["weather_fixture"] = (
            args.weather if args.weather in SCENARIOS else str(Path(args.weather).resolve())
        )
    spec = replace(spec, **overrides)
    phase = PhaseConfig(phase=spec.phase, **{k: v for k, v in raw.get("phase", {}).items() if k != "phase"})
    result = run_phase(spec, config, phase)
    write_run(result, args.out)
    print(f"{len(result.records)} decisions for {spec.n_participants} participants -> {args.out}")
    return EXIT_OK


def cmd_replay(args) -> int:
    resolved = json.loads((args.run / "config.json").read_text(encoding="utf-8"))
    spec = CohortSpec.from_dict(resolved["cohort"])
    if spec.weather_fixture not in SCENARIOS:
        # the run directory keeps its own copy of the readings it used
        spec = replace(spec, weather_fixture=str((args.run / "inputs" / "weather.csv").resolve()))
    config = TriggerConfig.from_dict(resolved["trigger"])
    phase = PhaseConfig(**resolved["phase"])
    result = run_phase(spec, config, phase)
    write_run(result, args.out)
    print(f"{len(result.records)} decisions for {spec.n_participants} participants -> {args.out}")
    return EXIT_OK


def _read_config(path: Path) -> dict:
    from .sim import tomllib

    text = path.read_text(encoding="utf-8")
    try:
        return json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise SpecError(f"{path}: {exc}") from exc


def load_surveys(directory: Path, participant: str) -> list[MicroSurveyResponse]:
    csv_path = directory / CSV_FILENAMES[Series.SURVEYS]
    if csv_path.exists():
        rows = [r for p, r in read_csv(csv_path) if p == participant]
    elif (directory / f"{Series.SURVEYS.value}.jsonl").exists():
        rows = TimeSeriesStore.load(directory).all(StreamKey.surveys(participant))
    else:
        raise FileNotFoundError(f"no surveys found in {directory}")
    return sorted(rows, key=lambda s: s.ended_at)


def _models(args) -> tuple[list[MicroSurveyResponse], tuple[PersonalModel, PersonalModel]]:
    surveys = load_surveys(args.run, args.participant)
    history = training_history(surveys)
    tz = TriggerConfig().tz
    models = tuple(
        train_personal_model(args.participant, history, kind, seed=args.seed, tz=tz)
        for kind in (LabelKind.THERMAL, LabelKind.NOISE)
    )
    return history, models


def cmd_train(args) -> int:
    _, models = _models(args)
    out_dir = args.run / "models"
    out_dir.mkdir(parents=True, exist_ok=True)
    for model in models:
        path = out_dir / f"{args.participant}.{model.label_kind.value}.json"
        model.save(path)
        print(json.dumps({"model": str(path), "label_kind": model.label_kind.value,
                          "degenerate": model.degenerate, **model.selected_hyperparams}, sort_keys=True))
    return EXIT_OK


def cmd_plan(args) -> int:
    history, (thermal_model, noise_model) = _models(args)
    plan = plan_day(thermal_model, noise_model, history, args.date)
    print(json.dumps({
        "participant": args.participant,
        "date": plan.local_date.isoformat(),
        "entries": [
            {"hour": e.hour, "kind": e.kind.value, "target_label": e.target_label.value,
             "probability": e.probability}
            for e in plan.entries
        ],
    }, indent=2))
    return EXIT_OK


def _notifications(run: Path):
    path = run / CSV_FILENAMES[Series.NOTIFICATIONS]
    return [r for _, r in read_csv(path)]


def cmd_summarize(args) -> int:
    log = _notifications(args.run)
    known = []
    surveys = args.run / CSV_FILENAMES[Series.SURVEYS]
    if (args.run / "summary.csv").exists():
        known = [r.participant for r in read_summary(args.run / "summary.csv")]
    elif surveys.exists():
        known = sorted({p for p, _ in read_csv(surveys)})
    rows = summarize(log, known)
    write_summary(rows, args.run / "summary.csv")
    sys.stdout.write((args.run / "summary.csv").read_text(encoding="utf-8"))
    return EXIT_OK


def cmd_bin(args) -> int:
    if args.hex_edge_m <= 0:
        raise UsageError("--hex-edge-m must be positive")
    log = _notifications(args.run)
    mechanism = Mechanism(args.mechanism) if args.mechanism else None
    if args.origin:
        try:
            lat, lon = (float(v) for v in args.origin.split(","))
        except ValueError as exc:
            raise UsageError("--origin must be LAT,LON") from exc
        origin = (lat, lon)
    else:
        points = [r.event.location for r in log if r.sent and r.event.location]
        if not points:
            origin = (0.0, 0.0)
        else:
            origin = (round(sum(p[0] for p in points) / len(points), 4),
                      round(sum(p[1] for p in points) / len(points), 4))
    result = bin_records(log, origin, args.hex_edge_m, mechanism)
    path = export_geojson(result.cells, origin, args.run / "hexbins.geojson")
    print(json.dumps({"geojson": str(path), "cells": len(result.cells), "located": result.located,
                      "unlocated": result.unlocated, "origin": list(origin),
                      "hex_edge_m": args.hex_edge_m}))
    return EXIT_OK


def cmd_ingest(args) -> int:
    store = TimeSeriesStore.load(args.store) if args.store.exists() else TimeSeriesStore()
    report = store.import_jsonl(args.jsonl)
    store.save(args.store)
    for line, message in report.errors:
        print(f"{args.jsonl}:{line}: {message}", file=sys.stderr)
    print(json.dumps({"appended": report.appended, "errors": len(report.errors)}))
    return EXIT_OK if report.ok else EXIT_INVALID


def cmd_export(args) -> int:
    store = TimeSeriesStore.load(args.store)
    out = args.out or args.store / "export"
    written = store.export_csv(out)
    for series, path in sorted(written.items(), key=lambda kv: kv[0].value):
        print(path)
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "simulate": cmd_simulate,
    "replay": cmd_replay,
    "train": cmd_train,
    "plan": cmd_plan,
    "summarize": cmd_summarize,
    "bin": cmd_bin,
    "export": cmd_export,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"jitai {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (InsufficientSurveys, SpecError, codec.CodecError, ValueError, KeyError) as exc:
        print(f"jitai {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"jitai {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
