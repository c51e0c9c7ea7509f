"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 input error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

from .config import load_config
from .core import AreaOfInterest, EventKind, PupilReading
from .ingest import Pacing, SyntheticScenario, SyntheticSource, listen_stream, replay_file, synthesize
from .metrics import MetricsParams, MetricsSnapshot, window_metrics_from_readings
from .pipeline import PipelineConfig, PipelineError, run
from .recorder import (
    METRICS_FILE,
    RAW_FILE,
    Recorder,
    RecorderConfig,
    read_events_jsonl,
    write_jsonl,
    write_raw_csv,
)
from .server import BroadcastServer, ServerConfig

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2, 3

LABELS_FILE = "labels.jsonl"
STATS_FILE = "stats.json"
SNAPSHOT_CSV = "metrics.csv"

log = logging.getLogger("gazeflow")


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load_pipeline_config(path: Optional[str]):
    if path is None:
        _err("no config file given; using defaults")
        return PipelineConfig(), ServerConfig()
    try:
        return load_config(path)
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def _write_stats(out: Path, stats: dict) -> None:
    with open(out / STATS_FILE, "w", encoding="utf-8") as f:
        json.dump(stats, f, indent=2, sort_keys=True)
        f.write("\n")


# -- simulate -----------------------------------------------------------------

def cmd_simulate(args) -> int:
    try:
        scenario = SyntheticScenario.load(args.scenario)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"bad scenario {args.scenario}: {exc}") from exc
    if args.seed is not None:
        scenario = dataclasses.replace(scenario, rng_seed=args.seed)
    samples, labels = synthesize(scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = write_raw_csv(out / RAW_FILE, samples)
    write_jsonl(out / LABELS_FILE, [lab.to_dict() for lab in labels])
    counts = {k.value: 0 for k in EventKind}
    for lab in labels:
        counts[lab.kind.value] += 1
    print(f"samples: {n}")
    print("labels: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


# -- replay -------------------------------------------------------------------

def cmd_replay(args) -> int:
    cfg, _ = _load_pipeline_config(args.config)
    out = Path(args.out)
    try:
        source = replay_file(args.input, Pacing.REALTIME if args.realtime else Pacing.MAX_SPEED)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    rec_cfg = dataclasses.replace(cfg.recorder or RecorderConfig(), output_dir=str(out))
    try:
        recorder = Recorder(rec_cfg)
    except OSError as exc:
        raise InputError(f"cannot write to {out}: {exc}") from exc
    handle = run(source, cfg, recorder=recorder)
    try:
        stats = handle.join()
    except PipelineError as exc:
        recorder.close()
        _err(str(exc))
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        handle.stop()
        stats = handle.join()
    stats.recorder = recorder.close()
    _write_stats(out, stats.to_dict())
    if source.parse_errors:
        _err(f"{source.parse_errors} malformed rows skipped")
        for line, msg in source.errors[:10]:
            _err(f"  line {line}: {msg}")
    if source.rejected:
        _err(f"{source.rejected} rows rejected for non-increasing timestamps")
    ev = ", ".join(f"{k}={v}" for k, v in stats.events.items())
    print(f"samples: {stats.samples_in} (valid {stats.samples_valid}, invalid "
          f"{stats.samples_invalid}, gapped {stats.samples_gapped})")
    print(f"events: {ev}")
    print(f"snapshots: {stats.snapshots}, decisions: {stats.decisions}")
    if stats.recorder and stats.recorder.error:
        _err(f"recorder failed: {stats.recorder.error}")
        return EXIT_RUNTIME
    return EXIT_OK


# -- analyze ------------------------------------------------------------------

def _load_aois(path: Optional[str]):
    if path is None:
        return (), {}
    try:
        with open(path, encoding="utf-8") as f:
            d = json.load(f)
        if isinstance(d, list):
            d = {"aois": d}
        aois = tuple(AreaOfInterest.from_dict(a) for a in d.get("aois", []))
        onsets = {str(k): int(v) for k, v in d.get("onsets_us", {}).items()}
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"bad AOI file {path}: {exc}") from exc
    return aois, onsets


SUMMARY_FIELDS = ("mean_fixation_duration_s", "fixation_count", "mean_saccade_velocity_deg_s",
                  "peak_saccade_velocity_deg_s", "blink_rate_per_min", "pupil_dilation_index")


def _snapshot_row(s: MetricsSnapshot, aoi_ids: Sequence[str]) -> List:
    d = s.to_dict()
    row = [d["window_start_us"], d["window_end_us"]] + [d[k] for k in SUMMARY_FIELDS]
    row += [d["saccade_count"], d["blink_count"]]
    for a in aoi_ids:
        row += [d["dwell_time_s"][a], d["ttff_s"][a]]
    return ["" if v is None else v for v in row]


def cmd_analyze(args) -> int:
    try:
        events = read_events_jsonl(args.events)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"bad event log {args.events}: {exc}") from exc
    aois, onsets = _load_aois(args.aoi)
    try:
        params = MetricsParams(window_s=args.window, step_s=args.step, aois=aois,
                               stimulus_onsets_us=onsets)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    known = {a.id for a in aois}
    unknown = sorted({e.stats.aoi for e in events
                      if e.kind is EventKind.FIXATION and e.stats.aoi and e.stats.aoi not in known})
    if unknown:
        _err(f"warning: events reference unknown AOI ids: {', '.join(unknown)}")

    if args.samples:
        try:
            source = replay_file(args.samples)
            readings = [PupilReading(s.timestamp, s.pupil_mm) for s in source]
        except (OSError, ValueError) as exc:
            raise InputError(f"bad sample file {args.samples}: {exc}") from exc
    elif events:
        readings = [PupilReading(events[0].start, None), PupilReading(events[-1].end, None)]
    else:
        readings = []
    snaps = window_metrics_from_readings(events, readings, params)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / METRICS_FILE, snaps)
    ids = [a.id for a in aois]
    with open(out / SNAPSHOT_CSV, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        header = ["window_start_us", "window_end_us", *SUMMARY_FIELDS, "saccade_count", "blink_count"]
        for a in ids:
            header += [f"dwell_time_s[{a}]", f"ttff_s[{a}]"]
        w.writerow(header)
        for s in snaps:
            w.writerow(_snapshot_row(s, ids))

    print(f"events: {len(events)}, windows: {len(snaps)}")
    for k in SUMMARY_FIELDS:
        vals = [getattr(s, k) for s in snaps if getattr(s, k) is not None]
        mean = sum(vals) / len(vals) if vals else None
        print(f"  {k}: {'n/a' if mean is None else format(mean, '.4g')}")
    return EXIT_OK


# -- serve --------------------------------------------------------------------

def _open_source(spec: str, realtime: bool):
    kind, _, arg = spec.partition(":")
    pacing = Pacing.REALTIME if realtime else Pacing.MAX_SPEED
    try:
        if kind == "replay":
            return replay_file(arg, pacing)
        if kind == "synthetic":
            samples, _ = synthesize(SyntheticScenario.load(arg))
            return SyntheticSource(samples, pacing=pacing)
        if kind == "listen":
            return listen_stream(arg, pacing)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"bad source {spec!r}: {exc}") from exc
    raise UsageError(f"unknown source kind {kind!r} (use replay:, synthetic: or listen:)")


def cmd_serve(args) -> int:
    cfg, server_cfg = _load_pipeline_config(args.config)
    server_cfg = dataclasses.replace(server_cfg, bind_address=args.bind)
    try:
        server = BroadcastServer(server_cfg)
    except OSError as exc:
        _err(f"cannot bind {args.bind}: {exc}")
        return EXIT_RUNTIME
    try:
        source = _open_source(args.source, not args.max_speed)
    except Exception:
        server.close()
        raise
    host, port = server.address[:2]
    print(f"serving on {host}:{port}", flush=True)
    if args.wait_clients:
        server.wait_for_clients(args.wait_clients, timeout=args.wait_timeout)
    recorder = None
    if args.out:
        rec_cfg = dataclasses.replace(cfg.recorder or RecorderConfig(), output_dir=args.out)
        recorder = Recorder(rec_cfg)
    handle = run(source, cfg, recorder=recorder, server=server)
    code = EXIT_OK
    try:
        while handle.running:
            time.sleep(0.05)
    except KeyboardInterrupt:
        handle.stop()
    try:
        stats = handle.join()
    except PipelineError as exc:
        _err(str(exc))
        code = EXIT_RUNTIME
        stats = None
    if recorder is not None:
        rstats = recorder.close()
        if stats is not None:
            stats.recorder = rstats
    if stats is not None:
        payload = stats.to_dict()
        payload["server"] = server.stats.to_dict()
        server.broadcast("stats", payload)
        if args.out:
            _write_stats(Path(args.out), payload)
    server.close()
    return code


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gazeflow", description="Real-time gaze event engine")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a synthetic recording with labels")
    s.add_argument("scenario")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("replay", help="run the pipeline over a raw CSV recording")
    r.add_argument("input")
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.add_argument("--realtime", action="store_true")
    r.set_defaults(func=cmd_replay)

    a = sub.add_parser("analyze", help="windowed metrics from an event log")
    a.add_argument("events")
    a.add_argument("--aoi")
    a.add_argument("--samples", help="raw CSV for pupil data and exact session extent")
    a.add_argument("--window", type=float, default=10.0)
    a.add_argument("--step", type=float, default=1.0)
    a.add_argument("--out", default="analysis")
    a.set_defaults(func=cmd_analyze)

    v = sub.add_parser("serve", help="run live and broadcast over TCP")
    v.add_argument("--bind", default="127.0.0.1:7878")
    v.add_argument("--source", required=True, help="replay:FILE, synthetic:SCENARIO or listen:HOST:PORT")
    v.add_argument("--config")
    v.add_argument("--out")
    v.add_argument("--max-speed", action="store_true", help="do not pace file sources")
    v.add_argument("--wait-clients", type=int, default=0)
    v.add_argument("--wait-timeout", type=float, default=10.0)
    v.set_defaults(func=cmd_serve)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        _err(str(exc))
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        _err(str(exc))
        return EXIT_USAGE
    except InputError as exc:
        _err(str(exc))
        return EXIT_INPUT
    except OSError as exc:
        _err(f"I/O failure: {exc}")
        return EXIT_RUNTIME
    except PipelineError as exc:
        _err(str(exc))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
