"""Buffered off-thread persistence of samples, events, snapshots, decisions.

Raw samples go to ``raw.csv``; everything else is JSON-lines. Producers
never touch the disk: they append to a bounded in-memory queue which one
writer thread drains. When the queue is full the oldest entry is dropped
and counted.
"""

from __future__ import annotations

import json
import logging
import threading
from collections import deque
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional

from .core import GazeEvent, GazeSample, Validity

log = logging.getLogger(__name__)

RAW_HEADER = ("timestamp_us,dir_x,dir_y,dir_z,origin_x_mm,origin_y_mm,origin_z_mm,"
              "pupil_l_mm,pupil_r_mm,openness_l,openness_r,validity")
RAW_FIELDS = RAW_HEADER.split(",")

RAW_FILE = "raw.csv"
EVENTS_FILE = "events.jsonl"
METRICS_FILE = "metrics.jsonl"
DECISIONS_FILE = "decisions.jsonl"


def _f(x: Optional[float]) -> str:
    return "" if x is None else format(x, ".9g")


def quantize(x: float) -> float:
    """Value as it will read back from the raw CSV (9 significant digits)."""
    return float(format(x, ".9g"))


def format_raw_row(s: GazeSample) -> str:
    d, o = s.gaze_direction, s.gaze_origin
    return ",".join((
        str(s.timestamp), _f(d[0]), _f(d[1]), _f(d[2]), _f(o[0]), _f(o[1]), _f(o[2]),
        _f(s.pupil_diameter_left), _f(s.pupil_diameter_right),
        _f(s.eye_openness_left), _f(s.eye_openness_right), str(int(s.validity)),
    ))


def _opt(tok: str) -> Optional[float]:
    return float(tok) if tok else None


def parse_raw_row(line: str) -> GazeSample:
    """Parse one raw CSV row; raises ValueError on anything malformed."""
    parts = line.rstrip("\r\n").split(",")
    if len(parts) != len(RAW_FIELDS):
        raise ValueError(f"expected {len(RAW_FIELDS)} fields, got {len(parts)}")
    validity = int(parts[11])
    if not 0 <= validity <= int(Validity.ALL):
        raise ValueError(f"validity bitmask out of range: {validity}")
    return GazeSample(
        timestamp=int(parts[0]),
        gaze_direction=(float(parts[1]), float(parts[2]), float(parts[3])),
        gaze_origin=(float(parts[4]), float(parts[5]), float(parts[6])),
        pupil_diameter_left=_opt(parts[7]),
        pupil_diameter_right=_opt(parts[8]),
        eye_openness_left=_opt(parts[9]),
        eye_openness_right=_opt(parts[10]),
        validity=Validity(validity),
    )


def dumps_line(obj: dict) -> str:
    return json.dumps(obj, separators=(",", ":"))


def write_raw_csv(path, samples) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(RAW_HEADER + "\n")
        for s in samples:
            f.write(format_raw_row(s) + "\n")
            n += 1
    return n


def write_jsonl(path, items) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for it in items:
            f.write(dumps_line(it if isinstance(it, dict) else it.to_dict()) + "\n")
            n += 1
    return n


def read_events_jsonl(path) -> List[GazeEvent]:
    events = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                events.append(GazeEvent.from_dict(json.loads(line)))
    return events


class RecorderClosed(RuntimeError):
    pass


@dataclass
class RecorderConfig:
    output_dir: str = "session"
    raw_buffer_capacity: int = 65536
    flush_interval_s: float = 1.0
    overflow_policy: str = "drop_oldest_and_count"

    def __post_init__(self):
        if self.raw_buffer_capacity <= 0:
            raise ValueError("raw_buffer_capacity must be positive")
        if not self.flush_interval_s > 0:
            raise ValueError("flush_interval_s must be positive")
        if self.overflow_policy != "drop_oldest_and_count":
            raise ValueError(f"unsupported overflow policy {self.overflow_policy!r}")


@dataclass
class RecorderStats:
    samples_enqueued: int = 0
    samples_written: int = 0
    samples_dropped: int = 0
    events_written: int = 0
    snapshots_written: int = 0
    decisions_written: int = 0
    other_dropped: int = 0
    flushes: int = 0
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)


_RAW, _EVENT, _SNAPSHOT, _DECISION = range(4)


class Recorder:
    """Bounded queue + single writer thread.

    ``autostart=False`` leaves the writer stopped until :meth:`start`, which
    is how tests simulate a stalled writer.
    """

    def __init__(self, config: RecorderConfig = RecorderConfig(), autostart: bool = True):
        self.config = config
        self._dir = Path(config.output_dir)
        self._dir.mkdir(parents=True, exist_ok=True)
        self._q: deque = deque()
        self._cond = threading.Condition()
        self._half = max(1, config.raw_buffer_capacity // 2)
        self._stats = RecorderStats()
        self._closing = False
        self._closed = False
        self._failed = False
        self._final: Optional[RecorderStats] = None
        self._files = {
            _RAW: open(self._dir / RAW_FILE, "w", encoding="utf-8", newline=""),
            _EVENT: open(self._dir / EVENTS_FILE, "w", encoding="utf-8"),
            _SNAPSHOT: open(self._dir / METRICS_FILE, "w", encoding="utf-8"),
            _DECISION: open(self._dir / DECISIONS_FILE, "w", encoding="utf-8"),
        }
        self._files[_RAW].write(RAW_HEADER + "\n")
        self._files[_RAW].flush()
        self._thread = threading.Thread(target=self._run, name="recorder-writer", daemon=True)
        self._started = False
        if autostart:
            self.start()

    @property
    def output_dir(self) -> Path:
        return self._dir

    def start(self) -> None:
        if not self._started:
            self._started = True
            self._thread.start()

    @property
    def stats(self) -> RecorderStats:
        with self._cond:
            return RecorderStats(**asdict(self._stats))

    # -- producer side -----------------------------------------------------

    def _enqueue(self, kind: int, item) -> None:
        with self._cond:
            if self._closing:
                raise RecorderClosed("recorder is closed")
            q = self._q
            q.append((kind, item))
            if kind == _RAW:
                self._stats.samples_enqueued += 1
            if len(q) > self.config.raw_buffer_capacity:
                old, _ = q.popleft()
                if old == _RAW:
                    self._stats.samples_dropped += 1
                else:
                    self._stats.other_dropped += 1
            if len(q) == self._half:
                self._cond.notify()

    def record_raw(self, sample: GazeSample) -> None:
        self._enqueue(_RAW, sample)

    def record_event(self, event: GazeEvent) -> None:
        self._enqueue(_EVENT, event)

    def record_snapshot(self, snapshot) -> None:
        self._enqueue(_SNAPSHOT, snapshot)

    def record_decision(self, decision) -> None:
        self._enqueue(_DECISION, decision)

    # -- writer side -------------------------------------------------------

    def _run(self) -> None:
        interval = self.config.flush_interval_s
        while True:
            with self._cond:
                if not self._closing and len(self._q) < self._half:
                    self._cond.wait(timeout=interval)
                batch, self._q = self._q, deque()
                closing = self._closing
            if batch:
                self._write(batch)
            if self._failed:
                return
            if closing:
                with self._cond:
                    if not self._q:
                        return

    def _write(self, batch) -> None:
        lines = {_RAW: [], _EVENT: [], _SNAPSHOT: [], _DECISION: []}
        for kind, item in batch:
            if kind == _RAW:
                lines[kind].append(format_raw_row(item))
            else:
                lines[kind].append(dumps_line(item.to_dict()))
        try:
            for kind, rows in lines.items():
                if rows:
                    f = self._files[kind]
                    f.write("\n".join(rows) + "\n")
                    f.flush()
        except (OSError, ValueError) as exc:
            log.error("recorder write failed: %s", exc)
            with self._cond:
                self._failed = True
                self._stats.error = str(exc)
                self._stats.samples_dropped += len(lines[_RAW])
                self._stats.other_dropped += sum(len(lines[k]) for k in (_EVENT, _SNAPSHOT, _DECISION))
            return
        with self._cond:
            s = self._stats
            s.samples_written += len(lines[_RAW])
            s.events_written += len(lines[_EVENT])
            s.snapshots_written += len(lines[_SNAPSHOT])
            s.decisions_written += len(lines[_DECISION])
            s.flushes += 1

    def close(self) -> RecorderStats:
        """Flush everything queued, close files and return final stats.

        Calling close twice returns the same stats.
        """
        with self._cond:
            if self._final is not None:
                return self._final
            self._closing = True
            self._cond.notify()
        if not self._started:
            self.start()
        self._thread.join()
        with self._cond:
            # anything left after a writer failure is lost
            for kind, _ in self._q:
                if kind == _RAW:
                    self._stats.samples_dropped += 1
                else:
                    self._stats.other_dropped += 1
            self._q.clear()
        for f in self._files.values():
            try:
                f.close()
            except OSError as exc:
                self._stats.error = self._stats.error or str(exc)
        self._closed = True
        self._final = self.stats
        return self._final

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
