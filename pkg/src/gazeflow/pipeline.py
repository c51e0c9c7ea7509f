"""Threaded processing pipeline.

Stages, each on its own thread, joined by bounded channels that block the
producer when full::

    acquisition -> preprocess -> detect -> metrics+dda -> sinks

Only the sink stage talks to the outside world (recorder queue, broadcast
server, user callback); the acquisition stage also hands raw samples to the
recorder, whose enqueue never blocks.
"""

from __future__ import annotations

import dataclasses
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from .core import (
    EventKind,
    GazeEvent,
    GazeSample,
    PupilReading,
    StreamBreak,
    VelocitySample,
    validate_sample,
)
from .dda import DdaController, DdaPolicy
from .events import BlinkDetector, DetectorParams, EventSegmenter
from .metrics import MetricsParams, WindowedMetrics, fixation_aoi
from .preprocess import MedianFilter, PreprocessParams, VelocityAnnotator
from .recorder import Recorder, RecorderConfig, RecorderStats

log = logging.getLogger(__name__)

LATENCY_BUCKETS_MS = (1, 2, 5, 10, 20, 50, 100, 200, 500, 1000)


# --------------------------------------------------------------------------
# sample conditioning (blink removal, velocity, despiking)

@dataclass
class ConditionerCounts:
    """Where every input sample went.

    ``valid`` samples reached velocity annotation; ``invalid`` ones had no
    usable direction; ``gapped`` ones had a direction but fell inside an
    eye closure.
    """

    samples_in: int = 0
    samples_valid: int = 0
    samples_invalid: int = 0
    samples_gapped: int = 0


class SampleConditioner:
    """Raw samples in; despiked VelocitySamples and StreamBreaks out.

    Output items are ``(item, arrival)`` pairs where ``arrival`` is the
    wall-clock time the underlying sample entered the pipeline.
    """

    def __init__(self, pre: PreprocessParams = PreprocessParams(),
                 det: DetectorParams = DetectorParams()):
        self.det = det
        self.blinks = BlinkDetector(det, pre.max_gap_s)
        self.annotator = VelocityAnnotator(pre)
        self.median = MedianFilter(pre.median_window)
        self.counts = ConditionerCounts()
        self._arrivals: Dict[int, Optional[float]] = {}

    def _timed(self, items: List[VelocitySample]) -> List[Tuple[Any, Optional[float]]]:
        return [(vs, self._arrivals.pop(vs.timestamp, None)) for vs in items]

    def _break(self, mark: StreamBreak, out: list) -> None:
        out.extend(self._timed(self.median.flush()))
        out.append((mark, mark.revealed_at))

    def push(self, sample: GazeSample, arrival: Optional[float] = None) -> list:
        c = self.counts
        c.samples_in += 1
        out: list = []
        closed, marks = self.blinks.push(sample, arrival)
        for m in marks:
            self.annotator.break_run()
            self._break(m, out)
        if closed:
            if validate_sample(sample).direction_ok:
                c.samples_gapped += 1
            else:
                c.samples_invalid += 1
            return out
        c.samples_valid += 1
        self._arrivals[sample.timestamp] = arrival
        for it in self.annotator.push(sample, arrival):
            if isinstance(it, StreamBreak):
                self._break(it, out)
            else:
                out.extend(self._timed(self.median.push(it)))
        return out

    def finish(self) -> list:
        out: list = []
        for m in self.blinks.finish():
            self._break(m, out)
        out.extend(self._timed(self.median.flush()))
        return out


def detect_events(samples: Iterable[GazeSample], pre: PreprocessParams = PreprocessParams(),
                  det: DetectorParams = DetectorParams()) -> List[GazeEvent]:
    """Batch event detection with exactly the pipeline's processing chain."""
    cond = SampleConditioner(pre, det)
    seg = EventSegmenter(det)
    events: List[GazeEvent] = []
    for s in samples:
        for item, _ in cond.push(s):
            events.extend(seg.push(item))
    for item, _ in cond.finish():
        events.extend(seg.push(item))
    events.extend(seg.finish())
    return events


# --------------------------------------------------------------------------
# channels

class ChannelAborted(Exception):
    pass


class Channel:
    """Bounded multi-item queue; producers block while it is full."""

    def __init__(self, capacity: int, name: str = ""):
        if capacity <= 0:
            raise ValueError("queue capacity must be positive")
        self.capacity = capacity
        self.name = name
        self._q: deque = deque()
        self._cond = threading.Condition()
        self._closed = False
        self._aborted = False
        self.max_depth = 0
        self.total = 0

    def __len__(self) -> int:
        return len(self._q)

    def put_many(self, items: List[Any]) -> None:
        i = 0
        with self._cond:
            while i < len(items):
                while len(self._q) >= self.capacity and not self._aborted:
                    self._cond.wait()
                if self._aborted:
                    raise ChannelAborted(self.name)
                room = self.capacity - len(self._q)
                chunk = items[i:i + room]
                self._q.extend(chunk)
                i += len(chunk)
                self.total += len(chunk)
                if len(self._q) > self.max_depth:
                    self.max_depth = len(self._q)
                self._cond.notify_all()

    def put(self, item: Any) -> None:
        self.put_many([item])

    def get_batch(self, max_items: int = 512) -> List[Any]:
        """Block for at least one item; [] means closed and drained."""
        with self._cond:
            while not self._q and not self._closed and not self._aborted:
                self._cond.wait()
            if self._aborted:
                raise ChannelAborted(self.name)
            n = min(max_items, len(self._q))
            batch = [self._q.popleft() for _ in range(n)]
            self._cond.notify_all()
            return batch

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def abort(self) -> None:
        with self._cond:
            self._aborted = True
            self._cond.notify_all()


# --------------------------------------------------------------------------
# configuration and statistics

@dataclass
class PipelineConfig:
    preprocess: PreprocessParams = field(default_factory=PreprocessParams)
    detector: DetectorParams = field(default_factory=DetectorParams)
    metrics: MetricsParams = field(default_factory=MetricsParams)
    dda: DdaPolicy = field(default_factory=DdaPolicy)
    recorder: Optional[RecorderConfig] = None
    queue_capacity: int = 1024
    backpressure: str = "block_upstream"

    def __post_init__(self):
        if self.queue_capacity <= 0:
            raise ValueError("queue_capacity must be positive")
        if self.backpressure != "block_upstream":
            raise ValueError(f"unsupported backpressure policy {self.backpressure!r}")


STAGES = ("acquisition", "preprocess", "detect", "metrics", "sinks")
LINKS = ("acquisition->preprocess", "preprocess->detect", "detect->metrics", "metrics->sinks")


@dataclass
class PipelineStats:
    samples_in: int = 0
    samples_valid: int = 0
    samples_invalid: int = 0
    samples_gapped: int = 0
    source_rejected: int = 0
    parse_errors: int = 0
    events: Dict[str, int] = field(default_factory=lambda: {k.value: 0 for k in EventKind})
    event_samples: int = 0
    snapshots: int = 0
    decisions: int = 0
    processed: Dict[str, int] = field(default_factory=lambda: dict.fromkeys(STAGES, 0))
    max_queue_depth: Dict[str, int] = field(default_factory=lambda: dict.fromkeys(LINKS, 0))
    latency_ms: Dict[str, List[float]] = field(default_factory=lambda: {k.value: [] for k in EventKind})
    callback_errors: int = 0
    recorder: Optional[RecorderStats] = None
    elapsed_s: float = 0.0
    error: Optional[str] = None

    def latency_histogram(self, kind: str) -> Dict[str, int]:
        """Counts per upper bucket edge in ms (``"inf"`` for the rest)."""
        vals = np.asarray(self.latency_ms.get(kind, []), dtype=float)
        edges = np.array(LATENCY_BUCKETS_MS + (np.inf,))
        idx = np.searchsorted(edges, vals, side="left")
        counts = np.bincount(idx, minlength=len(edges))
        labels = [str(e) for e in LATENCY_BUCKETS_MS] + ["inf"]
        return dict(zip(labels, (int(c) for c in counts)))

    def latency_percentile(self, kind: str, q: float) -> Optional[float]:
        vals = self.latency_ms.get(kind, [])
        return float(np.percentile(vals, q)) if vals else None

    @property
    def drops(self) -> Dict[str, int]:
        r = self.recorder
        return {"recorder_samples": r.samples_dropped if r else 0,
                "recorder_other": r.other_dropped if r else 0,
                "source_rejected": self.source_rejected,
                "parse_errors": self.parse_errors}

    def to_dict(self) -> dict:
        lat = {}
        for k, vals in self.latency_ms.items():
            if vals:
                lat[k] = {"count": len(vals), "p50": self.latency_percentile(k, 50),
                          "p99": self.latency_percentile(k, 99), "max": max(vals),
                          "histogram": self.latency_histogram(k)}
        return {
            "samples_in": self.samples_in, "samples_valid": self.samples_valid,
            "samples_invalid": self.samples_invalid, "samples_gapped": self.samples_gapped,
            "source_rejected": self.source_rejected, "parse_errors": self.parse_errors,
            "events": dict(self.events), "event_samples": self.event_samples,
            "snapshots": self.snapshots, "decisions": self.decisions,
            "processed": dict(self.processed), "max_queue_depth": dict(self.max_queue_depth),
            "latency_ms": lat, "drops": self.drops, "callback_errors": self.callback_errors,
            "recorder": self.recorder.to_dict() if self.recorder else None,
            "elapsed_s": self.elapsed_s, "error": self.error,
        }


class PipelineError(RuntimeError):
    pass


def _event_samples(ev: GazeEvent) -> int:
    if ev.kind in (EventKind.FIXATION, EventKind.SACCADE):
        return ev.stats.sample_count
    return 0


# --------------------------------------------------------------------------
# the running pipeline

Callback = Callable[[str, Any], None]


class PipelineHandle:
    """A running pipeline. :meth:`stop` drains in-flight data; :meth:`join`
    waits and returns the final stats (raising if a stage failed)."""

    def __init__(self, source, config: PipelineConfig, recorder: Optional[Recorder],
                 server, callback: Optional[Callback], own_recorder: bool):
        self.source = source
        self.config = config
        self.recorder = recorder
        self.server = server
        self.callback = callback
        self._own_recorder = own_recorder
        cap = config.queue_capacity
        self._links = [Channel(cap, name) for name in LINKS]
        self._stats = PipelineStats()
        self._stop = threading.Event()
        self._errors: List[BaseException] = []
        self._err_lock = threading.Lock()
        self._final: Optional[PipelineStats] = None
        self._join_lock = threading.Lock()
        self._t0 = time.perf_counter()
        self._threads = [
            threading.Thread(target=self._guard, args=(name, fn), name=f"gaze-{name}", daemon=True)
            for name, fn in zip(STAGES, (self._acquire, self._preprocess, self._detect,
                                         self._metrics, self._sinks))
        ]
        for t in self._threads:
            t.start()

    # -- control -----------------------------------------------------------

    def stop(self) -> None:
        """Stop acquiring; everything already acquired is still processed."""
        self._stop.set()
        close = getattr(self.source, "close", None)
        if close is not None:
            close()

    def join(self, timeout: Optional[float] = None) -> PipelineStats:
        deadline = None if timeout is None else time.monotonic() + timeout
        for t in self._threads:
            t.join(None if deadline is None else max(0.0, deadline - time.monotonic()))
            if t.is_alive():
                raise TimeoutError(f"pipeline stage {t.name} still running")
        with self._join_lock:
            if self._final is None:
                self._finalize()
        if self._errors:
            raise PipelineError(f"pipeline stage failed: {self._errors[0]!r}") from self._errors[0]
        return self._final

    @property
    def running(self) -> bool:
        return any(t.is_alive() for t in self._threads)

    @property
    def queued(self) -> int:
        """Items currently sitting in inter-stage links."""
        return sum(len(ch) for ch in self._links)

    def _finalize(self) -> None:
        st = self._stats
        st.elapsed_s = time.perf_counter() - self._t0
        for name, ch in zip(LINKS, self._links):
            st.max_queue_depth[name] = ch.max_depth
        st.source_rejected = getattr(self.source, "rejected", 0)
        st.parse_errors = getattr(self.source, "parse_errors", 0)
        if self.recorder is not None:
            st.recorder = self.recorder.close() if self._own_recorder else self.recorder.stats
        if self._errors:
            st.error = repr(self._errors[0])
        self._final = st

    def _guard(self, name: str, fn) -> None:
        try:
            fn()
        except ChannelAborted:
            pass
        except BaseException as exc:  # noqa: BLE001 - surfaced on join
            log.exception("pipeline stage %s failed", name)
            with self._err_lock:
                self._errors.append(exc)
            self._stop.set()
            close = getattr(self.source, "close", None)
            if close is not None:
                close()
            for ch in self._links:
                ch.abort()

    # -- stages ------------------------------------------------------------

    def _acquire(self) -> None:
        out = self._links[0]
        rec = self.recorder
        n = 0
        try:
            for s in self.source:
                if self._stop.is_set():
                    break
                arrival = time.perf_counter()
                if rec is not None:
                    rec.record_raw(s)
                out.put((s, arrival))
                n += 1
                self._stats.processed["acquisition"] = n
        finally:
            self._stats.samples_in = n
            out.close()

    def _preprocess(self) -> None:
        inp, out = self._links[0], self._links[1]
        cond = SampleConditioner(self.config.preprocess, self.config.detector)
        n = 0
        while True:
            batch = inp.get_batch()
            if not batch:
                break
            items: list = []
            for s, arrival in batch:
                items.append((PupilReading(s.timestamp, s.pupil_mm), None))
                items.extend(cond.push(s, arrival))
            n += len(batch)
            self._stats.processed["preprocess"] = n
            out.put_many(items)
        out.put_many(cond.finish())
        c = cond.counts
        st = self._stats
        st.samples_valid, st.samples_invalid, st.samples_gapped = (
            c.samples_valid, c.samples_invalid, c.samples_gapped)
        out.close()

    def _detect(self) -> None:
        inp, out = self._links[1], self._links[2]
        seg = EventSegmenter(self.config.detector)
        aois = self.config.metrics.aois
        n = 0

        def annotate(timed) -> list:
            res = []
            for ev, revealed in timed:
                if ev.kind is EventKind.FIXATION and aois:
                    hit = fixation_aoi(ev, aois)
                    if hit is not None:
                        ev = dataclasses.replace(ev, stats=dataclasses.replace(ev.stats, aoi=hit))
                res.append(("event", ev, revealed))
            return res

        while True:
            batch = inp.get_batch()
            if not batch:
                break
            items: list = []
            for item, arrival in batch:
                if isinstance(item, PupilReading):
                    items.append(("pupil", item, None))
                else:
                    items.extend(annotate(seg.push_timed(item, arrival)))
            items.append(("watermark", seg.watermark, None))
            n += len(batch)
            self._stats.processed["detect"] = n
            out.put_many(items)
        out.put_many(annotate(seg.finish_timed()))
        out.close()

    def _metrics(self) -> None:
        inp, out = self._links[2], self._links[3]
        wm = WindowedMetrics(self.config.metrics)
        dda = DdaController(self.config.dda)
        n = 0

        def snaps(snapshots) -> list:
            res = []
            for snap in snapshots:
                res.append(("metrics", snap, None))
                res.append(("decision", dda.step(snap), None))
            return res

        while True:
            batch = inp.get_batch()
            if not batch:
                break
            items: list = []
            for kind, obj, revealed in batch:
                if kind == "pupil":
                    wm.observe_pupil(obj)
                elif kind == "event":
                    wm.observe_event(obj)
                    items.append((kind, obj, revealed))
                else:
                    items.extend(snaps(wm.advance(obj)))
            n += len(batch)
            self._stats.processed["metrics"] = n
            if items:
                out.put_many(items)
        out.put_many(snaps(wm.finish()))
        out.close()

    def _sinks(self) -> None:
        inp = self._links[3]
        st = self._stats
        rec, server, cb = self.recorder, self.server, self.callback
        n = 0
        while True:
            batch = inp.get_batch()
            if not batch:
                break
            for kind, obj, revealed in batch:
                if kind == "event":
                    st.events[obj.kind.value] += 1
                    st.event_samples += _event_samples(obj)
                    if rec is not None:
                        rec.record_event(obj)
                elif kind == "metrics":
                    st.snapshots += 1
                    if rec is not None:
                        rec.record_snapshot(obj)
                else:
                    st.decisions += 1
                    if rec is not None:
                        rec.record_decision(obj)
                if server is not None:
                    server.broadcast(kind, obj.to_dict())
                if cb is not None:
                    try:
                        cb(kind, obj)
                    except Exception:  # noqa: BLE001 - a bad callback must not stop the session
                        st.callback_errors += 1
                        log.exception("pipeline callback failed")
                if kind == "event" and revealed is not None:
                    st.latency_ms[obj.kind.value].append((time.perf_counter() - revealed) * 1e3)
            n += len(batch)
            st.processed["sinks"] = n


def run(source, config: PipelineConfig = PipelineConfig(), *, recorder: Optional[Recorder] = None,
        server=None, callback: Optional[Callback] = None) -> PipelineHandle:
    """Start all stages on ``source``.

    If no recorder is given but ``config.recorder`` is set, one is created
    and closed when the pipeline is joined.
    """
    own = False
    if recorder is None and config.recorder is not None:
        recorder = Recorder(config.recorder)
        own = True
    return PipelineHandle(source, config, recorder, server, callback, own)


def run_to_completion(source, config: PipelineConfig = PipelineConfig(), **sinks) -> PipelineStats:
    return run(source, config, **sinks).join()
