"""Velocity-threshold identification (I-VT) and blink detection.

The segmenter consumes a velocity-annotated, despiked stream and turns it
into Fixation and Saccade events. Run-level cleanup happens in this order:

1. saccades shorter than ``min_saccade_s`` are demoted into the
   surrounding fixation;
2. fixation / saccade / fixation triples are merged into one fixation when
   the saccade lasts at most ``max_merge_gap_s`` and the two fixations lie
   less than ``merge_max_angle_deg`` apart. The check is made once: as soon
   as the second fixation starts if they are clearly apart (twice the
   angle), otherwise when it closes or reaches ``min_fixation_s``. A saccade
   cut off by a break or the end of the stream is tested against its own
   last sample instead;
3. fixations shorter than ``min_fixation_s`` are absorbed into the
   neighbouring saccade(s), or dropped if there is none.

Events are emitted as soon as none of these rules can still change them.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

from .core import (
    BlinkStats,
    EventKind,
    FixationStats,
    GapStats,
    GazeEvent,
    GazeSample,
    SaccadeStats,
    StreamBreak,
    VelocitySample,
    angle_deg,
    normalize,
    s_to_us,
    validate_sample,
)


class Phase(enum.Enum):
    SACCADE = "saccade"
    FIXATION = "fixation"
    INTERMEDIATE = "intermediate"


class ThresholdMode(str, enum.Enum):
    SINGLE = "single"
    DUAL = "dual"


@dataclass(frozen=True)
class DetectorParams:
    """I-VT and blink detection settings.

    In ``single`` mode only ``saccade_threshold_deg_s`` is used. ``dual``
    mode classifies the band between the two thresholds as Intermediate,
    which continues the current phase.
    """

    saccade_threshold_deg_s: float = 100.0
    fixation_threshold_deg_s: float = 100.0
    mode: ThresholdMode = ThresholdMode.SINGLE
    min_fixation_s: float = 0.060
    min_saccade_s: float = 0.010
    max_merge_gap_s: float = 0.075
    merge_max_angle_deg: float = 1.0
    blink_min_s: float = 0.070
    blink_max_s: float = 0.500
    openness_closed_threshold: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "mode", ThresholdMode(self.mode))
        if not self.fixation_threshold_deg_s > 0:
            raise ValueError("fixation threshold must be positive")
        if self.saccade_threshold_deg_s < self.fixation_threshold_deg_s:
            raise ValueError("saccade threshold must be >= fixation threshold")
        if not (self.min_fixation_s > 0 and self.min_saccade_s > 0 and self.max_merge_gap_s > 0):
            raise ValueError("minimum durations must be positive")
        if not 0 < self.blink_min_s < self.blink_max_s:
            raise ValueError("need 0 < blink_min_s < blink_max_s")

    @classmethod
    def dual(cls, saccade: float = 250.0, fixation: float = 3.0, **kw) -> "DetectorParams":
        return cls(saccade_threshold_deg_s=saccade, fixation_threshold_deg_s=fixation,
                   mode=ThresholdMode.DUAL, **kw)


def classify_velocity(v: float, params: DetectorParams) -> Phase:
    if params.mode is ThresholdMode.SINGLE:
        return Phase.SACCADE if v > params.saccade_threshold_deg_s else Phase.FIXATION
    if v > params.saccade_threshold_deg_s:
        return Phase.SACCADE
    if v < params.fixation_threshold_deg_s:
        return Phase.FIXATION
    return Phase.INTERMEDIATE


# --------------------------------------------------------------------------
# blinks

def is_closed(sample: GazeSample, params: DetectorParams) -> bool:
    """Eye closed or direction lost (flag cleared or malformed vector)."""
    if not validate_sample(sample).direction_ok:
        return True
    o = sample.openness
    return o is not None and o < params.openness_closed_threshold


class BlinkDetector:
    """Track closures in the raw stream and classify them on reopening.

    A closure lasting within ``[blink_min_s, blink_max_s]`` is a Blink;
    longer is a Gap; shorter is sensor flicker and produces nothing unless
    the hole since the last open sample exceeds ``max_gap_s``.

    :meth:`push` returns StreamBreak markers. A bare break is issued as soon
    as the closure is certain to produce an event, so downstream runs can be
    closed without waiting for the eye to reopen.
    """

    def __init__(self, params: DetectorParams = DetectorParams(),
                 max_gap_s: Optional[float] = None):
        self.params = params
        self.blink_min_us = s_to_us(params.blink_min_s)
        self.blink_max_us = s_to_us(params.blink_max_s)
        self.max_gap_us = s_to_us(max_gap_s) if max_gap_s is not None else None
        self._start: Optional[int] = None
        self._count = 0
        self._arrival: Optional[float] = None
        self._broke = False
        self._last_open: Optional[int] = None
        self._last_ts: Optional[int] = None
        self._last_dt: Optional[int] = None

    def _hole_exceeded(self, ts: int) -> bool:
        return (self.max_gap_us is not None and self._last_open is not None
                and ts - self._last_open > self.max_gap_us)

    def push(self, sample: GazeSample, arrival: Optional[float] = None) -> Tuple[bool, List[StreamBreak]]:
        ts = sample.timestamp
        if self._last_ts is not None:
            self._last_dt = ts - self._last_ts
        self._last_ts = ts
        out: List[StreamBreak] = []
        if is_closed(sample, self.params):
            if self._start is None:
                self._start = ts
                if self._hole_exceeded(ts):
                    self._start = self._last_open
                self._count = 0
                self._arrival = arrival
                self._broke = False
            self._count += 1
            if not self._broke and (ts - self._start >= self.blink_min_us or self._hole_exceeded(ts)):
                self._broke = True
                out.append(StreamBreak(None, self._arrival))
            return True, out
        if self._start is not None:
            ev = self._classify(ts)
            if ev is not None:
                out.append(StreamBreak(ev, self._arrival))
            self._start = None
        self._last_open = ts
        return False, out

    def _classify(self, end: int) -> Optional[GazeEvent]:
        start = self._start
        d = end - start
        if self.blink_min_us <= d <= self.blink_max_us:
            return GazeEvent(EventKind.BLINK, start, end, BlinkStats(d / 1e6))
        if d > self.blink_max_us or self._hole_exceeded(end):
            return GazeEvent(EventKind.GAP, start, end, GapStats(self._count))
        return None

    def finish(self) -> List[StreamBreak]:
        """Close a closure still pending at end of stream."""
        if self._start is None:
            return []
        end = self._last_ts + (self._last_dt or 1)
        ev = self._classify(end)
        self._start = None
        return [StreamBreak(ev, self._arrival)] if ev is not None else []


def detect_blinks(samples: Iterable[GazeSample], params: DetectorParams = DetectorParams(),
                  max_gap_s: Optional[float] = None) -> List[GazeEvent]:
    """Blink and closure-Gap events found in a raw sample stream."""
    det = BlinkDetector(params, max_gap_s)
    events = []
    for s in samples:
        _, marks = det.push(s)
        events.extend(m.event for m in marks if m.event is not None)
    events.extend(m.event for m in det.finish() if m.event is not None)
    return events


# --------------------------------------------------------------------------
# segmentation

class _Run:
    __slots__ = ("phase", "samples", "start", "revealed", "merge_checked", "pred_direction")

    def __init__(self, phase: EventKind, first: VelocitySample, start: int, pred_direction):
        self.phase = phase
        self.samples: List[VelocitySample] = [first]
        self.start = start
        self.revealed: Optional[float] = None
        self.merge_checked = False
        self.pred_direction = pred_direction

    @property
    def end(self) -> int:
        return self.samples[-1].timestamp

    @property
    def duration_us(self) -> int:
        return self.end - self.start

    def centroid(self):
        sx = sy = sz = 0.0
        for vs in self.samples:
            d = vs.sample.gaze_direction
            sx += d[0]
            sy += d[1]
            sz += d[2]
        return normalize((sx, sy, sz))

    def absorb(self, later: "_Run", phase: EventKind) -> "_Run":
        self.samples.extend(later.samples)
        self.revealed = later.revealed
        self.phase = phase
        return self


def _fixation_event(run: _Run) -> GazeEvent:
    c = run.centroid()
    n = len(run.samples)
    ox = oy = oz = 0.0
    sq = 0.0
    pupils = []
    for vs in run.samples:
        s = vs.sample
        o = s.gaze_origin
        ox += o[0]
        oy += o[1]
        oz += o[2]
        a = angle_deg(c, s.gaze_direction)
        sq += a * a
        p = s.pupil_mm
        if p is not None:
            pupils.append(p)
    stats = FixationStats(
        centroid_direction=c,
        centroid_origin=(ox / n, oy / n, oz / n),
        dispersion_deg=math.sqrt(sq / n),
        mean_pupil_mm=sum(pupils) / len(pupils) if pupils else None,
        sample_count=n,
    )
    return GazeEvent(EventKind.FIXATION, run.start, run.end, stats)


def _saccade_event(run: _Run) -> GazeEvent:
    vels = [vs.velocity_deg_per_s for vs in run.samples]
    first = run.pred_direction or run.samples[0].sample.gaze_direction
    stats = SaccadeStats(
        peak_velocity_deg_s=max(vels),
        mean_velocity_deg_s=sum(vels) / len(vels),
        amplitude_deg=angle_deg(first, run.samples[-1].sample.gaze_direction),
        sample_count=len(vels),
    )
    return GazeEvent(EventKind.SACCADE, run.start, run.end, stats)


TimedEvent = Tuple[GazeEvent, Optional[float]]


class EventSegmenter:
    """Stateful single-stream I-VT segmenter.

    Feed VelocitySamples and StreamBreaks with :meth:`push`, then call
    :meth:`finish`. Runs start at the predecessor of their first sample, so
    consecutive events share boundaries and never overlap.
    """

    FIX = EventKind.FIXATION
    SAC = EventKind.SACCADE

    def __init__(self, params: DetectorParams = DetectorParams()):
        self.params = params
        self.min_fix_us = s_to_us(params.min_fixation_s)
        self.min_sac_us = s_to_us(params.min_saccade_s)
        self.merge_gap_us = s_to_us(params.max_merge_gap_s)
        self._held: List[_Run] = []
        self._open: Optional[_Run] = None
        self._phase: Optional[EventKind] = None
        self._last_ts: Optional[int] = None

    @property
    def watermark(self) -> Optional[int]:
        """Every event starting before this timestamp has been emitted."""
        if self._held:
            return self._held[0].start
        if self._open is not None:
            return self._open.start
        return self._last_ts

    def push(self, item, arrival: Optional[float] = None) -> List[GazeEvent]:
        return [ev for ev, _ in self.push_timed(item, arrival)]

    def finish(self) -> List[GazeEvent]:
        return [ev for ev, _ in self.finish_timed()]

    def push_timed(self, item, arrival: Optional[float] = None) -> List[TimedEvent]:
        out: List[TimedEvent] = []
        if isinstance(item, StreamBreak):
            self._close_open(item.revealed_at)
            self._resolve(out, final=True)
            self._phase = None
            if item.event is not None:
                out.append((item.event, item.revealed_at))
                if self._last_ts is None or item.event.end > self._last_ts:
                    self._last_ts = item.event.end
            return out

        vs: VelocitySample = item
        self._last_ts = vs.timestamp
        ph = classify_velocity(vs.velocity_deg_per_s, self.params)
        if ph is Phase.SACCADE:
            kind = self.SAC
        elif ph is Phase.FIXATION:
            kind = self.FIX
        else:
            kind = self._phase or self.FIX
        self._phase = kind

        run = self._open
        if run is not None and run.phase is kind:
            run.samples.append(vs)
        else:
            pred = None
            if run is not None:
                pred = run.samples[-1].sample.gaze_direction
                self._close_open(arrival)
            start = vs.prev_timestamp
            if start is None:
                start = vs.timestamp
            self._open = _Run(kind, vs, start, pred)
        if self._held:
            self._resolve(out, final=False)
        return out

    def finish_timed(self) -> List[TimedEvent]:
        out: List[TimedEvent] = []
        self._close_open(None)
        self._resolve(out, final=True)
        self._phase = None
        return out

    # -- internals ---------------------------------------------------------

    def _close_open(self, revealed: Optional[float]) -> None:
        if self._open is not None:
            self._open.revealed = revealed
            self._held.append(self._open)
            self._open = None

    def _next(self, i: int) -> Optional[_Run]:
        if i + 1 < len(self._held):
            return self._held[i + 1]
        return self._open

    def _replace(self, lo: int, hi: int, run: _Run, is_open: bool) -> None:
        """Replace held[lo:hi] (and the open run if ``is_open``) by ``run``."""
        if is_open:
            del self._held[lo:]
            self._open = run
        else:
            self._held[lo:hi] = [run]

    def _combine(self, i: int, phase: EventKind) -> None:
        """Fuse held[i] with its neighbours into one run of ``phase``."""
        held = self._held
        lo = i - 1 if i > 0 else i
        base = held[lo]
        nxt = self._next(i)
        is_open = nxt is self._open and nxt is not None
        merge_checked = base.merge_checked if phase is self.SAC and lo < i else False
        for r in held[lo + 1:i + 1]:
            base.absorb(r, phase)
        hi = i + 1
        if nxt is not None:
            base.absorb(nxt, phase)
            if not is_open:
                hi = i + 2
        base.phase = phase
        base.merge_checked = merge_checked
        self._replace(lo, hi, base, is_open)

    def _resolve(self, out: List[TimedEvent], final: bool) -> None:
        while self._step(out, final):
            pass

    def _step(self, out: List[TimedEvent], final: bool) -> bool:
        held = self._held
        if not held:
            return False
        FIX, SAC = self.FIX, self.SAC

        # 1. demote short saccades
        for i, r in enumerate(held):
            if r.phase is SAC and r.duration_us < self.min_sac_us:
                self._combine(i, FIX)
                return True

        # 2. merge check for F S F, made once the answer is clear
        limit = self.params.merge_max_angle_deg
        for i, r in enumerate(held):
            if r.phase is not SAC or r.merge_checked:
                continue
            nxt = self._next(i)
            if nxt is None and not final:
                continue
            if i == 0 or r.duration_us > self.merge_gap_us:
                r.merge_checked = True
                continue
            # with no following fixation the landing point is the last sample
            landing = nxt.centroid() if nxt is not None else r.samples[-1].sample.gaze_direction
            sep = angle_deg(held[i - 1].centroid(), landing)
            conclusive = (final or nxt is not self._open or sep >= 2 * limit
                          or nxt.duration_us >= self.min_fix_us)
            if not conclusive:
                continue
            r.merge_checked = True
            if sep < limit:
                self._combine(i, FIX)
                return True

        # 3. short fixations
        for i, r in enumerate(held):
            if r.phase is not FIX or r.duration_us >= self.min_fix_us:
                continue
            if not self._fixation_settled(i, final):
                continue
            prev_sac = i > 0
            nxt = self._next(i)
            if prev_sac or nxt is not None:
                if prev_sac:
                    self._combine(i, SAC)
                else:
                    is_open = nxt is self._open
                    r.absorb(nxt, SAC)
                    r.merge_checked = False
                    self._replace(i, i + 2, r, is_open)
            else:
                del held[i]
            return True

        # 4. emit the head if final
        head = held[0]
        if head.phase is FIX:
            if head.duration_us >= self.min_fix_us and self._fixation_settled(0, final):
                held.pop(0)
                out.append((_fixation_event(head), head.revealed))
                return True
        else:
            nxt = self._next(0)
            ready = final if nxt is None else nxt.duration_us >= self.min_fix_us
            if ready:
                held.pop(0)
                out.append((_saccade_event(head), head.revealed))
                return True
        return False

    def _fixation_settled(self, i: int, final: bool) -> bool:
        """True once fixation held[i] can no longer merge with a later one."""
        nxt = self._next(i)
        if nxt is None:
            return final
        if nxt is self._open:
            return nxt.duration_us > self.merge_gap_us
        return nxt.merge_checked


def segment_events(stream: Iterable, params: DetectorParams = DetectorParams()) -> List[GazeEvent]:
    """Batch helper: run a velocity stream through a fresh segmenter."""
    seg = EventSegmenter(params)
    events: List[GazeEvent] = []
    for item in stream:
        events.extend(seg.push(item))
    events.extend(seg.finish())
    return events


def check_event_stream(events: Sequence[GazeEvent]) -> None:
    """Raise AssertionError unless events are time-ordered and non-overlapping."""
    for a, b in zip(events, events[1:]):
        if b.start < a.end:
            raise AssertionError(f"overlapping events: {a} / {b}")
    for e in events:
        if e.end <= e.start:
            raise AssertionError(f"empty event {e}")
