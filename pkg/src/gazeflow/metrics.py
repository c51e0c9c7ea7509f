"""Rolling engagement metrics, AOI hit-testing, dwell time and TTFF.

Windows are half-open ``[end - window, end)`` intervals whose ends sit at
``first_sample + window + k * step``. A snapshot is produced for every end
up to the last sample timestamp. Events that straddle a window edge are
clipped to it; blinks count toward the window they start in.

:class:`WindowedMetrics` is the incremental form used by the pipeline. It
produces exactly the snapshots :func:`compute_window_metrics` computes from
the complete log, because it only closes a window once the event watermark
has passed its end.
"""

from __future__ import annotations

import math
import statistics
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .core import (
    AreaOfInterest,
    EventKind,
    GazeEvent,
    GazeSample,
    PupilReading,
    Sphere,
    Vec3,
    cross,
    dot,
    s_to_us,
    sub,
)

_EPS = 1e-12


@dataclass(frozen=True)
class PupilBaseline:
    baseline_mm: float
    computed_over: Tuple[int, int]

    def __post_init__(self):
        if not self.baseline_mm > 0:
            raise ValueError("baseline must be positive")


@dataclass(frozen=True)
class MetricsSnapshot:
    window: Tuple[int, int]
    mean_fixation_duration_s: Optional[float]
    fixation_count: int
    saccade_count: int
    mean_saccade_velocity_deg_s: Optional[float]
    peak_saccade_velocity_deg_s: Optional[float]
    blink_count: int
    blink_rate_per_min: float
    pupil_dilation_index: Optional[float]
    dwell_time_s: Dict[str, float] = field(default_factory=dict)
    ttff_s: Dict[str, Optional[float]] = field(default_factory=dict)

    @property
    def end(self) -> int:
        return self.window[1]

    def to_dict(self) -> dict:
        return {
            "window_start_us": self.window[0],
            "window_end_us": self.window[1],
            "mean_fixation_duration_s": self.mean_fixation_duration_s,
            "fixation_count": self.fixation_count,
            "saccade_count": self.saccade_count,
            "mean_saccade_velocity_deg_s": self.mean_saccade_velocity_deg_s,
            "peak_saccade_velocity_deg_s": self.peak_saccade_velocity_deg_s,
            "blink_count": self.blink_count,
            "blink_rate_per_min": self.blink_rate_per_min,
            "pupil_dilation_index": self.pupil_dilation_index,
            "dwell_time_s": dict(self.dwell_time_s),
            "ttff_s": dict(self.ttff_s),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsSnapshot":
        return cls(
            window=(int(d["window_start_us"]), int(d["window_end_us"])),
            mean_fixation_duration_s=d.get("mean_fixation_duration_s"),
            fixation_count=int(d.get("fixation_count", 0)),
            saccade_count=int(d.get("saccade_count", 0)),
            mean_saccade_velocity_deg_s=d.get("mean_saccade_velocity_deg_s"),
            peak_saccade_velocity_deg_s=d.get("peak_saccade_velocity_deg_s"),
            blink_count=int(d.get("blink_count", 0)),
            blink_rate_per_min=float(d.get("blink_rate_per_min", 0.0)),
            pupil_dilation_index=d.get("pupil_dilation_index"),
            dwell_time_s=dict(d.get("dwell_time_s", {})),
            ttff_s=dict(d.get("ttff_s", {})),
        )


@dataclass
class MetricsParams:
    """Window geometry plus the AOIs to attribute fixations to.

    ``stimulus_onsets_us`` maps AOI ids to the time their stimulus appeared;
    AOIs without an entry count from the first sample.
    """

    window_s: float = 10.0
    step_s: float = 1.0
    baseline_s: float = 5.0
    aois: Tuple[AreaOfInterest, ...] = ()
    stimulus_onsets_us: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.aois = tuple(self.aois)
        if not self.step_s > 0:
            raise ValueError("step_s must be positive")
        if self.window_s < self.step_s:
            raise ValueError("window_s must be >= step_s")
        if not self.baseline_s > 0:
            raise ValueError("baseline_s must be positive")
        ids = [a.id for a in self.aois]
        if len(set(ids)) != len(ids):
            raise ValueError("AOI ids must be unique")


# -- pupil baseline ---------------------------------------------------------

def pupil_baseline(samples: Iterable[GazeSample], duration_s: float = 5.0,
                   start_us: Optional[int] = None) -> PupilBaseline:
    """Median per-sample pupil diameter over ``[start, start + duration)``.

    ``start`` defaults to the first sample's timestamp.
    """
    readings = [PupilReading(s.timestamp, s.pupil_mm) for s in samples]
    return _baseline_from_readings(readings, duration_s, start_us)


def _baseline_from_readings(readings: Sequence[PupilReading], duration_s: float,
                            start_us: Optional[int]) -> PupilBaseline:
    if start_us is None:
        if not readings:
            raise ValueError("no samples for a pupil baseline")
        start_us = readings[0].timestamp
    end_us = start_us + s_to_us(duration_s)
    vals = [r.pupil_mm for r in readings
            if r.pupil_mm is not None and start_us <= r.timestamp < end_us]
    if not vals:
        raise ValueError("no pupil-valid samples in the baseline interval")
    return PupilBaseline(statistics.median(vals), (start_us, end_us))


# -- AOI geometry -----------------------------------------------------------

def _ray_sphere(origin: Vec3, direction: Vec3, shape: Sphere) -> Optional[float]:
    oc = sub(origin, shape.center)
    b = dot(oc, direction)
    c = dot(oc, oc) - shape.radius * shape.radius
    disc = b * b - c
    if disc < 0:
        return None
    root = math.sqrt(disc)
    for t in (-b - root, -b + root):
        if t > 0:
            return t
    return None


def _ray_polygon(origin: Vec3, direction: Vec3, shape) -> Optional[float]:
    n = shape.normal
    denom = dot(n, direction)
    if abs(denom) < _EPS:
        return None
    v0 = shape.vertices[0]
    t = dot(sub(v0, origin), n) / denom
    if not t > 0:
        return None
    p = (origin[0] + t * direction[0], origin[1] + t * direction[1], origin[2] + t * direction[2])
    verts = shape.vertices
    sign = 0.0
    for i, a in enumerate(verts):
        b = verts[(i + 1) % len(verts)]
        s = dot(cross(sub(b, a), sub(p, a)), n)
        if abs(s) < _EPS:
            continue
        if sign == 0.0:
            sign = s
        elif (s > 0) != (sign > 0):
            return None
    return t


def aoi_hit_test(origin: Vec3, direction: Vec3,
                 aois: Sequence[AreaOfInterest]) -> Optional[str]:
    """Id of the nearest AOI hit by the ray, or None."""
    best_t, best = math.inf, None
    for aoi in aois:
        if isinstance(aoi.shape, Sphere):
            t = _ray_sphere(origin, direction, aoi.shape)
        else:
            t = _ray_polygon(origin, direction, aoi.shape)
        if t is not None and t < best_t:
            best_t, best = t, aoi.id
    return best


def fixation_aoi(event: GazeEvent, aois: Sequence[AreaOfInterest]) -> Optional[str]:
    """AOI hit by a fixation's centroid ray (None for other kinds)."""
    if event.kind is not EventKind.FIXATION or not aois:
        return None
    st = event.stats
    return aoi_hit_test(st.centroid_origin, st.centroid_direction, aois)


# -- per-AOI measures ---------------------------------------------------------

def _clip(event: GazeEvent, start: int, end: int) -> int:
    return max(0, min(event.end, end) - max(event.start, start))


def _ttff_us(tagged: Iterable[Tuple[GazeEvent, Optional[str]]], aoi_id: str,
             onset: int, until: Optional[int] = None) -> Optional[int]:
    for ev, hit in tagged:
        if hit != aoi_id or ev.end <= onset:
            continue
        if until is not None and ev.start >= until:
            return None
        return max(0, ev.start - onset)
    return None


def time_to_first_fixation(events: Sequence[GazeEvent], aoi_id: str, stimulus_onset: int,
                           aois: Sequence[AreaOfInterest]) -> Optional[float]:
    """Seconds from onset to the first fixation on ``aoi_id``.

    A fixation already under way at onset counts, with TTFF 0.
    """
    tagged = ((ev, fixation_aoi(ev, aois)) for ev in events)
    t = _ttff_us(tagged, aoi_id, stimulus_onset)
    return None if t is None else t / 1e6


def dwell_time(events: Sequence[GazeEvent], aoi_id: str, window: Tuple[int, int],
               aois: Sequence[AreaOfInterest]) -> float:
    """Seconds of fixation on ``aoi_id`` inside ``window`` (clipped)."""
    start, end = window
    total = sum(_clip(ev, start, end) for ev in events
                if fixation_aoi(ev, aois) == aoi_id)
    return total / 1e6


# -- windowed snapshot ------------------------------------------------------

def _mean(vals: List[float]) -> Optional[float]:
    return math.fsum(vals) / len(vals) if vals else None


def snapshot(window: Tuple[int, int], tagged: Sequence[Tuple[GazeEvent, Optional[str]]],
             pupils: Sequence[float], baseline: Optional[PupilBaseline],
             aoi_ids: Sequence[str], onsets: Mapping[str, int]) -> MetricsSnapshot:
    """Metrics for one window.

    ``tagged`` holds (event, aoi id) pairs in time order and may include
    events outside the window; ``pupils`` holds the pupil readings that fall
    inside it.
    """
    start, end = window
    inside = [(ev, hit) for ev, hit in tagged if ev.start < end and ev.end > start]
    fix_durs, sac_mean, sac_peak = [], [], []
    blinks = 0
    dwell = {a: 0 for a in aoi_ids}
    for ev, hit in inside:
        if ev.kind is EventKind.FIXATION:
            d = _clip(ev, start, end)
            fix_durs.append(d / 1e6)
            if hit in dwell:
                dwell[hit] += d
        elif ev.kind is EventKind.SACCADE:
            sac_mean.append(ev.stats.mean_velocity_deg_s)
            sac_peak.append(ev.stats.peak_velocity_deg_s)
        elif ev.kind is EventKind.BLINK and ev.start >= start:
            blinks += 1
    ttff = {}
    for a in aoi_ids:
        onset = max(onsets.get(a, start), start)
        if onset >= end:
            ttff[a] = None
            continue
        t = _ttff_us(inside, a, onset, until=end)
        ttff[a] = None if t is None else t / 1e6
    pupil_index = None
    if pupils and baseline is not None:
        pupil_index = (math.fsum(pupils) / len(pupils)) / baseline.baseline_mm
    window_s = (end - start) / 1e6
    return MetricsSnapshot(
        window=(start, end),
        mean_fixation_duration_s=_mean(fix_durs),
        fixation_count=len(fix_durs),
        saccade_count=len(sac_mean),
        mean_saccade_velocity_deg_s=_mean(sac_mean),
        peak_saccade_velocity_deg_s=max(sac_peak) if sac_peak else None,
        blink_count=blinks,
        blink_rate_per_min=blinks * (60.0 / window_s),
        pupil_dilation_index=pupil_index,
        dwell_time_s={a: us / 1e6 for a, us in dwell.items()},
        ttff_s=ttff,
    )


def _window_ends(first: int, last: int, window_us: int, step_us: int) -> Iterable[int]:
    t = first + window_us
    while t <= last:
        yield t
        t += step_us


def compute_window_metrics(events: Sequence[GazeEvent], samples: Sequence[GazeSample],
                           params: MetricsParams = MetricsParams(),
                           baseline: Optional[PupilBaseline] = None) -> List[MetricsSnapshot]:
    """Batch computation over a complete session.

    ``baseline`` defaults to :func:`pupil_baseline` over the session start
    (absent if no pupil data is available there).
    """
    readings = [PupilReading(s.timestamp, s.pupil_mm) for s in samples]
    return window_metrics_from_readings(events, readings, params, baseline)


def window_metrics_from_readings(events: Sequence[GazeEvent], readings: Sequence[PupilReading],
                                 params: MetricsParams = MetricsParams(),
                                 baseline: Optional[PupilBaseline] = None) -> List[MetricsSnapshot]:
    """Same as :func:`compute_window_metrics`, from per-sample pupil readings."""
    if not readings:
        return []
    if baseline is None:
        try:
            baseline = _baseline_from_readings(readings, params.baseline_s, None)
        except ValueError:
            baseline = None
    aoi_ids = [a.id for a in params.aois]
    tagged = [(ev, fixation_aoi(ev, params.aois)) for ev in events]
    first, last = readings[0].timestamp, readings[-1].timestamp
    out = []
    w, st = s_to_us(params.window_s), s_to_us(params.step_s)
    onsets = _onsets(params, first)
    for end in _window_ends(first, last, w, st):
        start = end - w
        pupils = [r.pupil_mm for r in readings
                  if r.pupil_mm is not None and start <= r.timestamp < end]
        out.append(snapshot((start, end), tagged, pupils, baseline, aoi_ids, onsets))
    return out


def _onsets(params: MetricsParams, first: int) -> Dict[str, int]:
    return {a.id: params.stimulus_onsets_us.get(a.id, first) for a in params.aois}


class WindowedMetrics:
    """Incremental snapshots, released once the event watermark allows.

    Feed every sample's :class:`PupilReading` (pupil may be None) in order,
    every event as it is emitted, and the detector watermark; snapshots come
    back from :meth:`advance` and :meth:`finish`.
    """

    def __init__(self, params: MetricsParams = MetricsParams()):
        self.params = params
        self.window_us = s_to_us(params.window_s)
        self.step_us = s_to_us(params.step_s)
        self.baseline_us = s_to_us(params.baseline_s)
        self.aoi_ids = [a.id for a in params.aois]
        self.baseline: Optional[PupilBaseline] = None
        self._baseline_vals: Optional[List[float]] = []
        self._first: Optional[int] = None
        self._last: Optional[int] = None
        self._next_end: Optional[int] = None
        self._onsets: Dict[str, int] = {}
        self._pupils: deque = deque()
        self._tagged: deque = deque()

    def observe_pupil(self, reading: PupilReading) -> None:
        ts = reading.timestamp
        if self._first is None:
            self._first = ts
            self._next_end = ts + self.window_us
            self._onsets = _onsets(self.params, ts)
        self._last = ts
        if self._baseline_vals is not None:
            if ts >= self._first + self.baseline_us:
                self._settle_baseline()
            elif reading.pupil_mm is not None:
                self._baseline_vals.append(reading.pupil_mm)
        if reading.pupil_mm is not None:
            self._pupils.append((ts, reading.pupil_mm))

    def observe_event(self, event: GazeEvent) -> Optional[str]:
        """Record an event; returns the AOI its centroid hits, if any."""
        hit = fixation_aoi(event, self.params.aois)
        self._tagged.append((event, hit))
        return hit

    def _settle_baseline(self) -> None:
        vals, self._baseline_vals = self._baseline_vals, None
        if vals:
            self.baseline = PupilBaseline(
                statistics.median(vals), (self._first, self._first + self.baseline_us))

    def advance(self, watermark: Optional[int]) -> List[MetricsSnapshot]:
        if watermark is None or self._next_end is None or self._baseline_vals is not None:
            return []
        return self._emit(min(watermark, self._last))

    def finish(self) -> List[MetricsSnapshot]:
        if self._first is None:
            return []
        if self._baseline_vals is not None:
            self._settle_baseline()
        return self._emit(self._last)

    def _emit(self, upto: int) -> List[MetricsSnapshot]:
        out = []
        while self._next_end <= upto:
            end = self._next_end
            start = end - self.window_us
            while self._pupils and self._pupils[0][0] < start:
                self._pupils.popleft()
            while self._tagged and self._tagged[0][0].end <= start:
                self._tagged.popleft()
            pupils = [p for ts, p in self._pupils if ts < end]
            out.append(snapshot((start, end), list(self._tagged), pupils, self.baseline,
                                self.aoi_ids, self._onsets))
            self._next_end += self.step_us
        return out
