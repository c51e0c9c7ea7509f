"""Sample cleaning: angular velocity annotation, median despiking and
calibration scoring."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Iterator, List, Optional, Sequence, Union

from .core import (
    UNIT_NORM_TOL,
    EventKind,
    GapStats,
    GazeEvent,
    GazeSample,
    StreamBreak,
    Vec3,
    VelocitySample,
    angle_deg,
    dot,
    norm,
    s_to_us,
)

StreamItem = Union[VelocitySample, StreamBreak]


@dataclass(frozen=True)
class PreprocessParams:
    median_window: int = 3
    max_gap_s: float = 0.075

    def __post_init__(self):
        if self.median_window < 1 or self.median_window % 2 == 0:
            raise ValueError(f"median_window must be odd and >= 1, got {self.median_window}")
        if not self.max_gap_s > 0:
            raise ValueError("max_gap_s must be positive")


def angular_velocity(p1: Vec3, p2: Vec3, dt_s: float) -> float:
    """Angular speed in deg/s between two unit gaze directions ``dt_s`` apart.

    The dot product is clamped into [-1, 1] so that near-parallel vectors
    never yield NaN from ``acos``.
    """
    if not dt_s > 0:
        raise ValueError(f"dt_s must be positive, got {dt_s}")
    for p in (p1, p2):
        if abs(norm(p) - 1.0) > UNIT_NORM_TOL:
            raise ValueError(f"not a unit vector: {p}")
    d = dot(p1, p2)
    if d > 1.0:
        d = 1.0
    elif d < -1.0:
        d = -1.0
    return math.degrees(math.acos(d)) / dt_s


class VelocityAnnotator:
    """Streaming velocity annotation for direction-valid samples.

    Emits one VelocitySample per input sample. When the time since the
    previous sample exceeds ``max_gap_s`` a Gap break is emitted first and
    the sample starts a new run with zero velocity.
    """

    def __init__(self, params: PreprocessParams = PreprocessParams()):
        self.max_gap_us = s_to_us(params.max_gap_s)
        self._prev: Optional[GazeSample] = None
        self._last_dt_us: Optional[int] = None

    def break_run(self) -> None:
        self._prev = None

    def push(self, sample: GazeSample, arrival: Optional[float] = None) -> List[StreamItem]:
        prev = self._prev
        self._prev = sample
        if prev is None:
            return [VelocitySample(sample, 0.0, 0.0, None)]
        dt_us = sample.timestamp - prev.timestamp
        if dt_us <= 0:
            raise ValueError(f"non-monotone timestamp {sample.timestamp} after {prev.timestamp}")
        if dt_us > self.max_gap_us:
            period = self._last_dt_us or dt_us
            lost = max(0, int(round(dt_us / period)) - 1)
            gap = GazeEvent(EventKind.GAP, prev.timestamp, sample.timestamp, GapStats(lost))
            return [StreamBreak(gap, arrival), VelocitySample(sample, 0.0, 0.0, None)]
        self._last_dt_us = dt_us
        dt_s = dt_us / 1e6
        theta = angle_deg(prev.gaze_direction, sample.gaze_direction)
        return [VelocitySample(sample, theta, theta / dt_s, dt_s)]


def annotate_velocity(samples: Iterable[GazeSample],
                      params: PreprocessParams = PreprocessParams()) -> Iterator[StreamItem]:
    ann = VelocityAnnotator(params)
    for s in samples:
        yield from ann.push(s)


class MedianFilter:
    """Centered running median over the velocity of each contiguous run.

    Output lags input by ``window // 2`` samples. Edge samples of a run pass
    through unchanged; call :meth:`flush` at a break or at end of stream.
    """

    def __init__(self, window: int = 3):
        if window < 1 or window % 2 == 0:
            raise ValueError(f"median window must be odd and >= 1, got {window}")
        self.window = window
        self.half = window // 2
        self._vels: deque = deque(maxlen=window)
        self._pending: deque = deque()
        self._count = 0

    def push(self, vs: VelocitySample) -> List[VelocitySample]:
        if self.window == 1:
            return [vs]
        idx = self._count
        self._count += 1
        self._pending.append(vs)
        self._vels.append(vs.velocity_deg_per_s)
        if idx < self.half:
            return [self._pending.popleft()]
        if len(self._vels) == self.window:
            center = self._pending.popleft()
            med = sorted(self._vels)[self.half]
            if med != center.velocity_deg_per_s:
                center = center.with_velocity(med)
            return [center]
        return []

    def flush(self) -> List[VelocitySample]:
        out = list(self._pending)
        self._pending.clear()
        self._vels.clear()
        self._count = 0
        return out


def median_filter(stream: Iterable[StreamItem], window: int = 3) -> Iterator[StreamItem]:
    """Despike velocities; StreamBreak items delimit contiguous runs."""
    mf = MedianFilter(window)
    for item in stream:
        if isinstance(item, StreamBreak):
            yield from mf.flush()
            yield item
        else:
            yield from mf.push(item)
    yield from mf.flush()


@dataclass(frozen=True)
class CalibrationResult:
    per_target_mean_deg: List[float]
    overall_mean_deg: float


def calibration_error(samples: Sequence[GazeSample], targets: Sequence[Vec3],
                      per_target_interval: float,
                      start_us: Optional[int] = None) -> CalibrationResult:
    """Mean angular error against each calibration target.

    Target ``i`` is shown during ``[start + i*interval, start + (i+1)*interval)``;
    ``start`` defaults to the first sample's timestamp. Direction-invalid
    samples are excluded.
    """
    if not targets:
        raise ValueError("no calibration targets")
    for t in targets:
        if abs(norm(t) - 1.0) > UNIT_NORM_TOL:
            raise ValueError(f"calibration target is not a unit vector: {t}")
    if start_us is None:
        if not samples:
            raise ValueError("no samples")
        start_us = samples[0].timestamp
    span = s_to_us(per_target_interval)
    sums = [0.0] * len(targets)
    counts = [0] * len(targets)
    for s in samples:
        if not s.direction_valid or abs(norm(s.gaze_direction) - 1.0) > UNIT_NORM_TOL:
            continue
        i = (s.timestamp - start_us) // span
        if 0 <= i < len(targets):
            sums[i] += angle_deg(s.gaze_direction, targets[i])
            counts[i] += 1
    per_target = []
    for i, (total, n) in enumerate(zip(sums, counts)):
        if n == 0:
            raise ValueError(f"calibration target {i} has no valid samples")
        per_target.append(total / n)
    return CalibrationResult(per_target, sum(per_target) / len(per_target))
