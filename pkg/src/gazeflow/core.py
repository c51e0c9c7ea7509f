"""Shared domain types for the gaze processing engine.

All timestamps are integer microseconds since session start. Gaze is a
single combined (cyclopean) unit direction vector in the HMD frame.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

Vec3 = Tuple[float, float, float]

US_PER_S = 1_000_000
UNIT_NORM_TOL = 1e-6
MAX_PUPIL_MM = 10.0


class Validity(enum.IntFlag):
    NONE = 0
    DIRECTION = 1
    PUPIL = 2
    OPENNESS = 4
    ALL = 7


class EventKind(str, enum.Enum):
    FIXATION = "fixation"
    SACCADE = "saccade"
    BLINK = "blink"
    GAP = "gap"


def us_to_s(us: int) -> float:
    return us / US_PER_S


def s_to_us(seconds: float) -> int:
    return int(round(seconds * US_PER_S))


def norm(v: Vec3) -> float:
    return math.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])


def dot(a: Vec3, b: Vec3) -> float:
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def normalize(v: Vec3) -> Vec3:
    n = norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return (v[0] / n, v[1] / n, v[2] / n)


def angle_deg(a: Vec3, b: Vec3) -> float:
    """Angle between two unit vectors in degrees (dot product clamped)."""
    d = dot(a, b)
    if d > 1.0:
        d = 1.0
    elif d < -1.0:
        d = -1.0
    return math.degrees(math.acos(d))


@dataclass(frozen=True, slots=True)
class GazeSample:
    """One eye-tracker reading."""

    timestamp: int
    gaze_direction: Vec3
    gaze_origin: Vec3 = (0.0, 0.0, 0.0)
    pupil_diameter_left: Optional[float] = None
    pupil_diameter_right: Optional[float] = None
    eye_openness_left: Optional[float] = None
    eye_openness_right: Optional[float] = None
    validity: Validity = Validity.ALL

    @property
    def direction_valid(self) -> bool:
        return bool(self.validity & Validity.DIRECTION)

    @property
    def pupil_mm(self) -> Optional[float]:
        """Mean of the available eye diameters, or None when pupil-invalid."""
        if not self.validity & Validity.PUPIL:
            return None
        vals = [d for d in (self.pupil_diameter_left, self.pupil_diameter_right)
                if d is not None and 0.0 < d <= MAX_PUPIL_MM]
        if not vals:
            return None
        return sum(vals) / len(vals)

    @property
    def openness(self) -> Optional[float]:
        if not self.validity & Validity.OPENNESS:
            return None
        vals = [o for o in (self.eye_openness_left, self.eye_openness_right)
                if o is not None and 0.0 <= o <= 1.0]
        if not vals:
            return None
        return sum(vals) / len(vals)


@dataclass(frozen=True, slots=True)
class VelocitySample:
    """A direction-valid sample annotated with the angle and angular
    velocity relative to its predecessor.

    ``dt_s`` is None for the first sample of a contiguous run (stream start
    or after a break); such samples carry zero angle and zero velocity.
    """

    sample: GazeSample
    theta_deg: float
    velocity_deg_per_s: float
    dt_s: Optional[float]

    @property
    def timestamp(self) -> int:
        return self.sample.timestamp

    @property
    def prev_timestamp(self) -> Optional[int]:
        if self.dt_s is None:
            return None
        return self.sample.timestamp - s_to_us(self.dt_s)

    def with_velocity(self, v: float) -> "VelocitySample":
        return VelocitySample(self.sample, self.theta_deg, v, self.dt_s)


@dataclass(frozen=True, slots=True)
class FixationStats:
    centroid_direction: Vec3
    centroid_origin: Vec3
    dispersion_deg: float
    mean_pupil_mm: Optional[float]
    sample_count: int
    aoi: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "centroid_direction": list(self.centroid_direction),
            "centroid_origin": list(self.centroid_origin),
            "dispersion_deg": self.dispersion_deg,
            "mean_pupil_mm": self.mean_pupil_mm,
            "sample_count": self.sample_count,
            "aoi": self.aoi,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FixationStats":
        return cls(
            centroid_direction=tuple(d["centroid_direction"]),
            centroid_origin=tuple(d.get("centroid_origin", (0.0, 0.0, 0.0))),
            dispersion_deg=d.get("dispersion_deg", 0.0),
            mean_pupil_mm=d.get("mean_pupil_mm"),
            sample_count=d.get("sample_count", 0),
            aoi=d.get("aoi"),
        )


@dataclass(frozen=True, slots=True)
class SaccadeStats:
    peak_velocity_deg_s: float
    mean_velocity_deg_s: float
    amplitude_deg: float
    sample_count: int

    def to_dict(self) -> dict:
        return {
            "peak_velocity_deg_s": self.peak_velocity_deg_s,
            "mean_velocity_deg_s": self.mean_velocity_deg_s,
            "amplitude_deg": self.amplitude_deg,
            "sample_count": self.sample_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SaccadeStats":
        return cls(d["peak_velocity_deg_s"], d["mean_velocity_deg_s"],
                   d.get("amplitude_deg", 0.0), d.get("sample_count", 0))


@dataclass(frozen=True, slots=True)
class BlinkStats:
    closure_duration_s: float

    def to_dict(self) -> dict:
        return {"closure_duration_s": self.closure_duration_s}

    @classmethod
    def from_dict(cls, d: dict) -> "BlinkStats":
        return cls(d["closure_duration_s"])


@dataclass(frozen=True, slots=True)
class GapStats:
    samples_lost: int

    def to_dict(self) -> dict:
        return {"samples_lost": self.samples_lost}

    @classmethod
    def from_dict(cls, d: dict) -> "GapStats":
        return cls(d["samples_lost"])


EventStats = Union[FixationStats, SaccadeStats, BlinkStats, GapStats]

_STATS_TYPES = {
    EventKind.FIXATION: FixationStats,
    EventKind.SACCADE: SaccadeStats,
    EventKind.BLINK: BlinkStats,
    EventKind.GAP: GapStats,
}


@dataclass(frozen=True, slots=True)
class GazeEvent:
    """A classified interval ``[start, end)`` in session microseconds."""

    kind: EventKind
    start: int
    end: int
    stats: EventStats

    def __post_init__(self):
        if self.end <= self.start:
            raise ValueError(f"event end {self.end} must be after start {self.start}")

    @property
    def duration_s(self) -> float:
        return (self.end - self.start) / US_PER_S

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "start_us": self.start,
                "end_us": self.end, "stats": self.stats.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "GazeEvent":
        kind = EventKind(d["kind"])
        return cls(kind, int(d["start_us"]), int(d["end_us"]),
                   _STATS_TYPES[kind].from_dict(d.get("stats", {})))


@dataclass(frozen=True, slots=True)
class StreamBreak:
    """Marker that breaks sample adjacency in a velocity stream.

    A break without an event announces that a closure is long enough to end
    the current run; the Blink or Gap describing it follows later.
    ``revealed_at`` is the wall-clock arrival of the first sample that made
    the break visible (used for latency accounting only).
    """

    event: Optional[GazeEvent] = None
    revealed_at: Optional[float] = field(default=None, compare=False)


@dataclass(frozen=True, slots=True)
class PupilReading:
    timestamp: int
    pupil_mm: Optional[float]


@dataclass(frozen=True, slots=True)
class Sphere:
    center: Vec3
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")


@dataclass(frozen=True, slots=True)
class Polygon:
    """Convex planar polygon; vertices in order, all on one plane."""

    vertices: Tuple[Vec3, ...]

    def __post_init__(self):
        if len(self.vertices) < 3:
            raise ValueError("polygon needs at least 3 vertices")
        if not _is_convex(self.vertices):
            raise ValueError("polygon must be convex and planar")

    @property
    def normal(self) -> Vec3:
        a, b, c = self.vertices[0], self.vertices[1], self.vertices[2]
        return normalize(cross(sub(b, a), sub(c, a)))


@dataclass(frozen=True, slots=True)
class AreaOfInterest:
    id: str
    shape: Union[Sphere, Polygon]

    def to_dict(self) -> dict:
        if isinstance(self.shape, Sphere):
            return {"id": self.id, "sphere": {"center": list(self.shape.center),
                                              "radius": self.shape.radius}}
        return {"id": self.id, "polygon": [list(v) for v in self.shape.vertices]}

    @classmethod
    def from_dict(cls, d: dict) -> "AreaOfInterest":
        if "sphere" in d:
            s = d["sphere"]
            return cls(str(d["id"]), Sphere(tuple(s["center"]), float(s["radius"])))
        if "polygon" in d:
            return cls(str(d["id"]), Polygon(tuple(tuple(v) for v in d["polygon"])))
        raise ValueError(f"AOI {d.get('id')!r} has neither sphere nor polygon")


def sub(a: Vec3, b: Vec3) -> Vec3:
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2])


def cross(a: Vec3, b: Vec3) -> Vec3:
    return (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])


def _is_convex(verts) -> bool:
    n = len(verts)
    ref = None
    for i in range(n):
        a, b, c = verts[i], verts[(i + 1) % n], verts[(i + 2) % n]
        cr = cross(sub(b, a), sub(c, b))
        if norm(cr) < 1e-12:
            continue
        if ref is None:
            ref = cr
            continue
        if dot(cr, ref) <= 0:
            return False
        # planarity: all turn normals parallel
        if norm(cross(normalize(cr), normalize(ref))) > 1e-6:
            return False
    return ref is not None


@dataclass(frozen=True, slots=True)
class ValidityReport:
    flags_set: bool
    direction_ok: bool
    pupil_ok: bool
    openness_ok: bool
    timestamp_ok: bool

    @property
    def fully_valid(self) -> bool:
        return (self.flags_set and self.direction_ok and self.pupil_ok
                and self.openness_ok and self.timestamp_ok)

    @property
    def usable_for_velocity(self) -> bool:
        return self.direction_ok and self.timestamp_ok


def validate_sample(raw: GazeSample, prev_timestamp: Optional[int] = None) -> ValidityReport:
    """Check a raw sample against the GazeSample invariants.

    ``direction_ok`` requires both the flag and a unit-norm vector; a
    flagged direction of length 0.8 is malformed and excluded.
    """
    v = raw.validity
    direction_ok = bool(v & Validity.DIRECTION)
    if direction_ok:
        d = raw.gaze_direction
        direction_ok = (all(math.isfinite(c) for c in d)
                        and abs(norm(d) - 1.0) <= UNIT_NORM_TOL)
    pupil_ok = bool(v & Validity.PUPIL)
    if pupil_ok:
        vals = [p for p in (raw.pupil_diameter_left, raw.pupil_diameter_right) if p is not None]
        pupil_ok = bool(vals) and all(0.0 < p <= MAX_PUPIL_MM for p in vals)
    openness_ok = bool(v & Validity.OPENNESS)
    if openness_ok:
        vals = [o for o in (raw.eye_openness_left, raw.eye_openness_right) if o is not None]
        openness_ok = bool(vals) and all(0.0 <= o <= 1.0 for o in vals)
    ts_ok = raw.timestamp >= 0 and (prev_timestamp is None or raw.timestamp > prev_timestamp)
    return ValidityReport(
        flags_set=(v & Validity.ALL) == Validity.ALL,
        direction_ok=direction_ok,
        pupil_ok=pupil_ok,
        openness_ok=openness_ok,
        timestamp_ok=ts_ok,
    )
