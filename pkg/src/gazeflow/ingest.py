"""Sample sources: file replay, seeded synthetic generation, live socket.

Every source is an iterator of GazeSamples. The base class enforces
strictly increasing timestamps (offending samples are skipped and counted
in ``rejected``) and optional real-time pacing.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import socket
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import EventKind, GazeSample, Validity, Vec3, dot, normalize, s_to_us
from .recorder import RAW_HEADER, parse_raw_row, quantize
from .wire import parse_sample_line

log = logging.getLogger(__name__)


class Pacing(str, enum.Enum):
    REALTIME = "realtime"
    MAX_SPEED = "max_speed"


@dataclass(frozen=True)
class SourceDescriptor:
    name: str
    nominal_rate_hz: Optional[float]


class SampleSource(ABC):
    """Uniform contract for anything that produces gaze samples."""

    def __init__(self, name: str, nominal_rate_hz: Optional[float] = None,
                 pacing: Union[Pacing, str] = Pacing.MAX_SPEED):
        self.descriptor = SourceDescriptor(name, nominal_rate_hz)
        self.pacing = Pacing(pacing)
        self.rejected = 0
        self.parse_errors = 0
        self.errors: List[Tuple[int, str]] = []
        self._last_ts: Optional[int] = None
        self._stop = threading.Event()
        self._anchor: Optional[Tuple[float, int]] = None

    @abstractmethod
    def _read(self) -> Optional[GazeSample]:
        """Next raw sample, or None at end of stream."""

    def __iter__(self):
        return self

    def __next__(self) -> GazeSample:
        while True:
            if self._stop.is_set():
                raise StopIteration
            s = self._read()
            if s is None:
                raise StopIteration
            if s.timestamp < 0 or (self._last_ts is not None and s.timestamp <= self._last_ts):
                self.rejected += 1
                log.warning("%s: rejected non-monotone timestamp %d", self.descriptor.name, s.timestamp)
                continue
            self._last_ts = s.timestamp
            if self.pacing is Pacing.REALTIME:
                self._wait_until(s.timestamp)
            return s

    def _wait_until(self, ts: int) -> None:
        if self._anchor is None:
            self._anchor = (time.perf_counter(), ts)
            return
        wall0, ts0 = self._anchor
        delay = wall0 + (ts - ts0) / 1e6 - time.perf_counter()
        if delay > 0:
            self._stop.wait(delay)

    def close(self) -> None:
        """Stop yielding; safe to call from another thread."""
        self._stop.set()

    def _parse_error(self, where: int, msg: str) -> None:
        self.parse_errors += 1
        self.errors.append((where, msg))
        log.warning("%s: line %d skipped: %s", self.descriptor.name, where, msg)


class ListSource(SampleSource):
    def __init__(self, samples: Sequence[GazeSample], name: str = "list",
                 nominal_rate_hz: Optional[float] = None, pacing=Pacing.MAX_SPEED):
        super().__init__(name, nominal_rate_hz, pacing)
        self._samples = samples
        self._i = 0

    def _read(self):
        if self._i >= len(self._samples):
            return None
        s = self._samples[self._i]
        self._i += 1
        return s


# --------------------------------------------------------------------------
# file replay

class ReplaySource(SampleSource):
    def __init__(self, path, pacing=Pacing.MAX_SPEED):
        path = Path(path)
        super().__init__(f"replay:{path.name}", None, pacing)
        try:
            self._fh = open(path, encoding="utf-8", newline="")
        except OSError as exc:
            raise ValueError(f"cannot read {path}: {exc}") from exc
        header = self._fh.readline()
        self._line_no = 1
        if header and header.strip() != RAW_HEADER:
            self._fh.close()
            raise ValueError(f"{path}: unexpected header {header.strip()!r}")
        self._eof = not header

    def _read(self):
        if self._eof:
            return None
        for line in self._fh:
            self._line_no += 1
            if not line.strip():
                continue
            try:
                return parse_raw_row(line)
            except (ValueError, IndexError) as exc:
                self._parse_error(self._line_no, str(exc))
        self._eof = True
        self._fh.close()
        return None

    def close(self):
        super().close()


def replay_file(path, pacing: Union[Pacing, str] = Pacing.MAX_SPEED) -> ReplaySource:
    """Read back a raw CSV recording in file order."""
    return ReplaySource(path, pacing)


# --------------------------------------------------------------------------
# synthetic generation

SEGMENT_KINDS = ("fixate", "saccade_to", "blink", "dropout")

_LABEL_KIND = {
    "fixate": EventKind.FIXATION,
    "saccade_to": EventKind.SACCADE,
    "blink": EventKind.BLINK,
    "dropout": EventKind.GAP,
}


def direction_from_angles(yaw_deg: float, pitch_deg: float) -> Vec3:
    """Unit vector for a yaw (about +y, toward +x) and pitch (toward +y) from +z."""
    y, p = math.radians(yaw_deg), math.radians(pitch_deg)
    return (math.sin(y) * math.cos(p), math.sin(p), math.cos(y) * math.cos(p))


@dataclass(frozen=True)
class Segment:
    kind: str
    duration_s: float
    target: Optional[Vec3] = None
    pupil_mm: Optional[float] = None

    def __post_init__(self):
        if self.kind not in SEGMENT_KINDS:
            raise ValueError(f"unknown segment kind {self.kind!r}")
        if not self.duration_s > 0:
            raise ValueError("segment duration must be positive")
        if self.kind == "saccade_to" and self.target is None:
            raise ValueError("saccade_to needs a target")
        if self.target is not None:
            object.__setattr__(self, "target", normalize(tuple(self.target)))

    @classmethod
    def fixate(cls, target, duration_s, pupil_mm=None):
        return cls("fixate", duration_s, target, pupil_mm)

    @classmethod
    def saccade_to(cls, target, duration_s):
        return cls("saccade_to", duration_s, target)

    @classmethod
    def blink(cls, duration_s):
        return cls("blink", duration_s)

    @classmethod
    def dropout(cls, duration_s):
        return cls("dropout", duration_s)


@dataclass(frozen=True)
class SyntheticScenario:
    segments: Tuple[Segment, ...]
    sample_rate_hz: float = 120.0
    jitter_deg: float = 0.0
    pupil_baseline_mm: float = 3.5
    pupil_noise_mm: float = 0.0
    rng_seed: int = 0
    initial_direction: Vec3 = (0.0, 0.0, 1.0)
    origin_mm: Vec3 = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if not self.segments:
            raise ValueError("scenario has no segments")
        if not self.sample_rate_hz > 0:
            raise ValueError("sample_rate_hz must be positive")
        if self.jitter_deg < 0 or self.pupil_noise_mm < 0:
            raise ValueError("noise levels must be non-negative")

    @property
    def duration_s(self) -> float:
        return sum(s.duration_s for s in self.segments)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScenario":
        segs = []
        for raw in d.get("segments", []):
            target = raw.get("target")
            if target is None and "yaw_deg" in raw:
                target = direction_from_angles(raw["yaw_deg"], raw.get("pitch_deg", 0.0))
            segs.append(Segment(raw["kind"], float(raw["duration_s"]),
                                tuple(target) if target is not None else None,
                                raw.get("pupil_mm")))
        noise = d.get("noise", {})
        return cls(
            segments=tuple(segs),
            sample_rate_hz=float(d.get("sample_rate_hz", 120.0)),
            jitter_deg=float(noise.get("jitter_deg", d.get("jitter_deg", 0.0))),
            pupil_baseline_mm=float(noise.get("pupil_baseline_mm", d.get("pupil_baseline_mm", 3.5))),
            pupil_noise_mm=float(noise.get("pupil_noise_mm", d.get("pupil_noise_mm", 0.0))),
            rng_seed=int(d.get("rng_seed", d.get("seed", 0))),
            initial_direction=tuple(d.get("initial_direction", (0.0, 0.0, 1.0))),
            origin_mm=tuple(d.get("origin_mm", (0.0, 0.0, 0.0))),
        )

    @classmethod
    def load(cls, path) -> "SyntheticScenario":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


@dataclass(frozen=True)
class Label:
    kind: EventKind
    start: int
    end: int

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "start_us": self.start, "end_us": self.end}


@dataclass(frozen=True)
class GroundTruthLabels:
    labels: Tuple[Label, ...] = field(default_factory=tuple)

    def __iter__(self):
        return iter(self.labels)

    def __len__(self):
        return len(self.labels)

    def kinds(self) -> List[EventKind]:
        return [lab.kind for lab in self.labels]


def _slerp(a: Vec3, b: Vec3, f: float) -> Vec3:
    d = max(-1.0, min(1.0, dot(a, b)))
    omega = math.acos(d)
    if omega < 1e-12:
        return a
    so = math.sin(omega)
    wa, wb = math.sin((1 - f) * omega) / so, math.sin(f * omega) / so
    return normalize((wa * a[0] + wb * b[0], wa * a[1] + wb * b[1], wa * a[2] + wb * b[2]))


def _jitter(base: Vec3, a_deg: float, b_deg: float) -> Vec3:
    """Rotate ``base`` by small angular offsets along two perpendicular axes."""
    r = math.hypot(a_deg, b_deg)
    if r == 0.0:
        return base
    helper = (1.0, 0.0, 0.0) if abs(base[0]) < 0.9 else (0.0, 1.0, 0.0)
    u = normalize((base[1] * helper[2] - base[2] * helper[1],
                   base[2] * helper[0] - base[0] * helper[2],
                   base[0] * helper[1] - base[1] * helper[0]))
    w = (base[1] * u[2] - base[2] * u[1], base[2] * u[0] - base[0] * u[2],
         base[0] * u[1] - base[1] * u[0])
    ca, cb = a_deg / r, b_deg / r
    axis = (ca * u[0] + cb * w[0], ca * u[1] + cb * w[1], ca * u[2] + cb * w[2])
    rr = math.radians(r)
    c, s = math.cos(rr), math.sin(rr)
    return normalize((c * base[0] + s * axis[0], c * base[1] + s * axis[1], c * base[2] + s * axis[2]))


def _q(v: Vec3) -> Vec3:
    return (quantize(v[0]), quantize(v[1]), quantize(v[2]))


def synthesize(scenario: SyntheticScenario) -> Tuple[List[GazeSample], GroundTruthLabels]:
    """Materialize a scenario as a sample list plus its ground-truth labels.

    Jitter is an isotropic Gaussian angular offset with ``jitter_deg``
    standard deviation along each of two perpendicular axes, drawn
    independently per sample. Floats are quantized to the raw CSV's 9
    significant digits so that a recording replays bit-for-bit.
    """
    bounds = []
    t = 0.0
    for seg in scenario.segments:
        start = s_to_us(t)
        t += seg.duration_s
        bounds.append((start, s_to_us(t)))
    total_us = bounds[-1][1]
    rate = scenario.sample_rate_hz
    n = 0
    while round(n * 1e6 / rate) < total_us:
        n += 1
    rng = np.random.default_rng(scenario.rng_seed)
    noise = rng.standard_normal((n, 4))

    labels = tuple(Label(_LABEL_KIND[seg.kind], a, b) for seg, (a, b) in zip(scenario.segments, bounds))

    # gaze anchor (where the eye rests) at the start of each segment
    anchors = []
    anchor = normalize(tuple(scenario.initial_direction))
    for seg in scenario.segments:
        anchors.append(anchor)
        if seg.kind in ("fixate", "saccade_to") and seg.target is not None:
            anchor = seg.target

    origin = _q(tuple(scenario.origin_mm))
    samples: List[GazeSample] = []
    si = 0
    for k in range(n):
        ts = int(round(k * 1e6 / rate))
        while ts >= bounds[si][1]:
            si += 1
        seg = scenario.segments[si]
        seg_start, seg_end = bounds[si]
        a_dir = anchors[si]
        if seg.kind == "fixate":
            base = seg.target or a_dir
        elif seg.kind == "saccade_to":
            base = _slerp(a_dir, seg.target, (ts - seg_start) / (seg_end - seg_start))
        else:
            base = a_dir
        j = scenario.jitter_deg
        direction = _jitter(base, j * noise[k, 0], j * noise[k, 1]) if j > 0 else base
        direction = _q(direction)
        if seg.kind in ("fixate", "saccade_to"):
            pb = seg.pupil_mm if seg.pupil_mm is not None else scenario.pupil_baseline_mm
            pn = scenario.pupil_noise_mm
            pl = quantize(min(10.0, max(0.5, pb + pn * noise[k, 2])))
            pr = quantize(min(10.0, max(0.5, pb + pn * noise[k, 3])))
            samples.append(GazeSample(ts, direction, origin, pl, pr, 1.0, 1.0, Validity.ALL))
        elif seg.kind == "blink":
            samples.append(GazeSample(ts, direction, origin, None, None, 0.0, 0.0, Validity.OPENNESS))
        else:
            samples.append(GazeSample(ts, direction, origin, None, None, None, None, Validity.NONE))
    return samples, GroundTruthLabels(labels)


class SyntheticSource(ListSource):
    pass


def generate_synthetic(scenario: SyntheticScenario,
                       pacing: Union[Pacing, str] = Pacing.MAX_SPEED
                       ) -> Tuple[SyntheticSource, GroundTruthLabels]:
    samples, labels = synthesize(scenario)
    src = SyntheticSource(samples, name=f"synthetic:{scenario.rng_seed}",
                          nominal_rate_hz=scenario.sample_rate_hz, pacing=pacing)
    return src, labels


# --------------------------------------------------------------------------
# live socket

def parse_address(addr: Union[str, Tuple[str, int]]) -> Tuple[str, int]:
    if isinstance(addr, tuple):
        return addr
    host, _, port = addr.rpartition(":")
    return (host or "127.0.0.1", int(port))


class SocketSource(SampleSource):
    """Accepts a single TCP client and reads newline-delimited JSON samples."""

    def __init__(self, bind_address, pacing=Pacing.MAX_SPEED, accept_timeout_s: Optional[float] = None):
        super().__init__("listen", None, pacing)
        host, port = parse_address(bind_address)
        self._srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._srv.bind((host, port))
        except OSError:
            self._srv.close()
            raise
        self._srv.listen(1)
        self._srv.settimeout(0.1)
        self.address = self._srv.getsockname()
        self._accept_timeout = accept_timeout_s
        self._conn: Optional[socket.socket] = None
        self._buf = b""
        self._line_no = 0
        self._done = False

    def _accept(self) -> bool:
        deadline = None if self._accept_timeout is None else time.monotonic() + self._accept_timeout
        while not self._stop.is_set():
            try:
                conn, _ = self._srv.accept()
            except socket.timeout:
                if deadline is not None and time.monotonic() > deadline:
                    return False
                continue
            except OSError:
                return False
            conn.settimeout(0.1)
            self._conn = conn
            return True
        return False

    def _readline(self) -> Optional[bytes]:
        # recv with our own buffer: a file wrapper is unusable after a timeout
        while not self._stop.is_set():
            nl = self._buf.find(b"\n")
            if nl >= 0:
                line, self._buf = self._buf[:nl + 1], self._buf[nl + 1:]
                return line
            try:
                chunk = self._conn.recv(65536)
            except socket.timeout:
                continue
            except OSError:
                return None
            if not chunk:
                line, self._buf = self._buf, b""
                return line or None
            self._buf += chunk
        return None

    def _read(self):
        if self._done:
            return None
        if self._conn is None and not self._accept():
            self._finish()
            return None
        while True:
            line = self._readline()
            if line is None:
                self._finish()
                return None
            self._line_no += 1
            text = line.decode("utf-8", errors="replace").strip()
            if not text:
                continue
            try:
                return parse_sample_line(text)
            except (ValueError, KeyError, TypeError) as exc:
                self._parse_error(self._line_no, str(exc))

    def _finish(self):
        self._done = True
        for obj in (self._conn, self._srv):
            if obj is not None:
                try:
                    obj.close()
                except OSError:
                    pass

    def close(self):
        super().close()


def listen_stream(bind_address, pacing=Pacing.MAX_SPEED, accept_timeout_s=None) -> SocketSource:
    return SocketSource(bind_address, pacing, accept_timeout_s)
