"""Newline-delimited JSON message schema for the TCP interfaces.

Every line is one object ``{"type": ..., "seq": n, "payload": {...}}``.
Sample payloads mirror the raw CSV columns::

    {"timestamp_us": 8333, "dir": [x, y, z], "origin_mm": [x, y, z],
     "pupil_l_mm": 3.1, "pupil_r_mm": null, "openness_l": 1.0,
     "openness_r": 1.0, "validity": 7}
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Dict

from .core import GazeSample, Validity

MESSAGE_TYPES = ("sample", "event", "metrics", "decision", "stats")


@dataclass(frozen=True)
class WireMessage:
    type: str
    payload: Dict[str, Any]
    seq: int

    def to_line(self) -> bytes:
        return (json.dumps({"type": self.type, "seq": self.seq, "payload": self.payload},
                           separators=(",", ":")) + "\n").encode("utf-8")

    @classmethod
    def from_line(cls, line) -> "WireMessage":
        d = json.loads(line)
        if d.get("type") not in MESSAGE_TYPES:
            raise ValueError(f"unknown message type {d.get('type')!r}")
        return cls(d["type"], d["payload"], int(d["seq"]))


def sample_to_wire(s: GazeSample) -> Dict[str, Any]:
    return {
        "timestamp_us": s.timestamp,
        "dir": list(s.gaze_direction),
        "origin_mm": list(s.gaze_origin),
        "pupil_l_mm": s.pupil_diameter_left,
        "pupil_r_mm": s.pupil_diameter_right,
        "openness_l": s.eye_openness_left,
        "openness_r": s.eye_openness_right,
        "validity": int(s.validity),
    }


def _num(x):
    if x is None:
        return None
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ValueError(f"expected a number, got {x!r}")
    return float(x)


def _vec(v):
    if not isinstance(v, (list, tuple)) or len(v) != 3:
        raise ValueError(f"expected a 3-vector, got {v!r}")
    return tuple(_num(c) for c in v)


def sample_from_wire(d: Dict[str, Any]) -> GazeSample:
    ts = d["timestamp_us"]
    if isinstance(ts, bool) or not isinstance(ts, int):
        raise ValueError(f"timestamp_us must be an integer, got {ts!r}")
    validity = int(d.get("validity", int(Validity.ALL)))
    if not 0 <= validity <= int(Validity.ALL):
        raise ValueError(f"validity out of range: {validity}")
    return GazeSample(
        timestamp=ts,
        gaze_direction=_vec(d["dir"]),
        gaze_origin=_vec(d.get("origin_mm", (0.0, 0.0, 0.0))),
        pupil_diameter_left=_num(d.get("pupil_l_mm")),
        pupil_diameter_right=_num(d.get("pupil_r_mm")),
        eye_openness_left=_num(d.get("openness_l")),
        eye_openness_right=_num(d.get("openness_r")),
        validity=Validity(validity),
    )


def parse_sample_line(line: str) -> GazeSample:
    """Accept either a full ``sample`` WireMessage or a bare sample payload."""
    d = json.loads(line)
    if not isinstance(d, dict):
        raise ValueError("sample line must be a JSON object")
    if "type" in d:
        if d["type"] != "sample":
            raise ValueError(f"expected a sample message, got {d['type']!r}")
        d = d["payload"]
    return sample_from_wire(d)
