"""Configuration files.

INI-style sections named after the :class:`PipelineConfig` fields, with
keys named after the fields of each section's parameter class. Values are
JSON (numbers, ``true``/``false``, quoted strings, lists, objects); a bare
word that is not valid JSON is taken as a string::

    [detector]
    mode = dual
    saccade_threshold_deg_s = 250
    fixation_threshold_deg_s = 3

    [metrics]
    window_s = 10
    aois = [{"id": "target", "sphere": {"center": [0, 0, 1000], "radius": 100}}]

    [pipeline]
    queue_capacity = 1024

    [recorder]
    output_dir = "session"

    [server]
    client_buffer_bytes = 1048576

Sections: ``preprocess``, ``detector``, ``metrics``, ``dda``, ``recorder``,
``pipeline`` (queue_capacity, backpressure) and ``server``. Unknown sections
or keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
from pathlib import Path
from typing import Any, Dict, Tuple

from .core import AreaOfInterest
from .dda import DdaPolicy
from .events import DetectorParams
from .metrics import MetricsParams
from .pipeline import PipelineConfig
from .preprocess import PreprocessParams
from .recorder import RecorderConfig
from .server import ServerConfig

_SECTIONS = {
    "preprocess": PreprocessParams,
    "detector": DetectorParams,
    "metrics": MetricsParams,
    "dda": DdaPolicy,
    "recorder": RecorderConfig,
    "server": ServerConfig,
}
_PIPELINE_KEYS = ("queue_capacity", "backpressure")


def _value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text.strip()


def _build(cls, section: str, values: Dict[str, Any]):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"[{section}] unknown keys: {', '.join(sorted(unknown))}")
    if cls is MetricsParams and "aois" in values:
        values["aois"] = tuple(AreaOfInterest.from_dict(d) for d in values["aois"])
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"[{section}] {exc}") from exc


def parse_config(text: str, source: str = "<config>") -> Tuple[PipelineConfig, ServerConfig]:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keys are case-sensitive field names
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ValueError(str(exc)) from exc
    parts: Dict[str, Any] = {}
    pipeline_kw: Dict[str, Any] = {}
    for name in cp.sections():
        values = {k: _value(v) for k, v in cp.items(name)}
        if name == "pipeline":
            unknown = set(values) - set(_PIPELINE_KEYS)
            if unknown:
                raise ValueError(f"[pipeline] unknown keys: {', '.join(sorted(unknown))}")
            pipeline_kw.update(values)
        elif name in _SECTIONS:
            parts[name] = _build(_SECTIONS[name], name, values)
        else:
            raise ValueError(f"unknown section [{name}]")
    server = parts.pop("server", ServerConfig())
    try:
        cfg = PipelineConfig(**parts, **pipeline_kw)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"[pipeline] {exc}") from exc
    return cfg, server


def load_config(path) -> Tuple[PipelineConfig, ServerConfig]:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValueError(f"cannot read config {p}: {exc}") from exc
    return parse_config(text, str(p))
