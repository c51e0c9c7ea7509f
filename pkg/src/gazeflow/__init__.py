"""Real-time gaze event engine: I-VT event detection, engagement metrics
and dynamic difficulty decisions over replayable gaze streams."""

from __future__ import annotations

from .core import (
    AreaOfInterest,
    EventKind,
    GazeEvent,
    GazeSample,
    Polygon,
    Sphere,
    Validity,
    VelocitySample,
    validate_sample,
)
from .dda import DdaController, DdaPolicy, DifficultyDecision, FlowState, adjust_difficulty, engagement_state
from .events import DetectorParams, EventSegmenter, classify_velocity, detect_blinks, segment_events
from .ingest import SyntheticScenario, generate_synthetic, listen_stream, replay_file, synthesize
from .metrics import MetricsParams, MetricsSnapshot, WindowedMetrics, compute_window_metrics, pupil_baseline
from .pipeline import PipelineConfig, PipelineStats, detect_events, run
from .preprocess import PreprocessParams, angular_velocity, median_filter
from .recorder import Recorder, RecorderConfig

__version__ = "0.1.0"

__all__ = [
    "AreaOfInterest", "EventKind", "GazeEvent", "GazeSample", "Polygon", "Sphere", "Validity",
    "VelocitySample", "validate_sample",
    "DdaController", "DdaPolicy", "DifficultyDecision", "FlowState", "adjust_difficulty",
    "engagement_state",
    "DetectorParams", "EventSegmenter", "classify_velocity", "detect_blinks", "segment_events",
    "SyntheticScenario", "generate_synthetic", "listen_stream", "replay_file", "synthesize",
    "MetricsParams", "MetricsSnapshot", "WindowedMetrics", "compute_window_metrics",
    "pupil_baseline",
    "PipelineConfig", "PipelineStats", "detect_events", "run",
    "PreprocessParams", "angular_velocity", "median_filter",
    "Recorder", "RecorderConfig",
]
