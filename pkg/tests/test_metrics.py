from __future__ import annotations

import math
import random
import statistics

import pytest
from hypothesis import given, settings, strategies as st

from gazeflow.core import (
    AreaOfInterest,
    BlinkStats,
    EventKind,
    FixationStats,
    GazeEvent,
    GazeSample,
    Polygon,
    PupilReading,
    SaccadeStats,
    Sphere,
)
from gazeflow.ingest import direction_from_angles, synthesize
from gazeflow.metrics import (
    MetricsParams,
    MetricsSnapshot,
    PupilBaseline,
    WindowedMetrics,
    aoi_hit_test,
    compute_window_metrics,
    dwell_time,
    fixation_aoi,
    pupil_baseline,
    window_metrics_from_readings,
)
from gazeflow.pipeline import detect_events

from support import looping_scenario

O = (0.0, 0.0, 0.0)
Z = (0.0, 0.0, 1.0)


def _sphere(id_, center, r=100.0):
    return AreaOfInterest(id_, Sphere(center, r))


def test_hit_axis_aligned_sphere():
    assert aoi_hit_test(O, Z, [_sphere("a", (0.0, 0.0, 1000.0))]) == "a"


def test_miss_perpendicular_sphere():
    assert aoi_hit_test(O, Z, [_sphere("a", (0.0, 1000.0, 0.0))]) is None


def test_nearest_sphere_wins():
    aois = [_sphere("far", (0.0, 0.0, 900.0)), _sphere("near", (0.0, 0.0, 500.0))]
    assert aoi_hit_test(O, Z, aois) == "near"


def test_sphere_behind_the_eye_is_ignored():
    assert aoi_hit_test(O, Z, [_sphere("back", (0.0, 0.0, -1000.0))]) is None


def test_origin_inside_sphere_hits():
    assert aoi_hit_test(O, Z, [_sphere("around", (0.0, 0.0, 10.0))]) == "around"


def test_polygon_hit_and_miss():
    screen = AreaOfInterest("screen", Polygon(((-100.0, -100.0, 600.0), (100.0, -100.0, 600.0),
                                               (100.0, 100.0, 600.0), (-100.0, 100.0, 600.0))))
    assert aoi_hit_test(O, Z, [screen]) == "screen"
    assert aoi_hit_test(O, direction_from_angles(30, 0), [screen]) is None
    # edge-on rays and planes behind the origin never hit
    assert aoi_hit_test(O, (1.0, 0.0, 0.0), [screen]) is None
    assert aoi_hit_test((0.0, 0.0, 700.0), Z, [screen]) is None
    # polygon in front of a sphere at the same bearing wins
    assert aoi_hit_test(O, Z, [_sphere("s", (0.0, 0.0, 1000.0)), screen]) == "screen"


def _fix(a_s, b_s, direction=Z):
    return GazeEvent(EventKind.FIXATION, round(a_s * 1e6), round(b_s * 1e6),
                     FixationStats(direction, O, 0.0, 3.0, 10))


def test_fixation_aoi_only_for_fixations():
    aois = [_sphere("a", (0.0, 0.0, 1000.0))]
    assert fixation_aoi(_fix(0, 1), aois) == "a"
    sac = GazeEvent(EventKind.SACCADE, 0, 10, SaccadeStats(300.0, 200.0, 5.0, 3))
    assert fixation_aoi(sac, aois) is None


def test_dwell_without_fixations():
    assert dwell_time([], "a", (0, 5_000_000), [_sphere("a", (0.0, 0.0, 1000.0))]) == 0.0


def _readings(vals, start=0, period=8333):
    return [GazeSample(start + i * period, Z, O, v, v, 1.0, 1.0) for i, v in enumerate(vals)]


def test_baseline_seeded_matches_sort_and_pick():
    rng = random.Random(9)
    vals = [round(rng.gauss(3.5, 0.3), 6) for _ in range(599)]
    b = pupil_baseline(_readings(vals), 5.0)
    assert b.baseline_mm == sorted(vals)[len(vals) // 2]
    assert b.computed_over == (0, 5_000_000)


def test_baseline_even_count_averages_middle_pair():
    b = pupil_baseline(_readings([3.0, 3.4, 3.2, 10.0]), 5.0)
    assert b.baseline_mm == pytest.approx(3.3)


def test_baseline_only_uses_the_interval():
    samples = _readings([3.0] * 600 + [6.0] * 600)
    assert pupil_baseline(samples, 5.0).baseline_mm == 3.0


def test_baseline_needs_pupil_data():
    with pytest.raises(ValueError):
        pupil_baseline([], 5.0)
    with pytest.raises(ValueError):
        PupilBaseline(0.0, (0, 1))


def test_params_validation():
    with pytest.raises(ValueError):
        MetricsParams(window_s=1, step_s=2)
    with pytest.raises(ValueError):
        MetricsParams(aois=(_sphere("a", (0.0, 0.0, 1.0)), _sphere("a", (0.0, 0.0, 2.0))))


def test_snapshot_dict_round_trip():
    samples, _ = synthesize(looping_scenario(15.0, seed=2, blink_every=3))
    params = MetricsParams(aois=(_sphere("t", (0.0, 0.0, 1000.0), 300.0),))
    snaps = compute_window_metrics(detect_events(samples), samples, params)
    assert snaps
    for s in snaps:
        assert MetricsSnapshot.from_dict(s.to_dict()) == s


def test_window_grid_and_no_partial_windows():
    samples, _ = synthesize(looping_scenario(14.5, seed=2))
    snaps = compute_window_metrics(detect_events(samples), samples, MetricsParams())
    last = samples[-1].timestamp
    assert [s.end for s in snaps] == list(range(10_000_000, last + 1, 1_000_000))
    assert all(s.window[1] - s.window[0] == 10_000_000 for s in snaps)


def _shift(ev, d):
    return GazeEvent(ev.kind, ev.start + d, ev.end + d, ev.stats)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 50), st.integers(1, 10 ** 9))
def test_time_shift_equivariance(seed, delta):
    samples, _ = synthesize(looping_scenario(13.0, seed=seed, blink_every=4))
    events = detect_events(samples)
    params = MetricsParams(aois=(_sphere("t", (0.0, 0.0, 1000.0), 200.0),))
    readings = [PupilReading(s.timestamp, s.pupil_mm) for s in samples]
    base = window_metrics_from_readings(events, readings, params)
    moved = window_metrics_from_readings(
        [_shift(e, delta) for e in events],
        [PupilReading(r.timestamp + delta, r.pupil_mm) for r in readings], params)
    assert len(base) == len(moved)
    for a, b in zip(base, moved):
        assert b.window == (a.window[0] + delta, a.window[1] + delta)
        assert b.to_dict() | {"window_start_us": 0, "window_end_us": 0} == \
            a.to_dict() | {"window_start_us": 0, "window_end_us": 0}


def test_dwell_partitions_fixation_time():
    # left and right halves of the field are disjoint AOIs
    left = AreaOfInterest("left", Polygon(((-1000.0, -1000.0, 500.0), (0.0, -1000.0, 500.0),
                                           (0.0, 1000.0, 500.0), (-1000.0, 1000.0, 500.0))))
    right = AreaOfInterest("right", Polygon(((1e-3, -1000.0, 500.0), (1000.0, -1000.0, 500.0),
                                             (1000.0, 1000.0, 500.0), (1e-3, 1000.0, 500.0))))
    samples, _ = synthesize(looping_scenario(20.0, seed=12))
    events = detect_events(samples)
    params = MetricsParams(aois=(left, right))
    for snap in compute_window_metrics(events, samples, params):
        start, end = snap.window
        fix_us = sum(max(0, min(e.end, end) - max(e.start, start))
                     for e in events if e.kind is EventKind.FIXATION)
        total = snap.dwell_time_s["left"] + snap.dwell_time_s["right"]
        assert total == pytest.approx(fix_us / 1e6, abs=1e-9)
        assert snap.mean_fixation_duration_s * snap.fixation_count == pytest.approx(fix_us / 1e6)


def test_ttff_per_aoi_onset():
    aoi = _sphere("t", (0.0, 0.0, 1000.0))
    off = direction_from_angles(30, 0)
    events = [_fix(0.0, 12.0, off), _fix(12.0, 30.0)]
    readings = [PupilReading(i * 100_000, 3.0) for i in range(260)]
    snaps = window_metrics_from_readings(
        events, readings, MetricsParams(aois=(aoi,), stimulus_onsets_us={"t": 11_000_000}))
    by_end = {s.end: s for s in snaps}
    # onset lies inside the window ending at 12 s; fixation starts at 12 s
    assert by_end[12_000_000].ttff_s["t"] is None
    assert by_end[13_000_000].ttff_s["t"] == 1.0
    assert by_end[21_000_000].ttff_s["t"] == 1.0
    # later windows start after the onset, while the fixation is under way
    assert by_end[23_000_000].ttff_s["t"] == 0.0


def test_saccade_and_blink_aggregates():
    events = [GazeEvent(EventKind.SACCADE, 1_000_000, 1_040_000, SaccadeStats(400.0, 300.0, 12.0, 5)),
              GazeEvent(EventKind.SACCADE, 2_000_000, 2_040_000, SaccadeStats(600.0, 500.0, 20.0, 5)),
              GazeEvent(EventKind.BLINK, 3_000_000, 3_150_000, BlinkStats(0.15)),
              GazeEvent(EventKind.BLINK, 9_950_000, 10_100_000, BlinkStats(0.15))]
    readings = [PupilReading(i * 100_000, 3.5) for i in range(101)]
    snap = window_metrics_from_readings(events, readings, MetricsParams())[0]
    assert snap.window == (0, 10_000_000)
    assert (snap.saccade_count, snap.mean_saccade_velocity_deg_s, snap.peak_saccade_velocity_deg_s) == \
        (2, 400.0, 600.0)
    assert snap.blink_count == 2 and snap.blink_rate_per_min == 12.0
    assert snap.pupil_dilation_index == 1.0
    assert snap.mean_fixation_duration_s is None


def test_streaming_matches_batch_for_any_watermark_schedule():
    samples, _ = synthesize(looping_scenario(30.0, seed=4, blink_every=3))
    events = detect_events(samples)
    params = MetricsParams(window_s=5.0, step_s=0.5, baseline_s=2.0,
                           aois=(_sphere("t", (0.0, 0.0, 1000.0), 250.0),))
    batch = compute_window_metrics(events, samples, params)
    rng = random.Random(1)
    for _ in range(5):
        wm = WindowedMetrics(params)
        out, ei = [], 0
        for s in samples:
            wm.observe_pupil(PupilReading(s.timestamp, s.pupil_mm))
            # release events that have started, with some random delay
            while ei < len(events) and events[ei].start <= s.timestamp - rng.randint(0, 300_000):
                wm.observe_event(events[ei])
                ei += 1
            watermark = events[ei].start if ei < len(events) else s.timestamp
            out += wm.advance(watermark)
        for e in events[ei:]:
            wm.observe_event(e)
        out += wm.finish()
        assert out == batch
