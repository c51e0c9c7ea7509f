"""Shared helpers for the test suite: scenario builders and matching."""

from __future__ import annotations

import functools
import math
import random
from typing import Dict, List, Sequence, Tuple

from gazeflow.core import GazeEvent, angle_deg
from gazeflow.ingest import Segment, SyntheticScenario, direction_from_angles

# acceptance results, filled by test_acceptance and printed by conftest
ACCEPTANCE: Dict[int, Tuple[str, bool, str]] = {}


def criterion(number: int, title: str):
    """Record a test's outcome as acceptance criterion ``number``."""
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                ACCEPTANCE[number] = (title, False, f"{type(exc).__name__}: {exc}".splitlines()[0])
                raise
            ACCEPTANCE[number] = (title, True, detail or "")
        return run
    return wrap


def random_scenario(rng: random.Random, seed: int, jitter: float,
                    pupil_noise: float = 0.05) -> SyntheticScenario:
    """Fixations joined by fast saccades (>= 200 deg/s, >= 3 deg) and
    occasional blinks, staying within +-30 deg yaw / +-25 deg pitch."""
    cur = (0.0, 0.0)
    segs = [Segment.fixate(direction_from_angles(*cur), rng.uniform(0.15, 0.6))]
    for _ in range(rng.randint(2, 6)):
        if rng.random() < 0.15:
            segs.append(Segment.blink(rng.uniform(0.08, 0.4)))
            segs.append(Segment.fixate(direction_from_angles(*cur), rng.uniform(0.15, 0.6)))
            continue
        speed = rng.uniform(200, 600)
        dur = rng.uniform(0.02, 0.08)
        amp = min(speed * dur, 40.0)
        ang = rng.uniform(0, 2 * math.pi)
        nxt = (max(-30.0, min(30.0, cur[0] + amp * math.cos(ang))),
               max(-25.0, min(25.0, cur[1] + amp * math.sin(ang))))
        a = angle_deg(direction_from_angles(*cur), direction_from_angles(*nxt))
        if a < 3 or a / dur < 200:
            continue
        segs.append(Segment.saccade_to(direction_from_angles(*nxt), dur))
        segs.append(Segment.fixate(direction_from_angles(*nxt), rng.uniform(0.15, 0.6)))
        cur = nxt
    return SyntheticScenario(segs, jitter_deg=jitter, rng_seed=seed, pupil_noise_mm=pupil_noise)


def looping_scenario(duration_s: float, seed: int = 1, jitter: float = 0.1,
                     blink_every: int = 0, pupil_noise: float = 0.05,
                     pupil_mm: float = 3.5) -> SyntheticScenario:
    """Alternating fixations and 20-40 deg saccades for ``duration_s``."""
    rng = random.Random(seed)
    cur = (0.0, 0.0)
    segs: List[Segment] = []
    t, i = 0.0, 0
    while t < duration_s:
        d = rng.uniform(0.2, 0.6)
        segs.append(Segment.fixate(direction_from_angles(*cur), d))
        t += d
        i += 1
        if blink_every and i % blink_every == 0:
            segs.append(Segment.blink(0.15))
            t += 0.15
            continue
        nxt = (rng.uniform(-20, 20), rng.uniform(-15, 15))
        segs.append(Segment.saccade_to(direction_from_angles(*nxt), 0.04))
        t += 0.04
        cur = nxt
    return SyntheticScenario(segs, jitter_deg=jitter, rng_seed=seed,
                             pupil_noise_mm=pupil_noise, pupil_baseline_mm=pupil_mm)


def match_labels(events: Sequence[GazeEvent], labels, tol_us: int) -> Tuple[bool, int, int]:
    """(kind sequence matches, boundaries within tolerance, boundaries checked)."""
    kinds_ok = [e.kind for e in events] == labels.kinds()
    good = total = 0
    if kinds_ok:
        for e, lab in zip(events, labels):
            for a, b in ((e.start, lab.start), (e.end, lab.end)):
                total += 1
                good += abs(a - b) <= tol_us
    return kinds_ok, good, total
