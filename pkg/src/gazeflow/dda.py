"""Flow-state estimation and a hysteretic difficulty controller.

Each snapshot is scored against the user's own running statistics. An
indicator's deviation ``z = (x - mean) / dev`` (sign flipped where *low*
values are the symptom) is squashed into [0, 1] by ``tanh(max(z, 0) / 2)``.
The boredom and anxiety scores are weighted means over the indicators
that are present in the snapshot.

Indicators:

* boredom: high blink rate, short fixations, pupil index below its mean
* anxiety: high peak saccade velocity, pupil index above its mean, long or
  absent time-to-first-fixation on the configured AOIs

The controller raises difficulty after ``consecutive_windows_required``
Boredom states in a row, lowers it after as many Anxiety states, and holds
otherwise. Any level change starts a cooldown.
"""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from .core import s_to_us
from .metrics import MetricsSnapshot


class FlowLabel(str, enum.Enum):
    BOREDOM = "boredom"
    FLOW = "flow"
    ANXIETY = "anxiety"


class Action(str, enum.Enum):
    INCREASE = "increase"
    HOLD = "hold"
    DECREASE = "decrease"


BOREDOM_WEIGHTS = {"blink_rate": 0.4, "fixation_duration": 0.35, "pupil": 0.25}
ANXIETY_WEIGHTS = {"saccade_velocity": 0.4, "pupil": 0.35, "ttff": 0.25}


@dataclass(frozen=True)
class DdaPolicy:
    boredom_enter: float = 0.6
    boredom_exit: float = 0.4
    anxiety_enter: float = 0.6
    anxiety_exit: float = 0.4
    consecutive_windows_required: int = 3
    cooldown_s: float = 10.0
    min_level: int = 1
    max_level: int = 5
    initial_level: int = 3
    warmup_windows: int = 5
    half_life_s: float = 60.0
    # deviation floor, relative to the running mean and absolute
    min_relative_deviation: float = 0.1
    min_deviation: float = 1e-6
    boredom_weights: Mapping[str, float] = field(default_factory=lambda: dict(BOREDOM_WEIGHTS))
    anxiety_weights: Mapping[str, float] = field(default_factory=lambda: dict(ANXIETY_WEIGHTS))

    def __post_init__(self):
        for name in ("boredom", "anxiety"):
            enter, exit_ = getattr(self, f"{name}_enter"), getattr(self, f"{name}_exit")
            if not 0.0 <= exit_ < enter <= 1.0:
                raise ValueError(f"{name}: need 0 <= exit < enter <= 1")
        if self.consecutive_windows_required < 1:
            raise ValueError("consecutive_windows_required must be >= 1")
        if self.cooldown_s < 0:
            raise ValueError("cooldown_s must be >= 0")
        if self.min_level > self.max_level:
            raise ValueError("min_level must not exceed max_level")
        if not self.min_level <= self.initial_level <= self.max_level:
            raise ValueError("initial_level outside the difficulty range")
        if self.warmup_windows < 0 or not self.half_life_s > 0:
            raise ValueError("bad warmup_windows / half_life_s")
        if set(self.boredom_weights) - set(BOREDOM_WEIGHTS):
            raise ValueError(f"unknown boredom indicator in {sorted(self.boredom_weights)}")
        if set(self.anxiety_weights) - set(ANXIETY_WEIGHTS):
            raise ValueError(f"unknown anxiety indicator in {sorted(self.anxiety_weights)}")
        if any(w < 0 for w in (*self.boredom_weights.values(), *self.anxiety_weights.values())):
            raise ValueError("weights must be non-negative")


@dataclass(frozen=True)
class FlowState:
    label: FlowLabel
    boredom_score: float
    anxiety_score: float
    contributing: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"label": self.label.value, "boredom_score": self.boredom_score,
                "anxiety_score": self.anxiety_score, "contributing": dict(self.contributing)}

    @classmethod
    def from_dict(cls, d: dict) -> "FlowState":
        return cls(FlowLabel(d["label"]), float(d["boredom_score"]),
                   float(d["anxiety_score"]), dict(d.get("contributing", {})))


@dataclass(frozen=True)
class DifficultyDecision:
    action: Action
    new_level: int
    reason: FlowState
    at: int

    def to_dict(self) -> dict:
        return {"action": self.action.value, "new_level": self.new_level,
                "at_us": self.at, "reason": self.reason.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "DifficultyDecision":
        return cls(Action(d["action"]), int(d["new_level"]),
                   FlowState.from_dict(d["reason"]), int(d["at_us"]))


class RunningStat:
    """Exponentially weighted mean and variance with a time half-life."""

    def __init__(self, half_life_s: float):
        self.half_life_us = s_to_us(half_life_s)
        self.n = 0
        self.mean = 0.0
        self.var = 0.0
        self._last: Optional[int] = None

    def update(self, x: float, at: int) -> None:
        if self.n == 0:
            self.mean, self.var = x, 0.0
        else:
            dt = max(0, at - self._last)
            alpha = 1.0 - 0.5 ** (dt / self.half_life_us)
            diff = x - self.mean
            incr = alpha * diff
            self.mean += incr
            self.var = (1.0 - alpha) * (self.var + diff * incr)
        self.n += 1
        self._last = at

    def deviation(self, relative_floor: float, floor: float) -> float:
        return max(math.sqrt(self.var), relative_floor * abs(self.mean), floor)


def indicator_values(snap: MetricsSnapshot) -> Dict[str, float]:
    """Raw indicator values present in a snapshot."""
    vals: Dict[str, float] = {"blink_rate": snap.blink_rate_per_min}
    if snap.mean_fixation_duration_s is not None:
        vals["fixation_duration"] = snap.mean_fixation_duration_s
    if snap.peak_saccade_velocity_deg_s is not None:
        vals["saccade_velocity"] = snap.peak_saccade_velocity_deg_s
    if snap.pupil_dilation_index is not None:
        vals["pupil"] = snap.pupil_dilation_index
    if snap.ttff_s:
        # an AOI never reached in the window counts as the full window
        span = (snap.window[1] - snap.window[0]) / 1e6
        ts = [span if t is None else t for t in snap.ttff_s.values()]
        vals["ttff"] = sum(ts) / len(ts)
    return vals


class UserReference:
    """Per-user running statistics for every indicator."""

    def __init__(self, policy: DdaPolicy = DdaPolicy()):
        self.policy = policy
        self.windows_seen = 0
        self.stats: Dict[str, RunningStat] = {}

    @property
    def warm(self) -> bool:
        return self.windows_seen >= self.policy.warmup_windows

    def update(self, snap: MetricsSnapshot) -> None:
        for k, x in indicator_values(snap).items():
            st = self.stats.get(k)
            if st is None:
                st = self.stats[k] = RunningStat(self.policy.half_life_s)
            st.update(x, snap.end)
        self.windows_seen += 1

    def z(self, key: str, x: float) -> Optional[float]:
        st = self.stats.get(key)
        if st is None or st.n == 0:
            return None
        p = self.policy
        return (x - st.mean) / st.deviation(p.min_relative_deviation, p.min_deviation)


def _squash(z: float) -> float:
    return math.tanh(max(z, 0.0) / 2.0)


def _weighted(parts: Mapping[str, float], weights: Mapping[str, float]) -> float:
    total = sum(weights[k] for k in parts if k in weights)
    if total <= 0:
        return 0.0
    return sum(weights[k] * v for k, v in parts.items() if k in weights) / total


def label_for(boredom: float, anxiety: float, policy: DdaPolicy,
              previous: Optional[FlowLabel] = None) -> FlowLabel:
    """Label from scores; a state already held only needs its exit threshold."""
    b_thr = policy.boredom_exit if previous is FlowLabel.BOREDOM else policy.boredom_enter
    a_thr = policy.anxiety_exit if previous is FlowLabel.ANXIETY else policy.anxiety_enter
    if boredom >= anxiety and boredom > b_thr:
        return FlowLabel.BOREDOM
    if anxiety >= boredom and anxiety > a_thr:
        return FlowLabel.ANXIETY
    return FlowLabel.FLOW


def engagement_state(snap: MetricsSnapshot, reference: UserReference,
                     policy: DdaPolicy = DdaPolicy(),
                     previous: Optional[FlowLabel] = None) -> FlowState:
    """Score one snapshot against the (unchanged) reference."""
    if not reference.warm:
        return FlowState(FlowLabel.FLOW, 0.0, 0.0, {})
    vals = indicator_values(snap)
    z: Dict[str, float] = {}
    for k, x in vals.items():
        zk = reference.z(k, x)
        if zk is not None:
            z[k] = zk
    bored, anx = {}, {}
    if "blink_rate" in z:
        bored["blink_rate"] = _squash(z["blink_rate"])
    if "fixation_duration" in z:
        bored["fixation_duration"] = _squash(-z["fixation_duration"])
    if "pupil" in z:
        bored["pupil"] = _squash(-z["pupil"])
        anx["pupil"] = _squash(z["pupil"])
    if "saccade_velocity" in z:
        anx["saccade_velocity"] = _squash(z["saccade_velocity"])
    if "ttff" in z:
        anx["ttff"] = _squash(z["ttff"])
    b = _weighted(bored, policy.boredom_weights)
    a = _weighted(anx, policy.anxiety_weights)
    return FlowState(label_for(b, a, policy, previous), b, a, z)


def adjust_difficulty(history: Sequence[FlowState], current_level: int,
                      policy: DdaPolicy = DdaPolicy(), now: int = 0,
                      last_change: Optional[int] = None) -> DifficultyDecision:
    """Decide from the most recent states; ``history[-1]`` is the newest."""
    if not history:
        raise ValueError("empty state history")
    reason = history[-1]
    hold = DifficultyDecision(Action.HOLD, current_level, reason, now)
    n = policy.consecutive_windows_required
    if len(history) < n:
        return hold
    if last_change is not None and now - last_change < s_to_us(policy.cooldown_s):
        return hold
    recent = {s.label for s in history[-n:]}
    if recent == {FlowLabel.BOREDOM} and current_level < policy.max_level:
        return DifficultyDecision(Action.INCREASE, current_level + 1, reason, now)
    if recent == {FlowLabel.ANXIETY} and current_level > policy.min_level:
        return DifficultyDecision(Action.DECREASE, current_level - 1, reason, now)
    return hold


class DdaController:
    """Snapshot stream in, one decision per snapshot out."""

    def __init__(self, policy: DdaPolicy = DdaPolicy()):
        self.policy = policy
        self.reference = UserReference(policy)
        self.level = policy.initial_level
        self.history: deque = deque(maxlen=policy.consecutive_windows_required)
        self.last_change: Optional[int] = None

    def step(self, snap: MetricsSnapshot) -> DifficultyDecision:
        prev = self.history[-1].label if self.history else None
        state = engagement_state(snap, self.reference, self.policy, prev)
        self.reference.update(snap)
        self.history.append(state)
        d = adjust_difficulty(list(self.history), self.level, self.policy,
                              snap.end, self.last_change)
        if d.action is not Action.HOLD:
            self.level = d.new_level
            self.last_change = d.at
        return d


def run_controller(snapshots: Sequence[MetricsSnapshot],
                   policy: DdaPolicy = DdaPolicy()) -> List[DifficultyDecision]:
    ctl = DdaController(policy)
    return [ctl.step(s) for s in snapshots]


def decisions_changes(decisions: Sequence[DifficultyDecision]) -> List[Tuple[int, Action]]:
    """(time, action) of every non-Hold decision."""
    return [(d.at, d.action) for d in decisions if d.action is not Action.HOLD]
