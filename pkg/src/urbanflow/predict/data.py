"""Interacting-pair records and their JSON-lines file format."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgument

DIRECTIONS = ("GS", "TL", "TR")
YIELDS = ("ego-first", "target-first")

# per-step PairState columns, ego block then target block
CAR_FIELDS = ("x", "y", "vx", "vy", "heading", "dist")
STATE_FIELDS = tuple(f"ego_{f}" for f in CAR_FIELDS) + tuple(f"target_{f}" for f in CAR_FIELDS)
N_STATE = len(STATE_FIELDS)
TARGET = slice(6, 12)
EGO = slice(0, 6)


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    out = np.arctan2(np.sin(a), np.cos(a))
    return np.where(out <= -math.pi, math.pi, out)


def pair_state(ego_xy, ego_v, target_xy, target_v, center=(0.0, 0.0)):
    """Build a (T, 12) PairState array; positions become centre-relative."""
    c = np.asarray(center, dtype=np.float64)
    blocks = []
    for xy, v in ((ego_xy, ego_v), (target_xy, target_v)):
        p = np.asarray(xy, dtype=np.float64) - c
        v = np.asarray(v, dtype=np.float64)
        heading = wrap_angle(np.arctan2(v[:, 1], v[:, 0]))
        dist = np.sqrt(p[:, 0] ** 2 + p[:, 1] ** 2)
        blocks.append(np.column_stack([p, v, heading, dist]))
    return np.hstack(blocks)


@dataclass
class PairRecord:
    pair_id: int
    dt: float
    states: np.ndarray            # (T, 12)
    direction: str                # target direction intention
    yield_label: str
    target_xy: np.ndarray         # (T2, 2), T2 >= T, index-aligned with states
    target_dist_to_entry: np.ndarray  # (T,), metres before the stop line (negative inside)
    ego_direction: str = "GS"
    lane_width: float = 3.5
    box_half: float = 10.0
    arm_length: float = 80.0
    conflict_xy: tuple = (math.nan, math.nan)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.target_xy = np.asarray(self.target_xy, dtype=np.float64)
        self.target_dist_to_entry = np.asarray(self.target_dist_to_entry, dtype=np.float64)
        if self.states.ndim != 2 or self.states.shape[1] != N_STATE:
            raise InvalidArgument(f"states must be (T, {N_STATE})")
        if len(self.target_xy) < len(self.states):
            raise InvalidArgument("target_xy must cover every step")
        if self.direction not in DIRECTIONS or self.yield_label not in YIELDS:
            raise InvalidArgument("bad labels")

    @property
    def n_steps(self):
        return len(self.states)

    @property
    def direction_index(self):
        return DIRECTIONS.index(self.direction)

    @property
    def yield_index(self):
        return YIELDS.index(self.yield_label)

    def to_json(self):
        steps = [dict(zip(STATE_FIELDS, (float(v) for v in row))) for row in self.states]
        return {
            "pair_id": int(self.pair_id),
            "dt_s": float(self.dt),
            "steps": steps,
            "direction_label": self.direction,
            "yield_label": self.yield_label,
            "future_target_xy": self.target_xy.tolist(),
            "target_dist_to_entry_m": self.target_dist_to_entry.tolist(),
            "ego_direction": self.ego_direction,
            "lane_width_m": self.lane_width,
            "box_half_m": self.box_half,
            "arm_length_m": self.arm_length,
            "conflict_xy": [float(v) for v in self.conflict_xy],
            **self.extra,
        }

    @classmethod
    def from_json(cls, obj):
        known = {"pair_id", "dt_s", "steps", "direction_label", "yield_label", "future_target_xy",
                 "target_dist_to_entry_m", "ego_direction", "lane_width_m", "box_half_m",
                 "arm_length_m", "conflict_xy"}
        states = np.array([[s[k] for k in STATE_FIELDS] for s in obj["steps"]], dtype=np.float64)
        return cls(
            pair_id=obj["pair_id"], dt=obj["dt_s"], states=states,
            direction=obj["direction_label"], yield_label=obj["yield_label"],
            target_xy=np.array(obj["future_target_xy"], dtype=np.float64),
            target_dist_to_entry=np.array(obj["target_dist_to_entry_m"], dtype=np.float64),
            ego_direction=obj.get("ego_direction", "GS"),
            lane_width=obj.get("lane_width_m", 3.5), box_half=obj.get("box_half_m", 10.0),
            arm_length=obj.get("arm_length_m", 80.0),
            conflict_xy=tuple(obj.get("conflict_xy", (math.nan, math.nan))),
            extra={k: v for k, v in obj.items() if k not in known},
        )


def write_dataset(path, records, header=None):
    with open(path, "w") as fh:
        if header:
            fh.write(f"# {header}\n")
        for r in records:
            fh.write(json.dumps(r.to_json(), separators=(",", ":")) + "\n")


def read_dataset(path):
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                out.append(PairRecord.from_json(json.loads(line)))
    return out
