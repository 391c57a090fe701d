"""Four-arm intersection geometry and lane-centre reference trajectories.

Coordinates are metres with the intersection centre at (0, 0), x east,
y north, right-hand traffic. An *arm* is named by the compass side a
vehicle approaches from: a vehicle on arm ``"S"`` drives north.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidGeometry

DIRECTIONS = ("GS", "TL", "TR")
ARMS = ("N", "E", "S", "W")
# travel heading when approaching from each arm
APPROACH_HEADING = {"S": math.pi / 2, "N": -math.pi / 2, "E": math.pi, "W": 0.0}
_LEFT_OF = {"S": "W", "W": "N", "N": "E", "E": "S"}   # exit arm of a left turn
_RIGHT_OF = {"S": "E", "E": "N", "N": "W", "W": "S"}
_OPPOSITE = {"S": "N", "N": "S", "E": "W", "W": "E"}
SPACING = 0.5


@dataclass(frozen=True)
class IntersectionGeometry:
    lane_width: float = 3.5
    box_half: float = 10.0      # centre to stop line, metres
    arm_length: float = 80.0    # centre to the far end of each arm
    arms: tuple = ARMS

    def __post_init__(self):
        if self.lane_width <= 0 or self.box_half <= self.lane_width or self.arm_length <= self.box_half:
            raise InvalidGeometry("need 0 < lane_width < box_half < arm_length")

    def exit_arm(self, approach, direction):
        if direction == "GS":
            return _OPPOSITE[approach]
        if direction == "TL":
            return _LEFT_OF[approach]
        if direction == "TR":
            return _RIGHT_OF[approach]
        raise InvalidGeometry(f"unknown direction {direction!r}")


def _rot(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


class ReferenceTrajectory:
    """Piecewise straight/arc lane-centre path with arc-length access.

    ``points`` samples the path every 0.5 m from its start; the final
    point is the path end. ``arc_start``/``arc_end`` are the arc lengths of
    the junctions between the incoming straight, the turn (or box
    crossing) and the outgoing straight.
    """

    def __init__(self, direction, approach, geometry, segments):
        self.direction = direction
        self.approach = approach
        self.geometry = geometry
        self._segs = segments
        lengths = [seg[-1] for seg in segments]
        self._starts = np.concatenate([[0.0], np.cumsum(lengths)])
        self.length = float(self._starts[-1])
        self.arc_start = float(self._starts[1])
        self.arc_end = float(self._starts[2])
        s = np.arange(0.0, self.length, SPACING)
        if self.length - s[-1] > 1e-9:
            s = np.append(s, self.length)
        self.s = s
        self.points = self.point_at(s)
        dense = np.linspace(0.0, self.length, int(self.length / 0.05) + 1)
        self._dense_s = dense
        self._dense = self.point_at(dense)

    def _locate(self, s):
        s = np.asarray(s, dtype=np.float64)
        k = np.clip(np.searchsorted(self._starts, s, side="right") - 1, 0, len(self._segs) - 1)
        return k, s - self._starts[k]

    def point_at(self, s):
        s = np.asarray(s, dtype=np.float64)
        k, u = self._locate(s)
        out = np.empty(s.shape + (2,))
        for i, seg in enumerate(self._segs):
            sel = k == i
            if not np.any(sel):
                continue
            if seg[0] == "line":
                _, p0, heading, _ = seg
                d = np.array([math.cos(heading), math.sin(heading)])
                out[sel] = p0 + u[sel][..., None] * d
            else:
                _, centre, radius, a0, sign, _ = seg
                ang = a0 + sign * u[sel] / radius
                out[sel] = centre + radius * np.stack([np.cos(ang), np.sin(ang)], axis=-1)
        return out

    def heading_at(self, s):
        s = np.asarray(s, dtype=np.float64)
        k, u = self._locate(s)
        out = np.empty(s.shape)
        for i, seg in enumerate(self._segs):
            sel = k == i
            if not np.any(sel):
                continue
            if seg[0] == "line":
                out[sel] = seg[2]
            else:
                _, _, radius, a0, sign, _ = seg
                out[sel] = a0 + sign * u[sel] / radius + sign * math.pi / 2
        return np.arctan2(np.sin(out), np.cos(out))

    def frame_at(self, s):
        """Unit tangent and left normal at arc length ``s``."""
        h = self.heading_at(s)
        t = np.stack([np.cos(h), np.sin(h)], axis=-1)
        n = np.stack([-np.sin(h), np.cos(h)], axis=-1)
        return t, n

    def curvature_at(self, s):
        s = np.asarray(s, dtype=np.float64)
        k, _ = self._locate(s)
        out = np.zeros(s.shape)
        for i, seg in enumerate(self._segs):
            if seg[0] == "arc":
                out[k == i] = seg[4] / seg[2]
        return out

    def project(self, p):
        """Arc length of the closest dense sample to each point in ``p`` (N, 2)."""
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        d = ((p[:, None, :] - self._dense[None, :, :]) ** 2).sum(-1)
        return self._dense_s[np.argmin(d, axis=1)]

    @property
    def radius(self):
        seg = self._segs[1]
        return seg[2] if seg[0] == "arc" else math.inf


def reference_trajectory(geom: IntersectionGeometry, approach: str, direction: str) -> ReferenceTrajectory:
    """Lane-centre path for a vehicle entering from ``approach`` with the given direction.

    Straight incoming segment to the stop line, then either a straight
    crossing (GS) or a quarter circle joining the incoming and outgoing lane
    centres (TL/TR), then the outgoing straight to the end of the exit arm.
    """
    if approach not in ARMS:
        raise InvalidGeometry(f"unknown arm {approach!r}")
    if direction not in DIRECTIONS:
        raise InvalidGeometry(f"unknown direction {direction!r}")
    if approach not in geom.arms:
        raise InvalidGeometry(f"intersection has no arm {approach!r}")
    exit_arm = geom.exit_arm(approach, direction)
    if exit_arm not in geom.arms:
        raise InvalidGeometry(f"{direction} from {approach} needs missing arm {exit_arm!r}")

    w2, b, L = geom.lane_width / 2.0, geom.box_half, geom.arm_length
    rot_angle = APPROACH_HEADING[approach] - math.pi / 2
    r = _rot(rot_angle)

    def line(p0, heading, length):
        return ("line", r @ np.asarray(p0, float), heading + rot_angle, float(length))

    def arc(centre, radius, a0, sign):
        return ("arc", r @ np.asarray(centre, float), float(radius), a0 + rot_angle, sign,
                radius * math.pi / 2)

    north, east, west = math.pi / 2, 0.0, math.pi
    segs = [line((w2, -L), north, L - b)]
    if direction == "GS":
        segs += [line((w2, -b), north, 2 * b), line((w2, b), north, L - b)]
    elif direction == "TR":
        rad = b - w2
        segs += [arc((b, -b), rad, math.pi, -1.0), line((b, -w2), east, L - b)]
    else:
        rad = b + w2
        segs += [arc((-b, -b), rad, 0.0, 1.0), line((-b, w2), west, L - b)]
    return ReferenceTrajectory(direction, approach, geom, segs)


def conflict_point(ref_a: ReferenceTrajectory, ref_b: ReferenceTrajectory, tol=0.5):
    """First point along ``ref_a`` within ``tol`` metres of ``ref_b``.

    Returns ``(point, s_a, s_b)`` or None when the paths never come that close.
    """
    pa, sa = ref_a._dense, ref_a._dense_s
    pb, sb = ref_b._dense, ref_b._dense_s
    near = np.abs(pa).max(axis=1) <= ref_a.geometry.box_half + 5.0
    idx = np.nonzero(near)[0]
    best = None
    for chunk in np.array_split(idx, max(1, len(idx) // 200)):
        d = np.sqrt(((pa[chunk, None, :] - pb[None, :, :]) ** 2).sum(-1))
        hit = np.nonzero(d.min(axis=1) <= tol)[0]
        if len(hit):
            i = chunk[hit[0]]
            j = int(np.argmin(d[hit[0]]))
            best = (pa[i].copy(), float(sa[i]), float(sb[j]))
            break
    return best
