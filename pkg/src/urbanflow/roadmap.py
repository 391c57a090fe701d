"""Road-aligned coordinates: arc length along a centerline plus signed lateral offset.

The centerline is the marking separating the two travel directions, given
as an image-space polyline. A point's road position is ``x`` (metres along
the centerline from its first vertex) and ``y`` (metres to the left of the
direction of travel along the centerline, as seen on screen).

Offsets are measured along vertex miter normals interpolated linearly over
each segment. Within a segment the lateral coordinate is then exactly the
perpendicular distance to that segment, and the map from road to image
coordinates is a bijection while the offset stays inside the fan of miter
normals, i.e. short of the local curvature radius on the concave side.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import imaging
from .errors import AmbiguousProjection, InvalidArgument, InvalidGeometry, OutOfRange


@dataclass(frozen=True)
class RoadPosition:
    x: float
    y: float
    section_id: int = 0
    lane_id: int = 0
    off_road: bool = False


class LaneSection(NamedTuple):
    section_id: int
    lane_id: int
    off_road: bool


@dataclass(frozen=True)
class VehicleRecord:
    track_id: int
    frame: int
    road_pos: RoadPosition
    length: float
    width: float

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise InvalidArgument("vehicle length and width must be positive")


class RoadFrame:
    """Immutable centerline frame; build with :func:`build_road_frame`."""

    def __init__(self, centerline_px, meters_per_pixel, lane_width, lanes_per_side,
                 section_boundaries, intersection_center_px=None):
        pts = np.array(centerline_px, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise InvalidGeometry("centerline needs at least two (x, y) vertices")
        if not np.all(np.isfinite(pts)):
            raise InvalidGeometry("centerline vertices must be finite")
        d = np.diff(pts, axis=0)
        seg_len = np.hypot(d[:, 0], d[:, 1])
        if np.any(seg_len <= 1e-12):
            raise InvalidGeometry("duplicate consecutive centerline vertices")
        if not meters_per_pixel > 0:
            raise InvalidGeometry("meters_per_pixel must be positive")
        if not lane_width > 0:
            raise InvalidGeometry("lane_width must be positive")
        if int(lanes_per_side) < 1:
            raise InvalidGeometry("lanes_per_side must be >= 1")
        bounds = np.array(section_boundaries, dtype=np.float64).reshape(-1)
        if np.any(np.diff(bounds) <= 0):
            raise InvalidGeometry("section boundaries must be strictly increasing")

        t = d / seg_len[:, None]
        n = np.column_stack([t[:, 1], -t[:, 0]])      # left of travel on screen (rows grow downward)
        miter = np.empty((len(pts), 2))
        miter[0], miter[-1] = n[0], n[-1]
        if len(pts) > 2:
            cos = np.einsum("ij,ij->i", n[:-1], n[1:])
            if np.any(cos <= -1 + 1e-9):
                raise InvalidGeometry("centerline reverses direction at a vertex")
            miter[1:-1] = (n[:-1] + n[1:]) / (1.0 + cos)[:, None]

        self.vertices = pts
        self.meters_per_pixel = float(meters_per_pixel)
        self.lane_width = float(lane_width)
        self.lanes_per_side = int(lanes_per_side)
        self.section_boundaries = bounds
        self.intersection_center_px = (None if intersection_center_px is None
                                       else np.asarray(intersection_center_px, dtype=np.float64))
        self._d, self._len, self._t, self._n, self._miter = d, seg_len, t, n, miter
        self._start = np.concatenate([[0.0], np.cumsum(seg_len)])   # pixels
        # tangential components of the bounding miters of each segment
        self._a = np.einsum("ij,ij->i", t, miter[:-1])
        self._b = np.einsum("ij,ij->i", t, miter[1:])
        for arr in (self.vertices, self.section_boundaries, self._start, self._miter):
            arr.setflags(write=False)

    @property
    def cumulative_px(self):
        return self._start

    @property
    def length_m(self) -> float:
        return float(self._start[-1] * self.meters_per_pixel)

    @property
    def n_sections(self) -> int:
        return len(self.section_boundaries) + 1

    # ------------------------------------------------------------------
    def to_road(self, points_px):
        """Vectorized projection: returns ``(x_m, y_m, ambiguous)`` arrays."""
        q = np.atleast_2d(np.asarray(points_px, dtype=np.float64))
        if q.shape[-1] != 2 or not np.all(np.isfinite(q)):
            raise InvalidArgument("points must be finite (x, y) pairs")
        r = q[:, None, :] - self.vertices[None, :-1, :]                 # (P, K, 2)
        y = np.einsum("pkj,kj->pk", r, self._n)
        rt = np.einsum("pkj,kj->pk", r, self._t)
        den = self._len + y * (self._b - self._a)
        with np.errstate(divide="ignore", invalid="ignore"):
            u = (rt - y * self._a) / den
        k_last = len(self._len) - 1
        lo = np.where(np.arange(k_last + 1) == 0, -np.inf, 0.0)
        hi = np.where(np.arange(k_last + 1) == k_last, np.inf, 1.0)
        tol = 1e-12
        ok = (den > 0) & (u >= lo - tol) & (u <= hi + tol)
        xs = self._start[:-1] + u * self._len
        ay = np.where(ok, np.abs(y), np.inf)
        best = ay.min(axis=1, keepdims=True)
        # smallest |y|, then smallest x
        tie = ok & (ay <= best + 1e-9 * np.maximum(1.0, best))
        xs_tie = np.where(tie, xs, np.inf)
        k = np.argmin(xs_tie, axis=1)
        rows = np.arange(len(q))
        ambiguous = ~np.isfinite(best[:, 0])
        x_px = np.where(ambiguous, np.nan, xs[rows, k])
        y_px = np.where(ambiguous, np.nan, y[rows, k])
        s = self.meters_per_pixel
        return x_px * s, y_px * s, ambiguous

    def to_image(self, x_m, y_m):
        """Vectorized inverse; ``x_m`` must lie within [0, length]."""
        x = np.atleast_1d(np.asarray(x_m, dtype=np.float64)) / self.meters_per_pixel
        y = np.atleast_1d(np.asarray(y_m, dtype=np.float64)) / self.meters_per_pixel
        total = self._start[-1]
        if np.any(~np.isfinite(x)) or np.any(x < -1e-9) or np.any(x > total * (1 + 1e-12) + 1e-9):
            raise OutOfRange(f"x must lie in [0, {self.length_m}] m")
        k = np.clip(np.searchsorted(self._start, x, side="right") - 1, 0, len(self._len) - 1)
        u = (x - self._start[k]) / self._len[k]
        w = (1 - u)[:, None] * self._miter[k] + u[:, None] * self._miter[k + 1]
        return self.vertices[k] + u[:, None] * self._d[k] + y[:, None] * w


def build_road_frame(centerline_px, meters_per_pixel, lane_width=3.5, lanes_per_side=1,
                     section_boundaries=(), intersection_center_px=None) -> RoadFrame:
    return RoadFrame(centerline_px, meters_per_pixel, lane_width, lanes_per_side,
                     section_boundaries, intersection_center_px)


def assign_lane_section(x, y, rf: RoadFrame) -> LaneSection:
    """Section = number of boundaries at or before ``x``; lane = signed ceil(|y| / lane_width)."""
    section = int(np.searchsorted(rf.section_boundaries, x, side="right"))
    if abs(y) > rf.lanes_per_side * rf.lane_width:
        return LaneSection(section, 0, True)
    lane = int(math.ceil(abs(y) / rf.lane_width))
    return LaneSection(section, lane if y >= 0 else -lane, False)


def image_to_road(p_px, rf: RoadFrame) -> RoadPosition:
    x, y, amb = rf.to_road(np.asarray(p_px, dtype=np.float64).reshape(1, 2))
    if amb[0]:
        raise AmbiguousProjection(f"point {tuple(p_px)} lies beyond the local curvature radius")
    x, y = float(x[0]), float(y[0])
    sec = assign_lane_section(x, y, rf)
    return RoadPosition(x, y, sec.section_id, sec.lane_id, sec.off_road)


def road_to_image(rp, rf: RoadFrame) -> np.ndarray:
    """Pixel point at road position ``rp`` (a RoadPosition or an ``(x, y)`` pair)."""
    x, y = (rp.x, rp.y) if isinstance(rp, RoadPosition) else rp
    return rf.to_image([x], [y])[0]


# --------------------------------------------------------------------------
# road masks

def _segments_cross(p1, p2, p3, p4):
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    def on_seg(a, b, c):
        return (min(a[0], b[0]) - 1e-12 <= c[0] <= max(a[0], b[0]) + 1e-12
                and min(a[1], b[1]) - 1e-12 <= c[1] <= max(a[1], b[1]) + 1e-12)

    d1, d2 = orient(p3, p4, p1), orient(p3, p4, p2)
    d3, d4 = orient(p1, p2, p3), orient(p1, p2, p4)
    if d1 * d2 < 0 and d3 * d4 < 0:
        return True
    return ((d1 == 0 and on_seg(p3, p4, p1)) or (d2 == 0 and on_seg(p3, p4, p2))
            or (d3 == 0 and on_seg(p1, p2, p3)) or (d4 == 0 and on_seg(p1, p2, p4)))


def is_simple_polygon(poly) -> bool:
    pts = np.asarray(poly, dtype=np.float64)
    n = len(pts)
    if n < 3:
        return False
    edges = [(pts[i], pts[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue                       # neighbours share a vertex
            if _segments_cross(*edges[i], *edges[j]):
                return False
    return True


def polygon_mask(poly, shape) -> np.ndarray:
    """Pixels whose centre lies inside or on the boundary of ``poly``."""
    rows, cols = shape
    pts = np.asarray(poly, dtype=np.float64)
    ys, xs = np.mgrid[0:rows, 0:cols].astype(np.float64)
    inside = np.zeros(shape, dtype=bool)
    boundary = np.zeros(shape, dtype=bool)
    for (x0, y0), (x1, y1) in zip(pts, np.roll(pts, -1, axis=0)):
        crosses = (y0 > ys) != (y1 > ys)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = x0 + (ys - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (xs < x_at)
        ex, ey = x1 - x0, y1 - y0
        ll = ex * ex + ey * ey
        tpar = np.clip(((xs - x0) * ex + (ys - y0) * ey) / ll, 0.0, 1.0)
        boundary |= np.hypot(xs - x0 - tpar * ex, ys - y0 - tpar * ey) <= 1e-9
    return inside | boundary


def apply_road_mask(img, mask_polygons):
    """Zero every pixel outside all polygons; polygons must be simple."""
    img = np.asarray(img, dtype=np.float64)
    keep = np.zeros(img.shape, dtype=bool)
    for poly in mask_polygons:
        if not is_simple_polygon(poly):
            raise InvalidGeometry("mask polygon must be simple (non-self-intersecting)")
        keep |= polygon_mask(poly, img.shape)
    return np.where(keep, img, 0.0)


# --------------------------------------------------------------------------
# files

def road_frame_from_json(obj) -> RoadFrame:
    return build_road_frame(
        obj["centerline_px"], obj["meters_per_pixel"], obj.get("lane_width_m", 3.5),
        obj.get("lanes_per_side", 1), obj.get("section_boundaries_m", ()),
        obj.get("intersection_center_px"))


def road_frame_to_json(rf: RoadFrame) -> dict:
    out = {
        "centerline_px": rf.vertices.tolist(),
        "meters_per_pixel": rf.meters_per_pixel,
        "lane_width_m": rf.lane_width,
        "lanes_per_side": rf.lanes_per_side,
        "section_boundaries_m": rf.section_boundaries.tolist(),
    }
    if rf.intersection_center_px is not None:
        out["intersection_center_px"] = rf.intersection_center_px.tolist()
    return out


def read_road_geometry(path) -> RoadFrame:
    with open(path) as fh:
        return road_frame_from_json(json.load(fh))


def write_road_geometry(path, rf_or_obj) -> None:
    obj = road_frame_to_json(rf_or_obj) if isinstance(rf_or_obj, RoadFrame) else rf_or_obj
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")


RECORD_COLUMNS = ("track_id", "frame", "x_m", "y_m", "section_id", "lane_id", "length_m", "width_m")


def write_vehicle_records(path, records, header=None, extra_columns=()):
    """CSV of VehicleRecords; ``extra_columns`` names attributes read from ``extra`` dicts.

    ``records`` holds VehicleRecord objects or ``(VehicleRecord, extra)`` pairs.
    """
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS + tuple(extra_columns))
        for item in records:
            rec, extra = item if isinstance(item, tuple) else (item, {})
            p = rec.road_pos
            w.writerow([rec.track_id, rec.frame, repr(float(p.x)), repr(float(p.y)), p.section_id,
                        p.lane_id, repr(float(rec.length)), repr(float(rec.width))]
                       + [repr(float(extra[c])) for c in extra_columns])


def read_vehicle_records(path):
    """Rows of a vehicle-record CSV as dicts of numbers (extra columns included)."""
    out = []
    with open(path, newline="") as fh:
        lines = (ln for ln in fh if not ln.startswith("#"))
        for row in csv.DictReader(lines):
            out.append({k: (int(v) if k in ("track_id", "frame", "section_id", "lane_id") else float(v))
                        for k, v in row.items()})
    return out


def transform_points(points_px, homography, rf: RoadFrame):
    """Stabilize frame pixels with ``homography`` then project them to road coordinates."""
    return rf.to_road(imaging.apply_homography(homography, np.asarray(points_px, dtype=np.float64)))
