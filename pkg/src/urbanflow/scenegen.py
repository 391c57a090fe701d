"""Deterministic synthetic intersection worlds with exact ground truth.

A world is a set of interacting vehicle pairs driving lane-centre reference
paths through a four-arm intersection. Each pair is generated in a
canonical frame (ego approaching from the south, target from the north)
and then rotated by a multiple of 90 degrees into the world frame.
Rendering turns the world into jittered aerial frames together with the
exact stabilization homographies and vehicle detections.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage

from . import imaging
from .errors import InvalidArgument
from .predict.data import DIRECTIONS, YIELDS, PairRecord, pair_state, write_dataset
from .predict.reference import (
    IntersectionGeometry, conflict_point, reference_trajectory)

DT = 0.1
LATERAL_SIGMA = 0.15
ROAD, LANE_LINE, VEHICLE, BACKGROUND = 0.35, 0.9, 0.7, 0.1
_ROTATED_ARM = {  # arm reached by rotating the canonical frame k quarter turns counter-clockwise
    0: {"S": "S", "N": "N", "E": "E", "W": "W"},
    1: {"S": "E", "E": "N", "N": "W", "W": "S"},
    2: {"S": "N", "N": "S", "E": "W", "W": "E"},
    3: {"S": "W", "W": "N", "N": "E", "E": "S"},
}


@dataclass
class VehicleTrack:
    vehicle_id: int
    pair_id: int
    role: str
    approach: str
    direction: str
    length: float
    width: float
    t0: float
    xy: np.ndarray        # (K, 2) world metres at times t0 + k*DT
    vel: np.ndarray       # (K, 2) m/s
    s: np.ndarray         # (K,) progress along the reference path
    arc_start: float      # reference arc length of the stop line

    @property
    def times(self):
        return self.t0 + DT * np.arange(len(self.xy))

    @property
    def t_end(self):
        return self.t0 + DT * (len(self.xy) - 1)

    def state_at(self, t):
        """Interpolated (xy, heading, present) at times ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        u = (t - self.t0) / DT
        present = (u >= -1e-9) & (u <= len(self.xy) - 1 + 1e-9)
        u = np.clip(u, 0, len(self.xy) - 1)
        k = np.minimum(np.floor(u).astype(int), len(self.xy) - 2)
        a = (u - k)[:, None]
        xy = (1 - a) * self.xy[k] + a * self.xy[k + 1]
        v = (1 - a) * self.vel[k] + a * self.vel[k + 1]
        return xy, np.arctan2(v[:, 1], v[:, 0]), present


@dataclass
class PairInfo:
    pair_id: int
    ego_id: int
    target_id: int
    rotation: int
    ego_direction: str
    target_direction: str
    yield_label: str
    conflict_xy: np.ndarray      # canonical frame
    t_pass_ego: float            # world time at the conflict point
    t_pass_target: float
    canonical: dict = field(repr=False, default_factory=dict)


@dataclass
class World:
    seed: int
    geometry: IntersectionGeometry
    vehicles: list
    pairs: list
    scenery: np.ndarray = field(default_factory=lambda: np.zeros((0, 5)))

    def vehicle(self, vid):
        return self.vehicles[vid]

    @property
    def labels(self):
        return [(p.target_direction, p.yield_label) for p in self.pairs]


@dataclass
class JitterModel:
    max_translation: float = 10.0
    max_rotation_deg: float = 1.0
    max_perspective: float = 1e-4
    smoothing: float = 0.8

    @classmethod
    def none(cls):
        return cls(0.0, 0.0, 0.0)

    def sample(self, n, rng):
        """Low-pass filtered per-frame (tx, ty, theta, p1, p2); frame 0 is unjittered."""
        lim = np.array([self.max_translation, self.max_translation,
                        math.radians(self.max_rotation_deg), self.max_perspective, self.max_perspective])
        out = np.zeros((n, 5))
        for k in range(1, n):
            u = rng.uniform(-1.0, 1.0, 5) * lim
            out[k] = self.smoothing * out[k - 1] + (1 - self.smoothing) * u
        return out


def jitter_homography(params, width, height):
    """Frame-0 pixels -> jittered frame pixels, acting about the image centre."""
    tx, ty, th, p1, p2 = params
    c = imaging.translation((width - 1) / 2.0, (height - 1) / 2.0)
    m = np.array([[math.cos(th), -math.sin(th), tx], [math.sin(th), math.cos(th), ty], [p1, p2, 1.0]])
    return imaging.normalize_homography(c @ m @ np.linalg.inv(c))


# --------------------------------------------------------------------------
# vehicle kinematics

def _smooth_noise(rng, n, corr, sigma, coarse=10):
    """Stationary Gaussian-smoothed noise with standard deviation ``sigma``.

    ``corr`` is the kernel width in samples; the noise is drawn on a grid
    ``coarse`` times sparser and linearly interpolated.
    """
    if sigma == 0:
        return np.zeros(n)
    c = corr / coarse
    m = n // coarse + 2
    w = rng.normal(size=m + int(8 * c))
    f = ndimage.gaussian_filter1d(w, c, mode="wrap")[:m]
    f *= sigma * math.sqrt(2.0 * math.sqrt(math.pi) * c)
    return np.interp(np.arange(n) / coarse, np.arange(m), f)


@dataclass
class _Driver:
    cruise: float
    v_turn: float
    a_dec: float
    a_acc: float
    drift: float
    cut: float
    speed_noise: np.ndarray
    lat_noise: np.ndarray


def _draw_driver(rng, ref, grid_n):
    cruise = rng.uniform(8.0, 14.0)
    if ref.direction == "GS":
        v_turn = cruise
        drift = 0.0
        cut = 0.0
    else:
        v_turn = math.sqrt(rng.uniform(1.3, 2.1) * ref.radius)
        drift = rng.uniform(0.5, 0.9) * (1.0 if ref.direction == "TL" else -1.0)
        cut = rng.uniform(0.1, 0.6) * (1.0 if ref.direction == "TL" else -1.0)
    return _Driver(
        cruise=cruise, v_turn=min(v_turn, cruise), a_dec=rng.uniform(1.5, 2.5),
        a_acc=rng.uniform(1.0, 2.2), drift=drift, cut=cut,
        speed_noise=_smooth_noise(rng, grid_n, 400, 0.03),   # 400 samples = 20 m
        lat_noise=_smooth_noise(rng, grid_n, 200, LATERAL_SIGMA),
    )


_DS = 0.05


def _speed(ref, drv, s, dip=None):
    v = np.full_like(s, drv.cruise)
    if ref.direction != "GS":
        before = np.sqrt(drv.v_turn ** 2 + 2 * drv.a_dec * np.maximum(ref.arc_start - s, 0.0))
        after = np.sqrt(drv.v_turn ** 2 + 2 * drv.a_acc * np.maximum(s - ref.arc_end, 0.0))
        v = np.minimum(v, np.where(s < ref.arc_end, before, after))
    if dip is not None:
        s_stop, v_y, plateau = dip
        before = np.sqrt(v_y ** 2 + 2 * drv.a_dec * np.maximum(s_stop - s, 0.0))
        after = np.sqrt(v_y ** 2 + 2 * drv.a_acc * np.maximum(s - s_stop - plateau, 0.0))
        v = np.minimum(v, np.where(s < s_stop + plateau, before, after))
    return np.clip(v * (1.0 + drv.speed_noise[: len(s)]), 0.2, 19.5)


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _lateral(ref, drv, s):
    lat = drv.lat_noise[: len(s)].copy()
    if drv.drift:
        # smoothstep shapes keep the path tangent continuous
        ramp = _smoothstep((s - (ref.arc_start - 70.0)) / 40.0)
        u = np.clip((s - ref.arc_start) / (ref.arc_end - ref.arc_start), 0.0, 1.0)
        lat += drv.drift * np.where(s <= ref.arc_start, ramp, 1.0 - _smoothstep(u))
        lat += drv.cut * np.sin(math.pi * u) ** 2
    return lat


class _Motion:
    """Time parameterization of one driver along one reference path."""

    def __init__(self, ref, drv, dip=None):
        self.ref, self.drv, self.dip = ref, drv, dip
        self.s = np.arange(0.0, ref.length + _DS / 2, _DS)
        self.v = _speed(ref, drv, self.s, dip)
        inv = 1.0 / self.v
        self.t = np.concatenate([[0.0], np.cumsum(0.5 * (inv[1:] + inv[:-1]) * _DS)])
        self.lat = _lateral(ref, drv, self.s)

    def time_at(self, s):
        return float(np.interp(s, self.s, self.t))

    def position(self, s):
        p = self.ref.point_at(s)
        _, n = self.ref.frame_at(s)
        return p + np.interp(s, self.s, self.lat)[..., None] * n

    def sample(self):
        """Positions, velocities and progress at DT steps from t = 0."""
        times = np.arange(0.0, self.t[-1] + 1e-9, DT)
        s = np.interp(times, self.t, self.s)
        xy = self.position(s)
        h = 0.01
        dpds = (self.position(np.minimum(s + h, self.ref.length))
                - self.position(np.maximum(s - h, 0.0)))
        dpds /= np.linalg.norm(dpds, axis=1, keepdims=True)
        vel = dpds * np.interp(s, self.s, self.v)[:, None]
        return xy, vel, s


def _dip_for_delay(ref, drv, s_stop, s_conf, base_pass, delay):
    """Find a slow-down (s_stop, v_y, plateau) delaying the conflict passage by ``delay`` seconds."""
    grid = np.arange(0.0, s_conf + _DS / 2, _DS)

    def passage(v_y, plateau):
        inv = 1.0 / _speed(ref, drv, grid, (s_stop, v_y, plateau))
        return float(np.sum(0.5 * (inv[1:] + inv[:-1]) * _DS)) - base_pass

    v_hi = float(np.interp(s_stop, *_natural_speed(ref, drv)))
    lo, hi = 0.2, v_hi
    if passage(lo, 0.0) >= delay:
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            if passage(mid, 0.0) >= delay:
                lo = mid
            else:
                hi = mid
        return (s_stop, lo, 0.0)
    max_plateau = max(0.0, s_conf - s_stop - 1.0)
    a, b = 0.0, max_plateau
    if passage(0.2, b) < delay:
        return (s_stop, 0.2, b)
    for _ in range(40):
        mid = 0.5 * (a + b)
        if passage(0.2, mid) >= delay:
            b = mid
        else:
            a = mid
    return (s_stop, 0.2, b)


def _natural_speed(ref, drv):
    s = np.arange(0.0, ref.length + _DS / 2, _DS)
    return s, _speed(ref, drv, s)


def _rotate(xy, k):
    th = k * math.pi / 2
    c, s = math.cos(th), math.sin(th)
    r = np.array([[c, -s], [s, c]])
    return np.asarray(xy) @ r.T


@lru_cache(maxsize=None)
def _pair_paths(geom, ego_dir, target_dir):
    ref_e = reference_trajectory(geom, "S", ego_dir)
    ref_t = reference_trajectory(geom, "N", target_dir)
    return ref_e, ref_t, conflict_point(ref_e, ref_t)


def _make_pair(rng, geom, target_dir, ego_dir, yield_label, gap_range, lead_range=(0.3, 1.2)):
    ref_e, ref_t, hit = _pair_paths(geom, ego_dir, target_dir)
    if hit is None:
        raise RuntimeError(f"no conflict between {ego_dir} and {target_dir}")
    cxy, s_e, s_t = hit
    n_e = int(ref_e.length / _DS) + 2
    n_t = int(ref_t.length / _DS) + 2
    drv_e = _draw_driver(rng, ref_e, n_e)
    drv_t = _draw_driver(rng, ref_t, n_t)
    if ref_e.geometry.exit_arm("S", ego_dir) == ref_t.geometry.exit_arm("N", target_dir):
        # both leave on the same lane: the yielder follows and must not catch up
        lead, follow = (drv_e, drv_t) if yield_label == "ego-first" else (drv_t, drv_e)
        follow.cruise = min(follow.cruise, 0.9 * lead.cruise)
        follow.v_turn = min(follow.v_turn, follow.cruise)
        follow.a_acc = min(follow.a_acc, 0.9 * lead.a_acc)
    m_e, m_t = _Motion(ref_e, drv_e), _Motion(ref_t, drv_t)
    pass_e, pass_t = m_e.time_at(s_e), m_t.time_at(s_t)
    # start offsets on the DT grid: the vehicle that goes first would also
    # arrive first undisturbed, by a lead of ``lead_range`` seconds
    lead = rng.uniform(*lead_range) * (1.0 if yield_label == "ego-first" else -1.0)
    offset = round((pass_e - pass_t + lead) / DT) * DT
    t0_e, t0_t = (0.0, offset) if offset >= 0 else (-offset, 0.0)
    g_pass_e, g_pass_t = t0_e + pass_e, t0_t + pass_t
    gap = rng.uniform(*gap_range)
    if yield_label == "ego-first":
        ref_y, drv_y, s_y, base, t0_y, other = ref_t, drv_t, s_t, pass_t, t0_t, g_pass_e
    else:
        ref_y, drv_y, s_y, base, t0_y, other = ref_e, drv_e, s_e, pass_e, t0_e, g_pass_t
    delay = other + gap - (t0_y + base)
    if delay > 0:
        s_stop = min(s_y - 4.0, ref_y.arc_start)
        dip = _dip_for_delay(ref_y, drv_y, s_stop, s_y, base, delay)
        m_y = _Motion(ref_y, drv_y, dip)
        if yield_label == "ego-first":
            m_t = m_y
        else:
            m_e = m_y
    g_pass_e = t0_e + m_e.time_at(s_e)
    g_pass_t = t0_t + m_t.time_at(s_t)
    return dict(ref_e=ref_e, ref_t=ref_t, m_e=m_e, m_t=m_t, t0_e=t0_e, t0_t=t0_t,
                conflict=cxy, pass_e=g_pass_e, pass_t=g_pass_t)


def gen_world(seed, n_pairs, geometry=None, pair_spacing_s=None, rotate=None,
              yield_gap_s=(1.5, 3.0), min_separation_m=None, max_tries=120) -> World:
    """Generate ``n_pairs`` labelled interacting pairs.

    Target directions cycle through GS/TL/TR (then shuffled) so classes are
    balanced; the ego direction forms a GS-vs-TL or TL-vs-TR pair. Yield
    order alternates and the yielding vehicle is slowed so it reaches the
    conflict point ``yield_gap_s`` seconds after the other one.

    With ``pair_spacing_s`` the pairs share one timeline (pair k starts near
    ``k * pair_spacing_s``) and are rotated onto random arms, which is what
    rendering needs; ``min_separation_m`` then rejects placements where any
    two vehicles come closer than that. Without it every pair starts at t = 0
    in the canonical orientation.
    """
    if n_pairs < 1:
        raise InvalidArgument("n_pairs must be >= 1")
    geom = geometry or IntersectionGeometry()
    rng = np.random.default_rng(seed)
    if rotate is None:
        rotate = pair_spacing_s is not None
    order = rng.permutation(n_pairs)
    yield_order = rng.permutation(n_pairs)
    vehicles, pairs = [], []
    for i in range(n_pairs):
        target_dir = DIRECTIONS[order[i] % 3]
        ego_dir = ("GS" if rng.random() < 0.5 else "TR") if target_dir == "TL" else "TL"
        yield_label = YIELDS[yield_order[i] % 2]
        for attempt in range(max_tries):
            if attempt and min_separation_m is not None:
                # separation-constrained scenes trade label balance for placeability
                target_dir = DIRECTIONS[int(rng.integers(3))]
                ego_dir = ("GS" if rng.random() < 0.5 else "TR") if target_dir == "TL" else "TL"
                yield_label = YIELDS[int(rng.integers(2))]
            pair = _make_pair(rng, geom, target_dir, ego_dir, yield_label, yield_gap_s)
            rot = int(rng.integers(4)) if rotate else 0
            start = 0.0
            if pair_spacing_s is not None:
                # retries also slide the pair later until it fits between earlier ones
                start = i * pair_spacing_s + rng.uniform(0, 0.5 * pair_spacing_s) + 0.5 * attempt
                start = round(start / DT) * DT
            cand = []
            for role, ref, m, t0 in (("ego", pair["ref_e"], pair["m_e"], pair["t0_e"]),
                                     ("target", pair["ref_t"], pair["m_t"], pair["t0_t"])):
                xy, vel, s = m.sample()
                cand.append(VehicleTrack(
                    vehicle_id=len(vehicles) + len(cand), pair_id=i, role=role,
                    approach=_ROTATED_ARM[rot][ref.approach], direction=ref.direction,
                    length=float(rng.uniform(4.2, 5.0)), width=float(rng.uniform(1.7, 2.0)),
                    t0=start + t0, xy=_rotate(xy, rot), vel=_rotate(vel, rot), s=s,
                    arc_start=ref.arc_start))
            if min_separation_m is None or _min_separation(cand + vehicles) >= min_separation_m:
                break
        else:
            raise InvalidArgument(f"could not place pair {i} with separation {min_separation_m} m")
        vehicles.extend(cand)
        pairs.append(PairInfo(
            pair_id=i, ego_id=cand[0].vehicle_id, target_id=cand[1].vehicle_id, rotation=rot,
            ego_direction=ego_dir, target_direction=target_dir, yield_label=yield_label,
            conflict_xy=np.asarray(pair["conflict"]),
            t_pass_ego=start + pair["pass_e"], t_pass_target=start + pair["pass_t"],
            canonical=dict(ref_e=pair["ref_e"], ref_t=pair["ref_t"])))
    return World(seed, geom, vehicles, pairs, gen_scenery(seed, geom))


def _min_separation(vehicles):
    best = math.inf
    for a in range(len(vehicles)):
        va = vehicles[a]
        for b in range(a + 1, len(vehicles)):
            vb = vehicles[b]
            lo, hi = max(va.t0, vb.t0), min(va.t_end, vb.t_end)
            if hi < lo:
                continue
            ia = np.round((np.arange(lo, hi + 1e-9, DT) - va.t0) / DT).astype(int)
            ib = np.round((np.arange(lo, hi + 1e-9, DT) - vb.t0) / DT).astype(int)
            n = min(len(ia), len(ib))
            d = np.hypot(*(va.xy[ia[:n]] - vb.xy[ib[:n]]).T)
            best = min(best, float(d.min()))
    return best


def min_separation(world):
    return _min_separation(world.vehicles)


# --------------------------------------------------------------------------
# datasets

def pair_record(world: World, pair: PairInfo) -> PairRecord:
    """Canonical-frame PairRecord for one pair (ego from the south)."""
    ego, tgt = world.vehicles[pair.ego_id], world.vehicles[pair.target_id]
    k = (-pair.rotation) % 4
    lo, hi = max(ego.t0, tgt.t0), min(ego.t_end, tgt.t_end)
    ie = int(round((lo - ego.t0) / DT))
    it = int(round((lo - tgt.t0) / DT))
    n = int(round((hi - lo) / DT)) + 1
    e_xy, e_v = _rotate(ego.xy, k), _rotate(ego.vel, k)
    t_xy, t_v = _rotate(tgt.xy, k), _rotate(tgt.vel, k)
    states = pair_state(e_xy[ie:ie + n], e_v[ie:ie + n], t_xy[it:it + n], t_v[it:it + n])
    return PairRecord(
        pair_id=pair.pair_id, dt=DT, states=states, direction=pair.target_direction,
        yield_label=pair.yield_label, target_xy=t_xy[it:],
        target_dist_to_entry=tgt.arc_start - tgt.s[it:it + n],
        ego_direction=pair.ego_direction, lane_width=world.geometry.lane_width,
        box_half=world.geometry.box_half, arm_length=world.geometry.arm_length,
        conflict_xy=tuple(float(v) for v in pair.conflict_xy),
        extra={"t_pass_ego_s": pair.t_pass_ego - lo, "t_pass_target_s": pair.t_pass_target - lo},
    )


def gen_pairs_dataset(world: World, ratios=(0.7, 0.1, 0.2), out_dir=None, header=None):
    """Split the world's pairs into train/validation/test PairRecord lists.

    Splits are pair-disjoint and deterministic in the world seed. With
    ``out_dir`` the splits are also written as ``pairs_{split}.jsonl``.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidArgument("ratios must be three non-negative numbers summing to 1")
    n = len(world.pairs)
    counts = [int(round(r * n)) for r in ratios[:2]]
    counts.append(n - sum(counts))
    if counts[2] < 0 or any(r > 0 and c == 0 for r, c in zip(ratios, counts)):
        raise InvalidArgument(f"{n} pairs cannot fill splits with ratios {ratios}")
    perm = np.random.default_rng(world.seed + 7919).permutation(n)
    records = [pair_record(world, world.pairs[i]) for i in perm]
    splits = {
        "train": records[: counts[0]],
        "val": records[counts[0]: counts[0] + counts[1]],
        "test": records[counts[0] + counts[1]:],
    }
    if out_dir is not None:
        import os
        for name, recs in splits.items():
            write_dataset(os.path.join(out_dir, f"pairs_{name}.jsonl"), recs, header)
    return splits


# --------------------------------------------------------------------------
# rendering

@dataclass
class RenderResult:
    frames: list
    homographies: list           # ground truth, frame k -> frame 0
    detections: list             # dicts, one per visible vehicle per frame
    times: np.ndarray
    meters_per_pixel: float
    width: int
    height: int

    def world_to_px(self, xy):
        return world_to_px(xy, self.width, self.height, self.meters_per_pixel)


def world_to_px(xy, width, height, mpp):
    xy = np.asarray(xy, dtype=np.float64)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    return np.stack([cx + xy[..., 0] / mpp, cy - xy[..., 1] / mpp], axis=-1)


def px_to_world(px, width, height, mpp):
    px = np.asarray(px, dtype=np.float64)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    return np.stack([(px[..., 0] - cx) * mpp, (cy - px[..., 1]) * mpp], axis=-1)


def gen_scenery(seed, geometry: IntersectionGeometry, lot=12.0, setback=2.0):
    """Static off-road blocks (buildings, yards) as ``(cx, cy, half_x, half_y, intensity)`` rows.

    One block per ``lot`` x ``lot`` metre cell clear of the road, with an
    optional smaller block on top, so the frames carry texture everywhere.
    """
    rng = np.random.default_rng([seed, 1])
    clear = geometry.lane_width + setback
    edges = np.arange(-geometry.arm_length, geometry.arm_length, lot)
    rows = []
    for x0 in edges:
        for y0 in edges:
            x1, y1 = x0 + lot, y0 + lot
            if (x0 < clear and x1 > -clear) or (y0 < clear and y1 > -clear):
                continue
            hx, hy = rng.uniform(0.25, 0.45, 2) * lot
            cx = x0 + lot / 2 + rng.uniform(-1, 1) * (lot / 2 - hx)
            cy = y0 + lot / 2 + rng.uniform(-1, 1) * (lot / 2 - hy)
            rows.append((cx, cy, hx, hy, rng.uniform(0.18, 0.62)))
            if rng.random() < 0.6:
                sx, sy = rng.uniform(0.2, 0.5, 2) * (hx, hy)
                rows.append((cx + rng.uniform(-0.4, 0.4) * hx, cy + rng.uniform(-0.4, 0.4) * hy,
                             sx, sy, rng.uniform(0.15, 0.8)))
    return np.array(rows).reshape(-1, 5)


def road_intensity(x, y, geom: IntersectionGeometry, scenery=None, base=None):
    """Static scene (scenery, road band, markings) at world coordinates in metres.

    ``base`` optionally supplies precomputed off-road intensities in place
    of background plus ``scenery``.
    """
    hw, b, L = geom.lane_width, geom.box_half, geom.arm_length
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ax, ay = np.abs(x), np.abs(y)
    out = np.full(np.shape(x), BACKGROUND) if base is None else np.array(base, dtype=np.float64)
    if scenery is not None and base is None:
        for cx, cy, hx, hy, val in scenery:
            out[(np.abs(x - cx) <= hx) & (np.abs(y - cy) <= hy)] = val
    on_arm = ((ax <= hw) & (ay <= L)) | ((ay <= hw) & (ax <= L))
    in_box = (ax <= b) & (ay <= b)
    fillet = (ax > hw) & (ay > hw) & (np.hypot(b - ax, b - ay) < b - hw)
    road = on_arm | (in_box & ~fillet)
    out[road] = ROAD
    lw = 0.3
    for along, across in ((ay, ax), (ax, ay)):       # N-S arms, then E-W arms
        arm = (along > b) & (along <= L) & (across <= hw)
        dashed = (across <= lw / 2) & (np.mod(along - b, 6.0) < 3.0)
        edge = (across >= hw - lw) & (across <= hw)
        out[arm & (dashed | edge)] = LANE_LINE
        # stripes of the crossing, just outside the stop line
        cross = (along > b + 1.5) & (along < b + 4.5) & (np.mod(across, 1.2) < 0.6) & (across < hw - 0.5)
        out[arm & cross] = LANE_LINE
    # stop lines on the incoming (right-hand) half of every arm
    sl = 0.4
    out[(y < -b) & (y > -b - sl) & (x > 0) & (x < hw)] = LANE_LINE
    out[(y > b) & (y < b + sl) & (x < 0) & (x > -hw)] = LANE_LINE
    out[(x > b) & (x < b + sl) & (y > 0) & (y < hw)] = LANE_LINE
    out[(x < -b) & (x > -b - sl) & (y < 0) & (y > -hw)] = LANE_LINE
    return out


class _StaticLayer:
    """Anti-aliased raster of the static scene, sampled bilinearly in world metres."""

    def __init__(self, world, half_extent, res, supersample=2):
        self.half, self.res = half_extent, res
        n = int(math.ceil(2 * half_extent / res)) + 1
        off = (np.arange(supersample) + 0.5) / supersample - 0.5
        acc = np.zeros((n, n))
        coords = -half_extent + res * np.arange(n)
        for dy in off:
            for dx in off:
                xs, ys = coords + dx * res, coords + dy * res
                base = np.full((n, n), BACKGROUND)
                for cx, cy, hx, hy, val in world.scenery:   # axis-aligned: paint by slicing
                    c0, c1 = np.searchsorted(xs, cx - hx), np.searchsorted(xs, cx + hx, side="right")
                    r0, r1 = np.searchsorted(ys, cy - hy), np.searchsorted(ys, cy + hy, side="right")
                    base[r0:r1, c0:c1] = val
                xx, yy = np.meshgrid(xs, ys)
                acc += road_intensity(xx, yy, world.geometry, base=base)
        self.raster = acc / supersample ** 2     # [row = y index, col = x index]

    def sample(self, x, y):
        col = (x + self.half) / self.res
        row = (y + self.half) / self.res
        return ndimage.map_coordinates(self.raster, [row, col], order=1, mode="nearest")


def render_frames(world: World, jitter: JitterModel, dims=(320, 320), meters_per_pixel=0.25,
                  n_frames=200, fps=30.0, t_start=0.0, seed=None, detection_noise_m=0.0,
                  supersample=3, blur=0.5):
    """Render jittered aerial frames with exact ground truth.

    Each frame shows the world at ``t_start + k / fps`` seen through jitter
    homography J_k (frame 0 is unjittered); the ground-truth stabilization
    homography for frame k is J_k^-1. Detections give exact vehicle centres
    in frame-k pixels, plus optional Gaussian noise of ``detection_noise_m``.
    """
    width, height = dims
    if width < 256 or height < 256:
        raise InvalidArgument("frames must be at least 256x256")
    rng = np.random.default_rng(world.seed + 101 if seed is None else seed)
    params = jitter.sample(n_frames, rng)
    noise_rng = np.random.default_rng(rng.integers(2 ** 32))
    mpp = meters_per_pixel
    half = (0.5 * math.hypot(width, height) * 1.1 + 2 * jitter.max_translation + 4) * mpp
    layer = _StaticLayer(world, half, mpp / supersample)
    times = t_start + np.arange(n_frames) / fps
    ss = supersample * supersample
    off = (np.arange(supersample) + 0.5) / supersample - 0.5
    oy, ox = np.meshgrid(off, off, indexing="ij")
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    sub = np.stack([(xs[..., None] + ox.ravel()), (ys[..., None] + oy.ravel())], axis=-1)  # (H, W, ss, 2)

    frames, homs, dets = [], [], []
    for k, t in enumerate(times):
        jk = jitter_homography(params[k], width, height)
        jinv = imaging.invert_homography(jk)
        w = px_to_world(imaging.apply_homography(jinv, sub), width, height, mpp)
        val = layer.sample(w[..., 0].ravel(), w[..., 1].ravel()).reshape(height, width, ss)
        for v in world.vehicles:
            if not (v.t0 - 1e-9 <= t <= v.t_end + 1e-9):
                continue
            xy, hd, _ = v.state_at(t)
            c, s = math.cos(hd[0]), math.sin(hd[0])
            corners = np.array([[sx * v.length / 2, sy * v.width / 2]
                                for sx in (-1, 1) for sy in (-1, 1)]) @ np.array([[c, s], [-s, c]])
            cpx = imaging.apply_homography(jk, world_to_px(xy[0] + corners, width, height, mpp))
            c0 = max(int(math.floor(cpx[:, 0].min())) - 1, 0)
            c1 = min(int(math.ceil(cpx[:, 0].max())) + 2, width)
            r0 = max(int(math.floor(cpx[:, 1].min())) - 1, 0)
            r1 = min(int(math.ceil(cpx[:, 1].max())) + 2, height)
            if c0 < c1 and r0 < r1:
                box = w[r0:r1, c0:c1]
                dx, dy = box[..., 0] - xy[0, 0], box[..., 1] - xy[0, 1]
                inside = (np.abs(dx * c + dy * s) <= v.length / 2) & (np.abs(-dx * s + dy * c) <= v.width / 2)
                val[r0:r1, c0:c1][inside] = VEHICLE
            centre = imaging.apply_homography(jk, world_to_px(xy, width, height, mpp))[0]
            if 0 <= centre[0] <= width - 1 and 0 <= centre[1] <= height - 1:
                off_frame = bool(np.any((cpx < 0) | (cpx > [width - 1, height - 1])))
                meas = centre + (noise_rng.normal(0.0, detection_noise_m / mpp, 2)
                                 if detection_noise_m > 0 else 0.0)
                dets.append({"frame": k, "x_px": float(meas[0]), "y_px": float(meas[1]),
                             "length_m": v.length, "width_m": v.width, "score": 1.0,
                             "vehicle_id": v.vehicle_id, "off_frame": off_frame})
        img = val.mean(axis=2)
        if blur > 0:
            img = ndimage.gaussian_filter(img, blur)
        frames.append(np.clip(img, 0.0, 1.0))
        homs.append(jinv)
    return RenderResult(frames, homs, dets, times, mpp, width, height)


def road_geometry_json(world: World, width, height, mpp, extend_m=None):
    """Road frame for the north-south road: centreline along x = 0 heading north."""
    geom = world.geometry
    L = extend_m if extend_m is not None else geom.arm_length + 20.0
    line = world_to_px(np.array([[0.0, -L], [0.0, L]]), width, height, mpp)
    return {
        "centerline_px": line.tolist(),
        "meters_per_pixel": mpp,
        "lane_width_m": geom.lane_width,
        "lanes_per_side": 1,
        "section_boundaries_m": [L - geom.box_half, L + geom.box_half],
        "intersection_center_px": world_to_px(np.zeros(2), width, height, mpp).tolist(),
    }


def write_detections(path, detections, header=None):
    with open(path, "w") as fh:
        if header:
            fh.write(f"# {header}\n")
        for d in detections:
            fh.write(json.dumps(d, separators=(",", ":")) + "\n")
