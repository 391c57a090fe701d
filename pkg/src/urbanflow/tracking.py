"""Constant-velocity Kalman tracking of vehicles in road coordinates, with RTS smoothing."""
from __future__ import annotations

import csv
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InvalidArgument, InvalidInput, NumericalFailure


@dataclass(frozen=True)
class KalmanModel:
    F: np.ndarray
    H: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    dt: float

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidArgument("dt must be positive")
        for name in ("Q", "R"):
            m = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.allclose(m, m.T, atol=1e-12):
                raise InvalidArgument(f"{name} must be symmetric")
            if np.linalg.eigvalsh(m).min() < -1e-12:
                raise InvalidArgument(f"{name} must be positive semi-definite")
        if np.linalg.eigvalsh(np.asarray(self.R, dtype=np.float64)).min() <= 0:
            raise InvalidArgument("R must be positive definite")

    @classmethod
    def constant_velocity(cls, dt=1.0 / 30.0, accel_var=2.0, meas_std=0.2):
        """State [px, py, vx, vy]; discrete white-noise acceleration process noise."""
        f = np.eye(4)
        f[0, 2] = f[1, 3] = dt
        h = np.zeros((2, 4))
        h[0, 0] = h[1, 1] = 1.0
        g = np.array([[0.5 * dt * dt, 0.0], [0.0, 0.5 * dt * dt], [dt, 0.0], [0.0, dt]])
        q = accel_var * g @ g.T
        r = (meas_std ** 2) * np.eye(2)
        return cls(f, h, q, r, float(dt))


class KalmanState(NamedTuple):
    x: np.ndarray
    P: np.ndarray


def _symmetrize(p):
    return 0.5 * (p + p.T)


def kf_predict(state: KalmanState, model: KalmanModel) -> KalmanState:
    x = model.F @ state.x
    p = _symmetrize(model.F @ state.P @ model.F.T + model.Q)
    return KalmanState(x, p)


def kf_update(state: KalmanState, model: KalmanModel, z):
    """Measurement update; returns the posterior, the innovation and its covariance."""
    z = np.asarray(z, dtype=np.float64)
    h = model.H
    nu = z - h @ state.x
    s = h @ state.P @ h.T + model.R
    try:
        k = np.linalg.solve(s, h @ state.P).T     # P H^T S^-1 (S symmetric)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure("innovation covariance is singular") from exc
    x = state.x + k @ nu
    ikh = np.eye(len(state.x)) - k @ h
    p = _symmetrize(ikh @ state.P @ ikh.T + k @ model.R @ k.T)
    return KalmanState(x, p), nu, s


def kf_step(state: KalmanState, model: KalmanModel, z=None) -> KalmanState:
    """Predict one step, then update with ``z`` if given."""
    pred = kf_predict(state, model)
    if z is None:
        return pred
    return kf_update(pred, model, z)[0]


# --------------------------------------------------------------------------
# association and track management

@dataclass
class Measurement:
    frame: int
    z: np.ndarray
    length: float = 4.5
    width: float = 1.8
    score: float = 1.0
    truth_id: int | None = None     # generator identity, evaluation only

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64).reshape(2)
        if not np.all(np.isfinite(self.z)):
            raise InvalidArgument("measurement must be finite")


class HistoryEntry(NamedTuple):
    frame: int
    filtered: KalmanState
    predicted: KalmanState | None
    measurement: Measurement | None


@dataclass
class KalmanTrack:
    track_id: int
    status: str = "tentative"
    hits: int = 0
    misses: int = 0
    history: list = field(default_factory=list)
    confirmed_at: int | None = None

    @property
    def state(self) -> KalmanState:
        return self.history[-1].filtered

    @property
    def frames(self):
        return [e.frame for e in self.history]

    def positions(self):
        return np.array([e.filtered.x[:2] for e in self.history])

    def trim(self):
        """Drop trailing prediction-only entries."""
        while self.history and self.history[-1].measurement is None:
            self.history.pop()


@dataclass(frozen=True)
class TrackerConfig:
    gate_m: float = 3.0
    confirm_hits: int = 3
    max_misses: int = 5
    init_vel_var: float = 100.0

    def __post_init__(self):
        if not self.gate_m > 0:
            raise InvalidArgument("gate_m must be positive")
        if self.confirm_hits < 1 or self.max_misses < 0:
            raise InvalidArgument("confirm_hits must be >= 1 and max_misses >= 0")


def associate(predicted, detections, gate_m):
    """Greedy nearest-neighbour matching on ascending Euclidean distance.

    ``predicted`` and ``detections`` are (N, 2) and (M, 2) position arrays.
    Returns ``(matches, unmatched_tracks, unmatched_detections)`` with
    matches as ``(track_index, detection_index)`` pairs.
    """
    if not gate_m > 0:
        raise InvalidArgument("gate_m must be positive")
    p = np.asarray(predicted, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(detections, dtype=np.float64).reshape(-1, 2)
    matches = []
    if len(p) and len(d):
        dist = np.hypot(p[:, None, 0] - d[None, :, 0], p[:, None, 1] - d[None, :, 1])
        order = np.argsort(dist, axis=None, kind="stable")
        used_t, used_d = set(), set()
        for flat in order:
            i, j = divmod(int(flat), len(d))
            if dist[i, j] > gate_m:
                break
            if i in used_t or j in used_d:
                continue
            used_t.add(i)
            used_d.add(j)
            matches.append((i, j))
    mt = {i for i, _ in matches}
    md = {j for _, j in matches}
    return (matches, [i for i in range(len(p)) if i not in mt], [j for j in range(len(d)) if j not in md])


def _group_by_frame(detections):
    if isinstance(detections, dict):
        return {int(k): list(v) for k, v in detections.items()}
    by = defaultdict(list)
    last = -math.inf
    for m in detections:
        if m.frame < last:
            raise InvalidArgument("detections must be in non-decreasing frame order")
        last = m.frame
        by[int(m.frame)].append(m)
    return dict(by)


def run_tracker(detections, model: KalmanModel, cfg: TrackerConfig | None = None):
    """Track measurements frame by frame; returns every track ever started.

    Tentative tracks die on their first miss; confirmed tracks die once they
    miss more than ``cfg.max_misses`` consecutive frames. Dead and finished
    tracks end at their last associated measurement.
    """
    cfg = cfg or TrackerConfig()
    by_frame = _group_by_frame(detections)
    if not by_frame:
        return []
    tracks, live = [], []
    p0 = np.zeros((4, 4))
    p0[:2, :2] = model.R
    p0[2, 2] = p0[3, 3] = cfg.init_vel_var
    for frame in range(min(by_frame), max(by_frame) + 1):
        dets = by_frame.get(frame, [])
        preds = [kf_predict(t.state, model) for t in live]
        matches, miss_t, new_d = associate(
            np.array([s.x[:2] for s in preds]).reshape(-1, 2),
            np.array([m.z for m in dets]).reshape(-1, 2), cfg.gate_m)
        for ti, di in matches:
            trk = live[ti]
            post, _, _ = kf_update(preds[ti], model, dets[di].z)
            trk.history.append(HistoryEntry(frame, post, preds[ti], dets[di]))
            trk.hits += 1
            trk.misses = 0
            if trk.status == "tentative" and trk.hits >= cfg.confirm_hits:
                trk.status = "confirmed"
                trk.confirmed_at = frame
        for ti in miss_t:
            trk = live[ti]
            trk.history.append(HistoryEntry(frame, preds[ti], preds[ti], None))
            trk.misses += 1
            if trk.status == "tentative" or trk.misses > cfg.max_misses:
                trk.status = "dead"
                trk.trim()
        live = [t for t in live if t.status != "dead"]
        for di in new_d:
            m = dets[di]
            init = KalmanState(np.array([m.z[0], m.z[1], 0.0, 0.0]), p0.copy())
            trk = KalmanTrack(len(tracks), hits=1, history=[HistoryEntry(frame, init, None, m)])
            if cfg.confirm_hits <= 1:
                trk.status, trk.confirmed_at = "confirmed", frame
            tracks.append(trk)
            live.append(trk)
    for t in live:
        t.trim()
    return tracks


# --------------------------------------------------------------------------
# smoothing

class SmoothedTrack(NamedTuple):
    track_id: int
    frames: np.ndarray
    x: np.ndarray         # (N, 4)
    P: np.ndarray         # (N, 4, 4)


def rts_smooth(track: KalmanTrack, model: KalmanModel) -> SmoothedTrack:
    """Backward smoothing pass over a track's filtered and predicted states."""
    hist = track.history
    if len(hist) < 2:
        raise InvalidInput("smoothing needs at least two history entries")
    for e in hist[1:]:
        if e.predicted is None or e.filtered is None:
            raise InvalidInput("track history lacks stored predicted covariances")
    frames = np.array([e.frame for e in hist])
    if np.any(np.diff(frames) != 1):
        raise InvalidInput("history frames must be consecutive")
    n = len(hist)
    xs = np.array([e.filtered.x for e in hist])
    ps = np.array([e.filtered.P for e in hist])
    for k in range(n - 2, -1, -1):
        pred = hist[k + 1].predicted
        c = np.linalg.solve(pred.P, model.F @ hist[k].filtered.P).T     # P_k F^T P_pred^-1
        xs[k] = hist[k].filtered.x + c @ (xs[k + 1] - pred.x)
        ps[k] = _symmetrize(hist[k].filtered.P + c @ (ps[k + 1] - pred.P) @ c.T)
    return SmoothedTrack(track.track_id, frames, xs, ps)


def rms_jerk(positions, dt):
    """RMS norm of the third difference of positions divided by dt^3."""
    p = np.asarray(positions, dtype=np.float64)
    j = np.diff(p, n=3, axis=0) / dt ** 3
    return float(np.sqrt(np.mean(np.sum(j * j, axis=-1))))


# --------------------------------------------------------------------------
# evaluation against generator identities

class IdentityReport(NamedTuple):
    identity_switches: int
    correct_fraction: float      # detections whose track is dominated by their own identity
    associated: int
    total: int


def identity_report(tracks, detections) -> IdentityReport:
    """Compare confirmed tracks with the ``truth_id`` carried by each measurement."""
    owner = {}
    majority = {}
    for t in tracks:
        if t.confirmed_at is None:
            continue
        ids = [e.measurement.truth_id for e in t.history if e.measurement is not None]
        majority[t.track_id] = Counter(ids).most_common(1)[0][0]
        for e in t.history:
            if e.measurement is not None:
                owner[id(e.measurement)] = t.track_id
    per_truth = defaultdict(list)
    correct = associated = 0
    for m in detections:
        tid = owner.get(id(m))
        if tid is None:
            continue
        associated += 1
        correct += majority[tid] == m.truth_id
        per_truth[m.truth_id].append((m.frame, tid))
    switches = 0
    for seq in per_truth.values():
        seq.sort()
        switches += sum(1 for a, b in zip(seq, seq[1:]) if a[1] != b[1])
    total = len(detections)
    return IdentityReport(switches, correct / total if total else 1.0, associated, total)


# --------------------------------------------------------------------------
# files

def read_detections(path):
    """JSON-lines measurements ``{frame, x_m, y_m, length_m, width_m, score}``."""
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            o = json.loads(line)
            out.append(Measurement(int(o["frame"]), (o["x_m"], o["y_m"]), o.get("length_m", 4.5),
                                   o.get("width_m", 1.8), o.get("score", 1.0), o.get("vehicle_id")))
    out.sort(key=lambda m: m.frame)
    return out


def write_detections(path, measurements, header=None):
    with open(path, "w") as fh:
        if header:
            fh.write(f"# {header}\n")
        for m in measurements:
            o = {"frame": int(m.frame), "x_m": float(m.z[0]), "y_m": float(m.z[1]),
                 "length_m": float(m.length), "width_m": float(m.width), "score": float(m.score)}
            if m.truth_id is not None:
                o["vehicle_id"] = int(m.truth_id)
            fh.write(json.dumps(o, separators=(",", ":")) + "\n")


TRAJECTORY_COLUMNS = ("track_id", "frame", "x_m", "y_m", "section_id", "lane_id",
                      "length_m", "width_m", "vx", "vy", "heading_rad")


def trajectory_rows(track: KalmanTrack, states=None, road_frame=None):
    """Rows of the trajectory CSV for one track (filtered states unless ``states`` given)."""
    from .roadmap import assign_lane_section

    ms = [e.measurement for e in track.history if e.measurement is not None]
    length = float(np.median([m.length for m in ms])) if ms else 0.0
    width = float(np.median([m.width for m in ms])) if ms else 0.0
    xs = states if states is not None else np.array([e.filtered.x for e in track.history])
    rows = []
    for e, x in zip(track.history, xs):
        sec, lane = (0, 0)
        if road_frame is not None:
            ls = assign_lane_section(x[0], x[1], road_frame)
            sec, lane = ls.section_id, ls.lane_id
        rows.append((track.track_id, e.frame, float(x[0]), float(x[1]), sec, lane, length, width,
                     float(x[2]), float(x[3]), math.atan2(x[3], x[2])))
    return rows


def write_trajectories(path, rows, header=None):
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for r in rows:
            w.writerow([r[0], r[1]] + [repr(float(v)) if isinstance(v, float) else v for v in r[2:]])


def read_trajectories(path):
    """Trajectory CSV as ``{track_id: structured rows sorted by frame}`` (dict of arrays)."""
    per = defaultdict(list)
    with open(path, newline="") as fh:
        for row in csv.DictReader(ln for ln in fh if not ln.startswith("#")):
            per[int(row["track_id"])].append(row)
    out = {}
    for tid, rows in per.items():
        rows.sort(key=lambda r: int(r["frame"]))
        out[tid] = {c: np.array([float(r[c]) for r in rows]) for c in TRAJECTORY_COLUMNS}
        out[tid]["frame"] = out[tid]["frame"].astype(int)
    return out


def _state_obj(s):
    return None if s is None else {"x": s.x.tolist(), "P": s.P.tolist()}


def _state_from(o):
    return None if o is None else KalmanState(np.array(o["x"], dtype=np.float64),
                                              np.array(o["P"], dtype=np.float64))


def write_track_histories(path, tracks, header=None):
    """Full filter histories (states, covariances, measurements), one track per line.

    Stored so smoothing can run later from files alone.
    """
    with open(path, "w") as fh:
        if header:
            fh.write(f"# {header}\n")
        for t in tracks:
            hist = []
            for e in t.history:
                m = e.measurement
                hist.append({
                    "frame": int(e.frame), "filtered": _state_obj(e.filtered),
                    "predicted": _state_obj(e.predicted),
                    "measurement": None if m is None else {
                        "z": m.z.tolist(), "length_m": float(m.length), "width_m": float(m.width),
                        "score": float(m.score), "vehicle_id": m.truth_id},
                })
            o = {"track_id": t.track_id, "status": t.status, "hits": t.hits,
                 "confirmed_at": t.confirmed_at, "history": hist}
            fh.write(json.dumps(o, separators=(",", ":")) + "\n")


def read_track_histories(path):
    tracks = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            o = json.loads(line)
            hist = []
            for e in o["history"]:
                m = e["measurement"]
                meas = None if m is None else Measurement(
                    e["frame"], m["z"], m["length_m"], m["width_m"], m["score"], m.get("vehicle_id"))
                hist.append(HistoryEntry(e["frame"], _state_from(e["filtered"]),
                                         _state_from(e["predicted"]), meas))
            tracks.append(KalmanTrack(o["track_id"], o["status"], o["hits"], 0, hist, o["confirmed_at"]))
    return tracks
