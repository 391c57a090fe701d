"""Intention and trajectory networks for interacting vehicle pairs.

Both networks read per-step pair features (see :func:`pair_features`). The
intention network emits direction and yield probabilities at every step.
The trajectory network reads a fixed window ending at the current step
and predicts the target's next ``horizon`` positions in one of three modes:

``plain``
    absolute displacements from the current position;
``intention``
    as ``plain`` with the (direction, yield) one-hot appended to every input;
``reference``
    as ``intention`` plus the lane-centre reference path sampled ahead of the
    vehicle at its current speed; the head emits along-track and cross-track
    residuals from those samples, so a zero head reproduces the reference.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from ..errors import InvalidArgument
from .data import DIRECTIONS, N_STATE, YIELDS, PairRecord
from .lstm import init_dense, init_lstm, lstm_backward, lstm_forward, softmax
from .reference import IntersectionGeometry, reference_trajectory

POS_SCALE = 20.0
VEL_SCALE = 10.0
REF_SCALE = 20.0
OUT_SCALE = 10.0
FEATURES_PER_CAR = 7
N_FEATURES = 2 * FEATURES_PER_CAR
N_INTENT = len(DIRECTIONS) + len(YIELDS)
MODES = ("plain", "intention", "reference")


def pair_features(states) -> np.ndarray:
    """(T, 12) pair states -> (T, 14) network inputs.

    Per car: x/20, y/20, vx/10, vy/10, cos(heading), sin(heading), dist/20.
    """
    s = np.asarray(states, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] != N_STATE:
        raise InvalidArgument(f"pair states must be (T, {N_STATE})")
    cols = []
    for o in (0, 6):
        x, y, vx, vy, hd, dist = (s[:, o + j] for j in range(6))
        cols += [x / POS_SCALE, y / POS_SCALE, vx / VEL_SCALE, vy / VEL_SCALE,
                 np.cos(hd), np.sin(hd), dist / POS_SCALE]
    return np.column_stack(cols)


def intent_onehot(direction_idx, yield_idx):
    v = np.zeros(N_INTENT)
    v[direction_idx] = 1.0
    v[len(DIRECTIONS) + yield_idx] = 1.0
    return v


def approach_arm(xy) -> str:
    """Arm a vehicle at ``xy`` (centre-relative metres) is on."""
    x, y = xy
    if abs(y) >= abs(x):
        return "N" if y > 0 else "S"
    return "E" if x > 0 else "W"


@lru_cache(maxsize=None)
def _reference(geom, arm, direction):
    return reference_trajectory(geom, arm, direction)


def reference_samples(record: PairRecord, step, direction_idx, horizon, geom=None):
    """Reference points ahead of the target at constant current speed, plus unit frames.

    Returns ``(points, tangents, normals)`` each of shape (horizon, 2).
    """
    geom = geom or IntersectionGeometry(record.lane_width, record.box_half, record.arm_length)
    ref = _reference(geom, approach_arm(record.target_xy[0]), DIRECTIONS[direction_idx])
    st = record.states[step]
    p_now = st[6:8]
    speed = math.hypot(st[8], st[9])
    s0 = float(ref.project(p_now)[0])
    s = np.clip(s0 + speed * record.dt * np.arange(1, horizon + 1), 0.0, ref.length)
    t, n = ref.frame_at(s)
    return ref.point_at(s), t, n


# --------------------------------------------------------------------------
# intention network

@dataclass
class IntentionNet:
    hidden: int = 64
    seed: int = 0
    params: dict = field(default=None, repr=False)

    kind = "intention"

    def __post_init__(self):
        if self.params is None:
            rng = np.random.default_rng(self.seed)
            self.params = {**init_lstm(rng, N_FEATURES, self.hidden),
                           **init_dense(rng, self.hidden, len(DIRECTIONS), "dir_"),
                           **init_dense(rng, self.hidden, len(YIELDS), "yield_")}

    def header(self):
        return {"kind": self.kind, "hidden": self.hidden, "seed": self.seed, "input": N_FEATURES}

    def forward(self, params, x):
        """Per-step direction and yield probabilities for inputs (B, T, 14)."""
        h, cache = lstm_forward(params, x)
        p_dir = softmax(h @ params["dir_W"].T + params["dir_b"])
        p_yld = softmax(h @ params["yield_W"].T + params["yield_b"])
        return p_dir, p_yld, (h, cache)

    def loss_and_grad(self, params, batch):
        """Summed direction and yield cross-entropy, averaged over valid steps."""
        x, mask, d_lab, y_lab = batch
        p_dir, p_yld, (h, cache) = self.forward(params, x)
        n_valid = mask.sum()
        w = mask / n_valid
        b_idx = np.arange(len(x))[:, None]
        t_idx = np.arange(x.shape[1])[None, :]
        pd = p_dir[b_idx, t_idx, d_lab[:, None]]
        py = p_yld[b_idx, t_idx, y_lab[:, None]]
        loss = float(-(w * (np.log(pd) + np.log(py))).sum())
        gd = p_dir.copy()
        gd[b_idx, t_idx, d_lab[:, None]] -= 1.0
        gd *= w[..., None]
        gy = p_yld.copy()
        gy[b_idx, t_idx, y_lab[:, None]] -= 1.0
        gy *= w[..., None]
        grads = {
            "dir_W": np.einsum("btk,bth->kh", gd, h), "dir_b": gd.sum(axis=(0, 1)),
            "yield_W": np.einsum("btk,bth->kh", gy, h), "yield_b": gy.sum(axis=(0, 1)),
        }
        dh = gd @ params["dir_W"] + gy @ params["yield_W"]
        g_lstm, _ = lstm_backward(params, cache, dh)
        grads.update(g_lstm)
        return loss, grads

    def predict(self, record: PairRecord):
        """Per-step (direction probabilities (T, 3), yield probabilities (T, 2))."""
        p_dir, p_yld, _ = self.forward(self.params, pair_features(record.states)[None])
        return p_dir[0], p_yld[0]


def intention_forward(params, seq):
    """Per-step probabilities for one (T, 14) feature sequence."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or len(seq) == 0:
        raise InvalidArgument("sequence must be a non-empty (T, D) array")
    h, _ = lstm_forward(params, seq)
    return softmax(h @ params["dir_W"].T + params["dir_b"]), softmax(h @ params["yield_W"].T + params["yield_b"])


def intention_batch(records, indices=None):
    """Zero-padded features with step mask and per-pair labels."""
    recs = [records[i] for i in indices] if indices is not None else list(records)
    t_max = max(r.n_steps for r in recs)
    x = np.zeros((len(recs), t_max, N_FEATURES))
    mask = np.zeros((len(recs), t_max))
    for i, r in enumerate(recs):
        x[i, : r.n_steps] = pair_features(r.states)
        mask[i, : r.n_steps] = 1.0
    d = np.array([r.direction_index for r in recs])
    y = np.array([r.yield_index for r in recs])
    return x, mask, d, y


# --------------------------------------------------------------------------
# trajectory network

@dataclass
class TrajectorySamples:
    """Windows cut from pair records, ready for the trajectory network."""
    x: np.ndarray          # (N, window, D) inputs including conditioning
    p_now: np.ndarray      # (N, 2) current target position
    ref: np.ndarray        # (N, horizon, 2) reference points (zeros unless reference mode)
    tangent: np.ndarray    # (N, horizon, 2)
    normal: np.ndarray     # (N, horizon, 2)
    future: np.ndarray     # (N, horizon, 2) true positions (nan when unknown)
    dist: np.ndarray       # (N,) target distance to intersection entry at the current step
    pair_id: np.ndarray    # (N,)
    step: np.ndarray       # (N,)

    def __len__(self):
        return len(self.x)

    def subset(self, idx):
        return TrajectorySamples(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


@dataclass
class TrajectoryNet:
    mode: str = "reference"
    hidden: int = 64
    window: int = 20
    horizon: int = 30
    seed: int = 0
    params: dict = field(default=None, repr=False)

    kind = "trajectory"

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidArgument(f"mode must be one of {MODES}")
        if self.window < 1 or self.horizon < 1 or self.hidden < 1:
            raise InvalidArgument("window, horizon and hidden must be positive")
        if self.params is None:
            rng = np.random.default_rng(self.seed)
            self.params = {**init_lstm(rng, self.input_size, self.hidden),
                           **init_dense(rng, self.hidden, 2 * self.horizon, "out_")}

    @property
    def cond_size(self):
        return {"plain": 0, "intention": N_INTENT, "reference": N_INTENT + 2 * self.horizon}[self.mode]

    @property
    def input_size(self):
        return N_FEATURES + self.cond_size

    def header(self):
        return {"kind": self.kind, "mode": self.mode, "hidden": self.hidden, "window": self.window,
                "horizon": self.horizon, "seed": self.seed, "input": self.input_size}

    # ------------------------------------------------------------------
    def windows(self, record: PairRecord, steps=None, intents=None, stride=1):
        """Cut samples ending at ``steps`` (default: every step with a full window).

        ``intents`` maps step -> (direction_idx, yield_idx); defaults to the
        record's labels. Steps whose future runs past the recorded target
        path get a nan future.
        """
        feats = pair_features(record.states)
        if steps is None:
            steps = range(self.window - 1, record.n_steps, stride)
        steps = [s for s in steps if s >= self.window - 1]
        n, hz = len(steps), self.horizon
        x = np.zeros((n, self.window, self.input_size))
        ref = np.zeros((n, hz, 2))
        tan = np.zeros((n, hz, 2))
        nor = np.zeros((n, hz, 2))
        fut = np.full((n, hz, 2), np.nan)
        p_now = np.zeros((n, 2))
        for i, s in enumerate(steps):
            x[i, :, :N_FEATURES] = feats[s - self.window + 1: s + 1]
            p_now[i] = record.states[s, 6:8]
            avail = record.target_xy[s + 1: s + 1 + hz]
            fut[i, : len(avail)] = avail
            if self.mode == "plain":
                continue
            d_idx, y_idx = intents[s] if intents is not None else (record.direction_index, record.yield_index)
            cond = [intent_onehot(d_idx, y_idx)]
            if self.mode == "reference":
                ref[i], tan[i], nor[i] = reference_samples(record, s, d_idx, hz)
                cond.append(((ref[i] - p_now[i]) / REF_SCALE).ravel())
            x[i, :, N_FEATURES:] = np.concatenate(cond)
        dist = record.target_dist_to_entry[steps] if n else np.zeros(0)
        return TrajectorySamples(x, p_now, ref, tan, nor, fut, np.asarray(dist, dtype=np.float64),
                                 np.full(n, record.pair_id), np.asarray(steps, dtype=int))

    def samples(self, records, stride=1, complete_only=True, intent_noise=0.0, seed=0,
                intents_by_pair=None):
        """Training windows from many records.

        ``intents_by_pair`` maps a pair id to per-step ``(direction, yield)``
        overrides, e.g. out-of-fold intention-network predictions.

        With ``intent_noise`` > 0 that fraction of windows gets a random
        wrong direction and, independently, a flipped yield label, so the
        conditioned modes learn to cope with misclassified intentions.
        """
        rng = np.random.default_rng(seed)
        parts = []
        for r in records:
            intents = None
            if intents_by_pair is not None and self.mode != "plain":
                intents = intents_by_pair.get(r.pair_id)
            elif intent_noise > 0 and self.mode != "plain":
                intents = {}
                for s in range(r.n_steps):
                    d, y = r.direction_index, r.yield_index
                    if rng.random() < intent_noise:
                        d = (d + int(rng.integers(1, len(DIRECTIONS)))) % len(DIRECTIONS)
                    if rng.random() < intent_noise:
                        y = 1 - y
                    intents[s] = (d, y)
            parts.append(self.windows(r, intents=intents, stride=stride))
        out = concat_samples(parts)
        if complete_only:
            out = out.subset(np.all(np.isfinite(out.future), axis=(1, 2)))
        return out

    # ------------------------------------------------------------------
    def _decode(self, out, smp):
        out = out.reshape(len(out), self.horizon, 2) * OUT_SCALE
        if self.mode == "reference":
            return smp.ref + out[..., :1] * smp.tangent + out[..., 1:] * smp.normal
        return smp.p_now[:, None, :] + out

    def forward(self, params, smp: TrajectorySamples, horizon=None):
        if horizon is not None and horizon != self.horizon:
            raise InvalidArgument(f"model predicts {self.horizon} steps, asked for {horizon}")
        h, cache = lstm_forward(params, smp.x)
        last = h[:, -1]
        out = last @ params["out_W"].T + params["out_b"]
        return self._decode(out, smp), (h, cache, last)

    def loss_and_grad(self, params, smp: TrajectorySamples):
        """Mean squared Euclidean position error (m^2) over samples and horizon."""
        pred, (h, cache, last) = self.forward(params, smp)
        err = pred - smp.future
        n = len(smp) * self.horizon
        loss = float(np.sum(err * err) / n)
        dpred = 2.0 * err / n
        if self.mode == "reference":
            dout = np.stack([np.sum(dpred * smp.tangent, -1), np.sum(dpred * smp.normal, -1)], -1)
        else:
            dout = dpred
        dout = dout.reshape(len(smp), -1) * OUT_SCALE
        grads = {"out_W": dout.T @ last, "out_b": dout.sum(axis=0)}
        dh = np.zeros_like(h)
        dh[:, -1] = dout @ params["out_W"]
        g_lstm, _ = lstm_backward(params, cache, dh)
        grads.update(g_lstm)
        return loss, grads

    def predict(self, smp: TrajectorySamples):
        return self.forward(self.params, smp)[0]


def concat_samples(parts):
    names = list(TrajectorySamples.__dataclass_fields__)
    if not parts:
        raise InvalidArgument("no samples")
    return TrajectorySamples(*(np.concatenate([getattr(p, f) for p in parts]) for f in names))


def trajectory_forward(params, model: TrajectoryNet, smp: TrajectorySamples, horizon):
    """Predicted positions (N, horizon, 2); ``horizon`` must match the model."""
    return model.forward(params, smp, horizon)[0]


# --------------------------------------------------------------------------
# model files: one JSON header line, then the parameters as little-endian float64

def save_model(path, model, provenance=None) -> None:
    """JSON header line (dims, seed, mode, parameter shapes) followed by little-endian float64 data."""
    names = sorted(model.params)
    header = {**model.header(), "params": [[k, list(model.params[k].shape)] for k in names]}
    if provenance:
        header["provenance"] = provenance
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for k in names:
            fh.write(np.ascontiguousarray(model.params[k], dtype="<f8").tobytes())


def load_model(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        data = np.frombuffer(fh.read(), dtype="<f8")
    params, pos = {}, 0
    for name, shape in header["params"]:
        size = int(np.prod(shape)) if shape else 1
        if pos + size > data.size:
            raise InvalidArgument(f"{path}: truncated parameter data")
        params[name] = data[pos:pos + size].reshape(shape).astype(np.float64)
        pos += size
    if pos != data.size:
        raise InvalidArgument(f"{path}: trailing parameter data")
    if header["kind"] == "intention":
        return IntentionNet(hidden=header["hidden"], seed=header["seed"], params=params)
    if header["kind"] == "trajectory":
        return TrajectoryNet(mode=header["mode"], hidden=header["hidden"], window=header["window"],
                             horizon=header["horizon"], seed=header["seed"], params=params)
    raise InvalidArgument(f"{path}: unknown model kind {header['kind']!r}")
