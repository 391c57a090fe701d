"""Independent reference implementations the tests compare against."""
import numpy as np

from urbanflow import imaging
from urbanflow.stabilize import Correspondences


def four_point_oracle(src, dst):
    """Solve the 8x8 system with h22 = 1 directly (no normalization, no SVD)."""
    a, b = [], []
    for (x, y), (u, v) in zip(src, dst):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        b.append(u)
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.append(v)
    return np.append(np.linalg.solve(np.array(a), np.array(b)), 1.0).reshape(3, 3)


def rel_frobenius(a, b):
    a, b = imaging.normalize_homography(a), imaging.normalize_homography(b)
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def random_homography(rng):
    return np.array([[1 + rng.normal(0, 0.02), rng.normal(0, 0.02), rng.normal(0, 5)],
                     [rng.normal(0, 0.02), 1 + rng.normal(0, 0.02), rng.normal(0, 5)],
                     [rng.normal(0, 1e-4), rng.normal(0, 1e-4), 1.0]])


def inlier_outlier_set(seed, n=100, n_out=30, size=300.0):
    rng = np.random.default_rng(seed)
    h = random_homography(rng)
    tgt = rng.uniform(0, size, (n, 2))
    ref = imaging.apply_homography(h, tgt)
    out_idx = rng.choice(n, n_out, replace=False)
    # outliers land uniformly but at least 10 px away from their true image
    for i in out_idx:
        while True:
            p = rng.uniform(0, size, 2)
            if np.hypot(*(p - ref[i])) > 10:
                ref[i] = p
                break
    truth = np.setdiff1d(np.arange(n), out_idx)
    return Correspondences(ref, tgt, np.ones(n)), truth, h


def arc_polyline(radius_px=500.0, degrees=90, step_deg=1.0):
    ang = np.radians(np.arange(0, degrees + step_deg / 2, step_deg))
    return np.column_stack([radius_px * np.sin(ang), radius_px * (1 - np.cos(ang))]) + [100.0, 100.0]


def scan_oracle(x, y, boundaries, lane_width, lanes):
    section = 0
    for b in boundaries:
        if b <= x:
            section += 1
    if abs(y) > lanes * lane_width:
        return section, 0, True
    lane = 0
    for k in range(1, lanes + 1):
        if (k - 1) * lane_width < abs(y) <= k * lane_width:
            lane = k
    return section, (lane if y >= 0 else -lane), False


def riccati_oracle(model, steps):
    """Plain prior-covariance recursion P <- F (P - P H^T S^-1 H P) F^T + Q."""
    p = np.eye(4) * 10.0
    f, h, q, r = model.F, model.H, model.Q, model.R
    for _ in range(steps):
        s = h @ p @ h.T + r
        post = p - p @ h.T @ np.linalg.inv(s) @ h @ p
        p = f @ post @ f.T + q
    return p


def greedy_replay(pred, dets, gate):
    """Sorted-pair replay: walk all (distance, i, j) triples in ascending order."""
    triples = sorted((float(np.hypot(*(pred[i] - dets[j]))), i, j)
                     for i in range(len(pred)) for j in range(len(dets)))
    used_i, used_j, out = set(), set(), []
    for d, i, j in triples:
        if d > gate:
            break
        if i not in used_i and j not in used_j:
            used_i.add(i)
            used_j.add(j)
            out.append((i, j))
    return sorted(out)


def central_differences(fn, params, eps=1e-5):
    out = {}
    for k, arr in params.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            keep = arr[idx]
            arr[idx] = keep + eps
            up = fn()
            arr[idx] = keep - eps
            down = fn()
            arr[idx] = keep
            g[idx] = (up - down) / (2 * eps)
        out[k] = g
    return out
