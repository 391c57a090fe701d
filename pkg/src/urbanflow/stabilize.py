"""Hybrid feature + ECC frame alignment and the stabilization controller.

Homography convention: an alignment homography maps *target* pixel
coordinates into *reference* pixel coordinates, so ``warp(tgt, H)`` lines
the target up with the reference.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from . import imaging
from .errors import EstimationFailed, InsufficientFeaturesError, InvalidArgument

log = logging.getLogger(__name__)

PATCH_RADIUS = 5  # 11x11 NCC patches
NCC_MIN = 0.8


@dataclass
class StabilizerConfig:
    ssim_threshold: float = 0.70
    ecc_max_iters: int = 50
    ecc_eps: float = 1e-5
    ds_factor: int = 8
    ransac_iters: int = 2000
    ransac_inlier_px: float = 2.0
    # not named by the contract; exposed for tuning
    ecc_blur: float = 1.0
    match_radius_px: float = 48.0
    max_keypoints: int = 500
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.ssim_threshold < 1.0:
            raise InvalidArgument("ssim_threshold must lie in (0, 1)")
        if self.ecc_max_iters < 1 or self.ransac_iters < 1 or self.max_keypoints < 1:
            raise InvalidArgument("iteration and keypoint counts must be >= 1")
        if self.ds_factor not in imaging.DOWNSAMPLE_FACTORS:
            raise InvalidArgument(f"ds_factor must be one of {imaging.DOWNSAMPLE_FACTORS}")
        if self.ecc_eps <= 0 or self.ransac_inlier_px <= 0:
            raise InvalidArgument("ecc_eps and ransac_inlier_px must be positive")


@dataclass
class Correspondences:
    """Matched keypoints; row ``k`` of ``p_ref`` corresponds to row ``k`` of ``p_tgt``."""

    p_ref: np.ndarray
    p_tgt: np.ndarray
    score: np.ndarray

    def __len__(self):
        return len(self.p_ref)


# --------------------------------------------------------------------------
# keypoints and matching

def corner_response(img, sigma=1.5):
    """Minimum eigenvalue of the local structure tensor (gradient energy)."""
    g = ndimage.gaussian_filter(img, 0.7)
    ix = ndimage.sobel(g, axis=1) / 8.0
    iy = ndimage.sobel(g, axis=0) / 8.0
    sxx = ndimage.gaussian_filter(ix * ix, sigma)
    syy = ndimage.gaussian_filter(iy * iy, sigma)
    sxy = ndimage.gaussian_filter(ix * iy, sigma)
    half_tr = 0.5 * (sxx + syy)
    return half_tr - np.sqrt(np.maximum(0.25 * (sxx - syy) ** 2 + sxy * sxy, 0.0))


def detect_keypoints(img, max_points=500, mask=None, nms_size=7, min_dist=2.0):
    """Corner keypoints as an (N, 2) array of sub-pixel (x, y) positions, strongest first."""
    img = np.asarray(img, dtype=np.float64)
    resp = corner_response(img)
    rows, cols = img.shape
    border = PATCH_RADIUS + 1
    peak = (resp == ndimage.maximum_filter(resp, size=nms_size)) & (resp > max(1e-9, 1e-3 * resp.max()))
    peak[:border] = False
    peak[-border:] = False
    peak[:, :border] = False
    peak[:, -border:] = False
    if mask is not None:
        # whole patch must be valid
        ok = ndimage.binary_erosion(np.asarray(mask, bool), np.ones((2 * border + 1,) * 2))
        peak &= ok
    ys, xs = np.nonzero(peak)
    if len(xs) == 0:
        return np.zeros((0, 2))
    r = resp[ys, xs]
    order = np.argsort(-r, kind="stable")
    ys, xs = ys[order], xs[order]

    def offset(m, c, p):
        d = m - 2 * c + p
        with np.errstate(divide="ignore", invalid="ignore"):
            o = np.where(d < 0, 0.5 * (m - p) / d, 0.0)
        return np.clip(o, -0.5, 0.5)

    ox = offset(resp[ys, xs - 1], resp[ys, xs], resp[ys, xs + 1])
    oy = offset(resp[ys - 1, xs], resp[ys, xs], resp[ys + 1, xs])
    pts = np.column_stack([xs + ox, ys + oy])

    # plateaus produce twin maxima; keep the stronger of any close pair
    kept = []
    for k, p in enumerate(pts):
        if kept and np.min(np.hypot(*(pts[kept] - p).T)) < min_dist:
            continue
        kept.append(k)
        if len(kept) >= max_points:
            break
    return pts[kept]


def _patches(img, pts):
    r = PATCH_RADIUS
    xi = np.rint(pts[:, 0]).astype(int)
    yi = np.rint(pts[:, 1]).astype(int)
    off = np.arange(-r, r + 1)
    rows = yi[:, None, None] + off[None, :, None]
    cols = xi[:, None, None] + off[None, None, :]
    p = img[rows, cols].reshape(len(pts), -1)
    p = p - p.mean(axis=1, keepdims=True)
    n = np.linalg.norm(p, axis=1, keepdims=True)
    good = n[:, 0] > 1e-6
    p = np.where(good[:, None], p / np.maximum(n, 1e-12), 0.0)
    return p, good


def detect_and_match(ref, tgt, max_points=500, radius=None, ref_mask=None, tgt_mask=None,
                     min_score=NCC_MIN):
    """Detect corners in both frames and return mutual-best NCC matches.

    Matches are restricted to displacements of at most ``radius`` pixels
    (unbounded when None) and NCC score >= ``min_score``.
    """
    ref = np.asarray(ref, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    if ref.shape != tgt.shape:
        raise InvalidArgument("reference and target must have the same dimensions")
    kr = detect_keypoints(ref, max_points, ref_mask)
    kt = detect_keypoints(tgt, max_points, tgt_mask)
    if len(kr) < 4 or len(kt) < 4:
        raise InsufficientFeaturesError(f"too few keypoints ({len(kr)}, {len(kt)})")
    pr, gr = _patches(ref, kr)
    pt, gt = _patches(tgt, kt)
    score = pr @ pt.T
    dist = np.hypot(kr[:, None, 0] - kt[None, :, 0], kr[:, None, 1] - kt[None, :, 1])
    eff = score - 1e-9 * dist
    eff[~gr] = -np.inf
    eff[:, ~gt] = -np.inf
    if radius is not None:
        eff[dist > radius] = -np.inf
    best_t = np.argmax(eff, axis=1)
    best_r = np.argmax(eff, axis=0)
    i = np.arange(len(kr))
    s = score[i, best_t]
    keep = (best_r[best_t] == i) & np.isfinite(eff[i, best_t]) & (s >= min_score)
    out = Correspondences(kr[keep], kt[best_t[keep]], s[keep])
    if len(out) < 4:
        raise InsufficientFeaturesError(f"only {len(out)} matches")
    return out


# --------------------------------------------------------------------------
# homography estimation

def _normalizing_transform(pts):
    """Similarity moving the centroid to 0 with mean distance sqrt(2), batched over axis 0."""
    c = pts.mean(axis=-2)
    d = np.sqrt(((pts - c[..., None, :]) ** 2).sum(axis=-1)).mean(axis=-1)
    s = np.sqrt(2.0) / np.maximum(d, 1e-12)
    t = np.zeros(pts.shape[:-2] + (3, 3))
    t[..., 0, 0] = s
    t[..., 1, 1] = s
    t[..., 0, 2] = -s * c[..., 0]
    t[..., 1, 2] = -s * c[..., 1]
    t[..., 2, 2] = 1.0
    return t


def _dlt_batch(src, dst):
    """Normalized DLT for a batch: src, dst of shape (B, N, 2) -> (B, 3, 3)."""
    ts = _normalizing_transform(src)
    td = _normalizing_transform(dst)
    s = np.einsum("bij,bnj->bni", ts[..., :2, :2], src) + ts[:, None, :2, 2]
    d = np.einsum("bij,bnj->bni", td[..., :2, :2], dst) + td[:, None, :2, 2]
    b, n, _ = src.shape
    x, y = s[..., 0], s[..., 1]
    u, v = d[..., 0], d[..., 1]
    z, o = np.zeros_like(x), np.ones_like(x)
    r1 = np.stack([-x, -y, -o, z, z, z, u * x, u * y, u], axis=-1)
    r2 = np.stack([z, z, z, -x, -y, -o, v * x, v * y, v], axis=-1)
    a = np.concatenate([r1, r2], axis=1)
    _, _, vt = np.linalg.svd(a)
    hn = vt[:, -1, :].reshape(b, 3, 3)
    return np.linalg.inv(td) @ hn @ ts


def dlt_homography(src, dst):
    """Normalized DLT homography mapping ``src`` points onto ``dst`` (least squares for N > 4)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 4 or src.shape != dst.shape:
        raise InsufficientFeaturesError("DLT needs at least 4 point pairs")
    h = _dlt_batch(src[None], dst[None])[0]
    try:
        return imaging.normalize_homography(h)
    except InvalidArgument as exc:
        raise EstimationFailed(str(exc)) from exc


def transfer_errors(hs, src, dst):
    """Squared symmetric transfer error for homographies (B, 3, 3) on points (N, 2) -> (B, N)."""
    hs = np.asarray(hs, dtype=np.float64)
    single = hs.ndim == 2
    if single:
        hs = hs[None]
    with np.errstate(all="ignore"):
        # adjugate inverse: singular samples give non-finite errors instead of raising
        a, b, c = hs[:, :, 0], hs[:, :, 1], hs[:, :, 2]
        rows = np.stack([np.cross(b, c), np.cross(c, a), np.cross(a, b)], axis=1)
        hinv = rows / np.einsum("bi,bi->b", a, rows[:, 0])[:, None, None]

        def proj(m, p):
            q = np.einsum("bij,nj->bni", m[:, :, :2], p) + m[:, None, :, 2]
            return q[..., :2] / q[..., 2:3]

        fwd = ((proj(hs, src) - dst) ** 2).sum(-1)
        bwd = ((proj(hinv, dst) - src) ** 2).sum(-1)
        e = fwd + bwd
    e = np.where(np.isfinite(e), e, np.inf)
    return e[0] if single else e


def ransac_homography(matches, cfg: StabilizerConfig | None = None, confidence=0.999, chunk=128):
    """Robust homography (target -> reference) from correspondences.

    Returns ``(H, inliers)`` where ``inliers`` are indices into ``matches``.
    """
    cfg = cfg or StabilizerConfig()
    src = np.asarray(matches.p_tgt, dtype=np.float64)
    dst = np.asarray(matches.p_ref, dtype=np.float64)
    n = len(src)
    if n < 4:
        raise InsufficientFeaturesError(f"need >= 4 matches, got {n}")
    rng = np.random.default_rng(cfg.seed)
    thr2 = cfg.ransac_inlier_px ** 2
    best_count, best_err, best_h = 0, np.inf, None
    needed, done = cfg.ransac_iters, 0
    while done < min(needed, cfg.ransac_iters):
        b = min(chunk, cfg.ransac_iters - done)
        idx = rng.random((b, n)).argpartition(3, axis=1)[:, :4]
        with np.errstate(all="ignore"):
            hs = _dlt_batch(src[idx], dst[idx])
            dets = np.linalg.det(hs)
        ok = np.isfinite(hs).all(axis=(1, 2)) & (np.abs(dets) > 1e-12 * np.abs(hs[:, 2, 2]) ** 3)
        done += b
        if not ok.any():
            continue
        hs = hs[ok] / hs[ok][:, 2:3, 2:3]
        err = transfer_errors(hs, src, dst)
        inl = err <= thr2
        counts = inl.sum(axis=1)
        tot = np.where(inl, err, 0.0).sum(axis=1)
        k = np.lexsort((tot, -counts))[0]
        if counts[k] > best_count or (counts[k] == best_count and tot[k] < best_err):
            best_count, best_err, best_h = int(counts[k]), float(tot[k]), hs[k]
            w = best_count / n
            if w >= 1.0:
                needed = done
            else:
                needed = int(math.ceil(math.log(1 - confidence) / math.log(max(1e-12, 1 - w ** 4))))
    if best_h is None or best_count < 4:
        raise EstimationFailed("no model with at least 4 inliers")

    inliers = np.nonzero(transfer_errors(best_h, src, dst) <= thr2)[0]
    h = best_h
    for _ in range(5):
        try:
            h_new = dlt_homography(src[inliers], dst[inliers])
        except EstimationFailed:
            break
        new_inl = np.nonzero(transfer_errors(h_new, src, dst) <= thr2)[0]
        if len(new_inl) < 4:
            break
        h = h_new
        if np.array_equal(new_inl, inliers):
            break
        inliers = new_inl
    return imaging.normalize_homography(h), inliers


# --------------------------------------------------------------------------
# ECC

class EccResult(NamedTuple):
    homography: np.ndarray
    score: float
    iterations: int
    diverged: bool


def _param_matrix(p):
    return np.array([[p[0], p[1], p[2]], [p[3], p[4], p[5]], [p[6], p[7], 1.0]])


def ecc_refine(ref, tgt, h_init, cfg: StabilizerConfig | None = None, ref_mask=None) -> EccResult:
    """Maximize the enhanced correlation coefficient over an 8-parameter homography.

    Forwards-additive Gauss-Newton style updates on the warp that maps
    reference pixels into the target, parameterized in centred, scaled
    coordinates for conditioning. Both images are Gaussian-smoothed by
    ``cfg.ecc_blur`` first. The returned homography maps target -> reference
    and never scores below ``h_init``.
    """
    cfg = cfg or StabilizerConfig()
    ref = np.asarray(ref, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    if ref.shape != tgt.shape:
        raise InvalidArgument("reference and target must have the same dimensions")
    h_init = imaging.normalize_homography(h_init)
    if cfg.ecc_blur > 0:
        ref = ndimage.gaussian_filter(ref, cfg.ecc_blur)
        tgt = ndimage.gaussian_filter(tgt, cfg.ecc_blur)
    rows, cols = ref.shape
    s = max(rows, cols) / 2.0
    cx, cy = (cols - 1) / 2.0, (rows - 1) / 2.0
    norm = np.array([[1 / s, 0, -cx / s], [0, 1 / s, -cy / s], [0, 0, 1.0]])
    norm_inv = np.linalg.inv(norm)
    gy_img, gx_img = np.gradient(tgt)

    ys, xs = np.mgrid[0:rows, 0:cols].astype(np.float64)
    xn = ((xs - cx) / s).ravel()
    yn = ((ys - cy) / s).ravel()
    ref_flat = ref.ravel()
    # smoothing is unreliable within ~3 sigma of the border
    m = int(math.ceil(3 * cfg.ecc_blur))
    ref_ok = np.zeros((rows, cols), bool)
    ref_ok[m:rows - m, m:cols - m] = True
    if ref_mask is not None:
        ref_ok &= np.asarray(ref_mask, bool)
    ref_ok = ref_ok.ravel()

    def sample(p):
        den = p[6] * xn + p[7] * yn + 1.0
        un = (p[0] * xn + p[1] * yn + p[2]) / den
        vn = (p[3] * xn + p[4] * yn + p[5]) / den
        u = s * un + cx
        v = s * vn + cy
        valid = ref_ok & (den > 0) & (u >= m) & (u <= cols - 1 - m) & (v >= m) & (v <= rows - 1 - m)
        return valid, den[valid], un[valid], vn[valid], u[valid], v[valid]

    def correlation(p):
        valid, _, _, _, u, v = sample(p)
        if valid.sum() < 16:
            return -np.inf
        iw = ndimage.map_coordinates(tgt, [v, u], order=1)
        ir = ref_flat[valid]
        ir = ir - ir.mean()
        iw = iw - iw.mean()
        d = np.linalg.norm(ir) * np.linalg.norm(iw)
        return float(ir @ iw / d) if d > 0 else -np.inf

    g = norm @ np.linalg.inv(h_init) @ norm_inv
    g = g / g[2, 2]
    p = g.ravel()[:8].copy()
    best_p, best_score = p.copy(), correlation(p)
    prev_score, drops, it, diverged = best_score, 0, 0, False

    for it in range(1, cfg.ecc_max_iters + 1):
        valid, den, un, vn, u, v = sample(p)
        if valid.sum() < 16:
            raise EstimationFailed("warped target no longer overlaps the reference")
        iw = ndimage.map_coordinates(tgt, [v, u], order=1)
        gxs = ndimage.map_coordinates(gx_img, [v, u], order=1)
        gys = ndimage.map_coordinates(gy_img, [v, u], order=1)
        x, y = xn[valid], yn[valid]
        j = np.empty((len(u), 8))
        j[:, 0] = gxs * x
        j[:, 1] = gxs * y
        j[:, 2] = gxs
        j[:, 3] = gys * x
        j[:, 4] = gys * y
        j[:, 5] = gys
        j[:, 6] = -(gxs * un + gys * vn) * x
        j[:, 7] = -(gxs * un + gys * vn) * y
        j *= (s / den)[:, None]
        j -= j.mean(axis=0)
        ir = ref_flat[valid]
        ir = ir - ir.mean()
        iw = iw - iw.mean()

        hess = j.T @ j
        if not np.all(np.isfinite(hess)) or np.linalg.cond(hess) > 1e14:
            raise EstimationFailed("singular ECC normal matrix")
        jr = j.T @ ir
        jw = j.T @ iw
        hw = np.linalg.solve(hess, jw)
        num = iw @ iw - jw @ hw
        den_l = ir @ iw - jr @ hw
        if den_l > 0:
            lam = num / den_l
        else:
            hr = np.linalg.solve(hess, jr)
            lam1 = math.sqrt(max(jw @ hw, 0.0) / max(jr @ hr, 1e-300))
            lam2 = (jr @ hw - ir @ iw) / max(jr @ hr, 1e-300)
            lam = max(lam1, lam2)
        dp = np.linalg.solve(hess, j.T @ (lam * ir - iw))
        p = p + dp

        score = correlation(p)
        if score > best_score:
            best_p, best_score = p.copy(), score
        drops = drops + 1 if score < prev_score else 0
        prev_score = score
        if drops >= 5:
            diverged = True
            break
        if np.linalg.norm(dp) < cfg.ecc_eps:
            break

    g = norm_inv @ _param_matrix(best_p) @ norm
    h = imaging.invert_homography(g)
    return EccResult(h, float(best_score), it, diverged)


# --------------------------------------------------------------------------
# stabilization controller

@dataclass
class StabilizerState:
    ref_frame: np.ndarray
    ref_index: int
    current_h: np.ndarray
    last_score: float
    alignment_count: int = 0
    ref_abs: np.ndarray = field(default_factory=lambda: np.eye(3))


@dataclass
class FrameResult:
    index: int
    homography: np.ndarray  # frame -> frame 0
    ssim_score: float
    ecc_score: float
    aligned: bool
    failed: bool
    ref_index: int


@dataclass
class StabilizationResult:
    frames: list
    trace: list

    @property
    def homographies(self):
        return [f.homography for f in self.frames]

    @property
    def alignment_count(self):
        return self.trace[-1].alignment_count if self.trace else 0


def align_frames(ref, tgt, h_guess, cfg: StabilizerConfig):
    """Rough feature alignment followed by ECC, on down-sampled images.

    ``h_guess`` is a full-resolution target -> reference homography used to
    pre-warp the target before matching and to compose the ECC warm start.
    Returns the full-resolution homography and the ECC score.
    """
    f = cfg.ds_factor
    ref_d = imaging.downsample(ref, f)
    tgt_d = imaging.downsample(tgt, f)
    g_d = imaging.downscale_homography(h_guess, f)
    init = g_d
    try:
        warped, mask = imaging.warp(tgt_d, g_d)
        matches = detect_and_match(ref_d, warped, cfg.max_keypoints, radius=cfg.match_radius_px / f,
                                   tgt_mask=mask)
        rough_cfg = replace(cfg, ransac_inlier_px=max(cfg.ransac_inlier_px / f, 0.5))
        h_res, inliers = ransac_homography(matches, rough_cfg)
        if len(inliers) >= 8:
            init = imaging.compose(h_res, g_d)
    except (InsufficientFeaturesError, EstimationFailed) as exc:
        log.debug("rough alignment skipped: %s", exc)
    res = ecc_refine(ref_d, tgt_d, init, cfg)
    return imaging.rescale_homography(res.homography, f), res.score


def _score(ref, frame, h):
    warped, mask = imaging.warp(frame, h)
    try:
        return imaging.ssim(ref, warped, mask)
    except Exception:
        return -1.0


def stabilize_stream(frames, cfg: StabilizerConfig | None = None) -> StabilizationResult:
    """Stabilize a frame sequence against frame 0.

    Each frame is scored by SSIM against the current reference after warping
    with the current homography. The homography is reused while the score
    stays at or above ``cfg.ssim_threshold``; otherwise the frame is
    re-aligned (features + ECC, warm-started from the current homography),
    and if it still scores below threshold it becomes the new reference.
    Emitted homographies map each frame into frame 0's coordinates.
    """
    cfg = cfg or StabilizerConfig()
    frames = list(frames)
    if not frames:
        raise InvalidArgument("need at least one frame")
    first = np.asarray(frames[0], dtype=np.float64)
    state = StabilizerState(ref_frame=first, ref_index=0, current_h=np.eye(3), last_score=1.0)
    out = [FrameResult(0, np.eye(3), 1.0, 1.0, False, False, 0)]
    trace = [replace(state)]

    for k in range(1, len(frames)):
        frame = np.asarray(frames[k], dtype=np.float64)
        if frame.shape != first.shape:
            raise InvalidArgument("all frames must share dimensions")
        score = _score(state.ref_frame, frame, state.current_h)
        aligned = failed = False
        ecc_score = float("nan")
        h_rel = state.current_h
        if score < cfg.ssim_threshold:
            aligned = True
            state.alignment_count += 1
            candidates = [(score, state.current_h)]
            try:
                h_new, ecc_score = align_frames(state.ref_frame, frame, state.current_h, cfg)
                candidates.append((_score(state.ref_frame, frame, h_new), h_new))
            except (EstimationFailed, InsufficientFeaturesError, InvalidArgument) as exc:
                log.warning("frame %d: alignment failed: %s", k, exc)
                failed = True
            candidates.append((_score(state.ref_frame, frame, np.eye(3)), np.eye(3)))
            score, h_rel = max(candidates, key=lambda c: c[0])
            if failed:
                h_rel = state.current_h
                score = candidates[0][0]
        h_abs = imaging.compose(state.ref_abs, h_rel)
        if aligned and not failed and score < cfg.ssim_threshold:
            state.ref_frame = frame
            state.ref_index = k
            state.ref_abs = h_abs
            state.current_h = np.eye(3)
        else:
            state.current_h = h_rel
        state.last_score = float(score)
        out.append(FrameResult(k, h_abs, float(score), float(ecc_score), aligned, failed, state.ref_index))
        trace.append(replace(state))
    return StabilizationResult(out, trace)


# --------------------------------------------------------------------------
# homography log

LOG_COLUMNS = ["frame_index"] + [f"h{r}{c}" for r in range(3) for c in range(3)][:8] + [
    "ssim_score", "aligned_flag", "ref_index", "ecc_score", "failed_flag"]


def write_homography_log(path, results, header=None):
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in results:
            h = imaging.normalize_homography(r.homography).ravel()[:8]
            w.writerow([r.index, *(repr(float(v)) for v in h), repr(float(r.ssim_score)),
                        int(r.aligned), r.ref_index, repr(float(r.ecc_score)), int(r.failed)])


def read_homography_log(path):
    """Return ``{frame_index: H}`` from a homography log CSV."""
    out = {}
    with open(path, newline="") as fh:
        rows = (line for line in fh if not line.startswith("#"))
        for row in csv.DictReader(rows):
            vals = [float(row[c]) for c in LOG_COLUMNS[1:9]] + [1.0]
            out[int(row["frame_index"])] = np.array(vals).reshape(3, 3)
    return out
