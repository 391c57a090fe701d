"""Intensity-image primitives.

Images are 2-D float64 numpy arrays indexed ``[row, col]`` with values in
[0, 1]. Homographies are 3x3 arrays acting on homogeneous pixel coordinates
``(x, y, 1)`` where ``x`` is the column and ``y`` the row, normalized so
that ``H[2, 2] == 1``.
"""
from __future__ import annotations

import os
import re

import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError, InvalidArgument, NoOverlapError

SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
DOWNSAMPLE_FACTORS = (1, 2, 4, 8)


def as_image(img) -> np.ndarray:
    """Validate and return ``img`` as a float64 2-D array in [0, 1]."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise InvalidArgument(f"expected a non-empty 2-D image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise InvalidArgument("image intensities must lie in [0, 1]")
    return arr


# --------------------------------------------------------------------------
# homographies

def normalize_homography(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64).reshape(3, 3)
    if abs(h[2, 2]) < 1e-15:
        raise InvalidArgument("homography has zero bottom-right entry")
    h = h / h[2, 2]
    if abs(np.linalg.det(h)) <= 1e-12:
        raise InvalidArgument("singular homography")
    return h


def invert_homography(h) -> np.ndarray:
    h = normalize_homography(h)
    return normalize_homography(np.linalg.inv(h))


def compose(*hs) -> np.ndarray:
    """Matrix product ``hs[0] @ hs[1] @ ...``, renormalized."""
    out = np.eye(3)
    for h in hs:
        out = out @ np.asarray(h, dtype=np.float64)
    return normalize_homography(out)


def apply_homography(h, pts) -> np.ndarray:
    """Map an (N, 2) array of (x, y) points through ``h``."""
    pts = np.asarray(pts, dtype=np.float64)
    flat = pts.reshape(-1, 2)
    q = flat @ h[:, :2].T + h[:, 2]
    out = q[:, :2] / q[:, 2:3]
    return out.reshape(pts.shape)


def translation(tx, ty) -> np.ndarray:
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def image_corners(width, height) -> np.ndarray:
    return np.array([[0.0, 0.0], [width - 1.0, 0.0],
                     [width - 1.0, height - 1.0], [0.0, height - 1.0]])


def corner_error(h_est, h_true, width, height) -> float:
    """Mean distance between the four image corners mapped by both homographies."""
    c = image_corners(width, height)
    d = apply_homography(h_est, c) - apply_homography(h_true, c)
    return float(np.mean(np.hypot(d[:, 0], d[:, 1])))


def scale_matrix(factor) -> np.ndarray:
    """Map block-mean down-sampled pixel coordinates to full resolution.

    Pixel ``i`` of a factor-``f`` down-sampled image averages full-resolution
    pixels ``f*i .. f*i+f-1`` whose centre is ``f*i + (f-1)/2``.
    """
    f = float(factor)
    o = (f - 1.0) / 2.0
    return np.array([[f, 0.0, o], [0.0, f, o], [0.0, 0.0, 1.0]])


def rescale_homography(h_ds, factor) -> np.ndarray:
    """Lift a homography estimated on down-sampled images to full resolution."""
    s = scale_matrix(factor)
    return normalize_homography(s @ h_ds @ np.linalg.inv(s))


def downscale_homography(h_full, factor) -> np.ndarray:
    s = scale_matrix(factor)
    return normalize_homography(np.linalg.inv(s) @ h_full @ s)


# --------------------------------------------------------------------------
# image operations

def downsample(img, factor: int) -> np.ndarray:
    """Block-mean down-sampling by an integer factor in {1, 2, 4, 8}.

    Trailing rows/columns that do not fill a complete block are dropped.
    """
    if factor not in DOWNSAMPLE_FACTORS:
        raise InvalidArgument(f"factor must be one of {DOWNSAMPLE_FACTORS}, got {factor!r}")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise InvalidArgument("expected a 2-D image")
    h, w = img.shape
    if h < factor or w < factor:
        raise InvalidArgument(f"image {w}x{h} is smaller than factor {factor}")
    if factor == 1:
        return img.copy()
    hh, ww = h // factor, w // factor
    blocks = img[: hh * factor, : ww * factor].reshape(hh, factor, ww, factor)
    return blocks.mean(axis=(1, 3))


def warp(img, h, out_dims=None, order=1):
    """Warp ``img`` by homography ``h`` using inverse mapping.

    ``out(p) = img(h^-1 p)`` with bilinear interpolation. ``out_dims`` is
    ``(width, height)`` and defaults to the input size. Returns
    ``(warped, mask)`` where ``mask`` marks output pixels whose source lies
    inside the input image; pixels outside are 0.
    """
    img = np.asarray(img, dtype=np.float64)
    h = normalize_homography(h)
    if out_dims is None:
        out_h, out_w = img.shape
    else:
        out_w, out_h = out_dims
    hinv = np.linalg.inv(h)
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    den = hinv[2, 0] * xs + hinv[2, 1] * ys + hinv[2, 2]
    sx = (hinv[0, 0] * xs + hinv[0, 1] * ys + hinv[0, 2]) / den
    sy = (hinv[1, 0] * xs + hinv[1, 1] * ys + hinv[1, 2]) / den
    rows, cols = img.shape
    tol = 1e-9
    mask = (sx >= -tol) & (sx <= cols - 1 + tol) & (sy >= -tol) & (sy <= rows - 1 + tol)
    mask &= den > 0
    out = ndimage.map_coordinates(img, [np.clip(sy, 0, rows - 1), np.clip(sx, 0, cols - 1)],
                                  order=order, mode="nearest")
    out[~mask] = 0.0
    return out, mask


def _window_view(arr, win):
    rows, cols = arr.shape
    r, c = rows // win, cols // win
    return arr[: r * win, : c * win].reshape(r, win, c, win).swapaxes(1, 2).reshape(r, c, win * win)


def ssim_map(a, b, mask=None, window=SSIM_WINDOW):
    """Per-window SSIM over non-overlapping ``window`` x ``window`` tiles.

    Returns ``(values, valid)`` arrays of shape (rows // window, cols // window).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise InvalidArgument(f"dimension mismatch: {a.shape} vs {b.shape}")
    wa = _window_view(a, window)
    wb = _window_view(b, window)
    if mask is None:
        valid = np.ones(wa.shape[:2], dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape != a.shape:
            raise InvalidArgument("mask shape does not match image shape")
        valid = _window_view(m, window).all(axis=2)
    mu_a = wa.mean(axis=2)
    mu_b = wb.mean(axis=2)
    da = wa - mu_a[..., None]
    db = wb - mu_b[..., None]
    var_a = (da * da).mean(axis=2)
    var_b = (db * db).mean(axis=2)
    cov = (da * db).mean(axis=2)
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den, valid


def ssim(a, b, mask=None) -> float:
    """Mean SSIM over 8x8 non-overlapping windows fully inside ``mask``."""
    values, valid = ssim_map(a, b, mask)
    if not valid.any():
        raise NoOverlapError("no SSIM window lies fully inside the mask")
    return float(values[valid].mean())


def zero_mean_normalize(img, mask=None) -> np.ndarray:
    """Zero-mean, unit-norm vector of the masked intensities (row-major order)."""
    img = np.asarray(img, dtype=np.float64)
    v = img[np.asarray(mask, dtype=bool)] if mask is not None else img.ravel()
    if v.size < 2:
        raise DegenerateInputError("need at least two masked pixels")
    v = v - v.mean()
    n = np.linalg.norm(v)
    if n <= 1e-12 * max(1.0, np.abs(img).max()):
        raise DegenerateInputError("masked intensities are constant")
    return v / n


# --------------------------------------------------------------------------
# PGM I/O

_PGM_TOKEN = re.compile(rb"(?:\s*(?:#[^\n]*\n)?)*\s*(\S+)")


def read_pgm(path) -> np.ndarray:
    """Read a binary 8-bit (P5) PGM file into a float image in [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    pos = 0
    tokens = []
    while len(tokens) < 4:
        m = _PGM_TOKEN.match(raw, pos)
        if m is None:
            raise InvalidArgument(f"{path}: truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise InvalidArgument(f"{path}: unsupported magic {tokens[0]!r}, expected P5")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval <= 0 or maxval > 255:
        raise InvalidArgument(f"{path}: only 8-bit PGM is supported")
    pos += 1  # single whitespace byte after maxval
    data = np.frombuffer(raw, dtype=np.uint8, count=width * height, offset=pos)
    return data.reshape(height, width).astype(np.float64) / maxval


def write_pgm(path, img, comment=None) -> None:
    """8-bit binary PGM; ``comment`` becomes a ``#`` line after the magic."""
    img = as_image(img)
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    height, width = data.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n")
        if comment:
            fh.write(b"# " + comment.replace("\n", " ").encode() + b"\n")
        fh.write(b"%d %d\n255\n" % (width, height))
        fh.write(data.tobytes())


def read_frame_dir(directory):
    """Load numbered ``*.pgm`` frames from a directory, sorted by name."""
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(".pgm"))
    return [read_pgm(os.path.join(directory, n)) for n in names]


RAW_MAGIC = b"UFRAW1\n"


def write_raw_stream(path, frames) -> None:
    """Concatenated 8-bit frames behind a header: magic, width, height, count."""
    frames = [as_image(f) for f in frames]
    height, width = frames[0].shape
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(np.array([width, height, len(frames)], dtype="<u4").tobytes())
        for f in frames:
            if f.shape != (height, width):
                raise InvalidArgument("all frames must share dimensions")
            fh.write(np.clip(np.rint(f * 255.0), 0, 255).astype(np.uint8).tobytes())


def read_raw_stream(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(RAW_MAGIC))
        if magic != RAW_MAGIC:
            raise InvalidArgument(f"{path}: bad raw stream magic")
        width, height, count = np.frombuffer(fh.read(12), dtype="<u4")
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    if data.size != int(width) * int(height) * int(count):
        raise InvalidArgument(f"{path}: truncated raw stream")
    data = data.reshape(int(count), int(height), int(width)).astype(np.float64) / 255.0
    return list(data)
