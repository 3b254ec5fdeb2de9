"""Preprocessing chain plus the binarize / inpaint primitives of the loop.

Images are float arrays of shape (H, W, 3) with values in [0, 1].  Maps
and masks are (H, W).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import FullCoverageError

# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PreprocessSpec:
    target_size: int = 128
    fov_threshold: float = 0.06
    graham_alpha: float = 4.0
    graham_beta: float = -4.0
    graham_gamma: float = 0.5
    blur_sigma_fraction: float = 1.0 / 30.0
    border_fraction: float = 0.05

    def __post_init__(self):
        if self.target_size < 32:
            raise ValueError("target_size must be >= 32")
        if self.blur_sigma_fraction <= 0:
            raise ValueError("blur_sigma_fraction must be positive")

    def to_dict(self):
        return dict(self.__dict__)


@dataclass(frozen=True)
class FovBox:
    """Bounding box with inclusive top/left and exclusive bottom/right."""

    top: int
    left: int
    bottom: int
    right: int

    @property
    def height(self):
        return self.bottom - self.top

    @property
    def width(self):
        return self.right - self.left


def extract_fov_bbox(image, fov_threshold=0.06) -> FovBox:
    """Tight box around pixels brighter than ``fov_threshold``.

    Falls back to the full frame when nothing exceeds the threshold.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    inten = image.mean(axis=2) if image.ndim == 3 else image
    bright = inten > fov_threshold
    rows = np.flatnonzero(bright.any(axis=1))
    cols = np.flatnonzero(bright.any(axis=0))
    if rows.size == 0:
        return FovBox(0, 0, h, w)
    return FovBox(int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1)


def _axis_weights(n_in, n_out):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(image, target):
    """Bilinear resampling with pixel-centre alignment.

    ``target`` is an int (square output) or an (height, width) pair.
    Works on (H, W) and (H, W, C) arrays.
    """
    if np.isscalar(target):
        target = (int(target), int(target))
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise ValueError(f"resize target must be >= 1, got {target}")
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if (h, w) == (th, tw):
        return image.copy()
    r0, r1, fr = _axis_weights(h, th)
    c0, c1, fc = _axis_weights(w, tw)
    if image.ndim == 3:
        fr = fr[:, None, None]
        fc = fc[None, :, None]
    else:
        fr = fr[:, None]
        fc = fc[None, :]
    top = image[r0][:, c0] * (1 - fc) + image[r0][:, c1] * fc
    bot = image[r1][:, c0] * (1 - fc) + image[r1][:, c1] * fc
    return top * (1 - fr) + bot * fr


def fov_disc(size, radius=None, center=None):
    """Boolean disc plus the radial distance grid for a square frame."""
    h, w = (size, size) if np.isscalar(size) else size
    cy, cx = center if center is not None else ((h - 1) / 2.0, (w - 1) / 2.0)
    radius = radius if radius is not None else min(h, w) / 2.0
    yy, xx = np.mgrid[:h, :w]
    dist = np.hypot(yy - cy, xx - cx)
    return dist <= radius, dist


def contrast_enhance(image, spec: PreprocessSpec = PreprocessSpec(), fov=None):
    """Graham-style local contrast normalisation.

    ``fov`` is ``(cy, cx, radius)``; by default the frame's inscribed
    circle.  Outside the FOV the output is mid-gray and the outer ring
    of the FOV fades into it.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if fov is None:
        fov = ((h - 1) / 2.0, (w - 1) / 2.0, min(h, w) / 2.0)
    cy, cx, radius = fov
    sigma = spec.blur_sigma_fraction * radius
    blurred = ndimage.gaussian_filter(image, sigma=(sigma, sigma, 0), mode="nearest")
    out = spec.graham_alpha * image + spec.graham_beta * blurred + spec.graham_gamma
    inside, dist = fov_disc((h, w), radius, (cy, cx))
    ring = spec.border_fraction * radius
    fade = np.clip((dist - (radius - ring)) / ring, 0.0, 1.0) if ring > 0 else (~inside).astype(float)
    fade[~inside] = 1.0
    out = out * (1 - fade[..., None]) + 0.5 * fade[..., None]
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class Geometry:
    """Crop-pad-resize transform applied by :func:`preprocess`."""

    box: FovBox
    side: int
    pad_top: int
    pad_left: int
    target: int


def _square_crop(arr, geom: Geometry):
    b = geom.box
    crop = arr[b.top : b.bottom, b.left : b.right]
    shape = (geom.side, geom.side) + arr.shape[2:]
    sq = np.zeros(shape, dtype=np.float64)
    sq[geom.pad_top : geom.pad_top + b.height, geom.pad_left : geom.pad_left + b.width] = crop
    return sq


def preprocess_geometry(image, spec: PreprocessSpec = PreprocessSpec()) -> Geometry:
    box = extract_fov_bbox(image, spec.fov_threshold)
    side = max(box.height, box.width)
    return Geometry(box, side, (side - box.height) // 2, (side - box.width) // 2, spec.target_size)


def preprocess(image, spec: PreprocessSpec = PreprocessSpec(), return_geometry=False):
    """FOV crop, square pad, resize to ``spec.target_size``, contrast enhance."""
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    geom = preprocess_geometry(image, spec)
    sq = resize_bilinear(_square_crop(image, geom), spec.target_size)
    out = contrast_enhance(np.clip(sq, 0.0, 1.0), spec)
    return (out, geom) if return_geometry else out


def warp_mask(mask, geom: Geometry):
    """Carry a ground-truth mask through the preprocessing geometry."""
    sq = _square_crop(np.asarray(mask, dtype=np.float64), geom)
    return resize_bilinear(sq, geom.target) >= 0.5


# ---------------------------------------------------------------------------
# Otsu binarisation
# ---------------------------------------------------------------------------

N_BINS = 256


@dataclass
class Binarization:
    mask: np.ndarray
    th_bin: float
    degenerate: bool = False

    def __iter__(self):
        return iter((self.mask, self.th_bin))


def normalize_minmax(values):
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi <= lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def quantize(normalized):
    return np.minimum((normalized * N_BINS).astype(np.int64), N_BINS - 1)


def otsu_cut(hist) -> int:
    """Cut index k maximising between-class variance of ``hist``.

    Class 0 holds bins ``< k``.  Scores are compared in exact integer
    arithmetic, so ties resolve to the smallest ``k`` reproducibly.
    """
    hist = [int(c) for c in hist]
    total_n = sum(hist)
    total_s = sum(i * c for i, c in enumerate(hist))
    best_k, best_num, best_den = 0, 0, 1
    n0 = s0 = 0
    for k in range(1, len(hist)):
        n0 += hist[k - 1]
        s0 += (k - 1) * hist[k - 1]
        n1 = total_n - n0
        if n0 == 0 or n1 == 0:
            continue
        # sigma_b^2 * N^2 = (s0*n1 - s1*n0)^2 / (n0*n1)
        num = (s0 * n1 - (total_s - s0) * n0) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_k, best_num, best_den = k, num, den
    return best_k


def binarize_otsu(explanation, region=None) -> Binarization:
    """Adaptive binarisation of a nonnegative map.

    The map is min-max normalised (over ``region`` when given), binned
    into 256 levels, and thresholded at the Otsu cut.  Constant maps
    give an empty mask flagged as degenerate.
    """
    m = np.asarray(explanation, dtype=np.float64)
    sel = np.ones(m.shape, bool) if region is None else np.asarray(region, bool)
    vals = m[sel]
    if vals.size == 0 or vals.max() <= vals.min():
        return Binarization(np.zeros(m.shape, bool), 1.0, degenerate=True)
    lo, hi = vals.min(), vals.max()
    norm = np.clip((m - lo) / (hi - lo), 0.0, 1.0)
    hist = np.bincount(quantize(norm[sel]), minlength=N_BINS)
    k = otsu_cut(hist)
    th = k / N_BINS
    return Binarization((norm >= th) & sel, th)


# ---------------------------------------------------------------------------
# Navier-Stokes style inpainting
# ---------------------------------------------------------------------------


@dataclass
class InpaintInfo:
    sweeps: int
    last_update: float
    converged: bool


def _disc_offsets(radius):
    r = int(radius)
    offs = []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            d = np.hypot(dy, dx)
            if 0 < d <= radius:
                offs.append((dy, dx, 1.0 / d))
    return offs


def _shift(arr, dy, dx):
    """arr shifted so out[y, x] = arr[y + dy, x + dx]; edges replicate."""
    h, w = arr.shape[:2]
    ys = np.clip(np.arange(h) + dy, 0, h - 1)
    xs = np.clip(np.arange(w) + dx, 0, w - 1)
    return arr[ys][:, xs]


def _shift_valid(flags, dy, dx):
    """Like :func:`_shift` for booleans, but off-frame samples are False."""
    h, w = flags.shape
    out = np.zeros_like(flags)
    out[max(-dy, 0) : h - max(dy, 0), max(-dx, 0) : w - max(dx, 0)] = \
        flags[max(dy, 0) : h - max(-dy, 0), max(dx, 0) : w - max(-dx, 0)]
    return out


def _fill_inward(img, unknown, radius):
    """Onion-peel initial fill: each boundary ring takes the
    inverse-distance average of known pixels within ``radius``."""
    img = img.copy()
    unknown = unknown.copy()
    offs = _disc_offsets(radius)
    while unknown.any():
        known = ~unknown
        acc = np.zeros_like(img)
        wsum = np.zeros(unknown.shape)
        for dy, dx, wgt in offs:
            k = _shift_valid(known, dy, dx)
            acc += (wgt * k)[..., None] * _shift(img, dy, dx)
            wsum += wgt * k
        front = unknown & (wsum > 0)
        if not front.any():
            raise FullCoverageError("mask region has no reachable boundary data")
        img[front] = acc[front] / wsum[front][:, None]
        unknown &= ~front
    return img


def _ns_sweep(img, edge_k, dt):
    """One relaxation sweep: edge-stopping diffusion plus transport of the
    Laplacian along isophotes.  Returns the proposed new image."""
    up, down = _shift(img, -1, 0), _shift(img, 1, 0)
    left, right = _shift(img, 0, -1), _shift(img, 0, 1)
    lap = up + down + left + right - 4 * img
    lap_y = (_shift(lap, 1, 0) - _shift(lap, -1, 0)) / 2
    lap_x = (_shift(lap, 0, 1) - _shift(lap, 0, -1)) / 2
    iy = (down - up) / 2
    ix = (right - left) / 2
    # smoothness information flows along the isophote direction (-iy, ix)
    transport = -(lap_x * -iy + lap_y * ix)
    nbrs = (up, down, left, right)
    weights = [1.0 / (1.0 + ((n - img) / edge_k) ** 2) for n in nbrs]
    wsum = sum(weights)
    relaxed = sum(w * n for w, n in zip(weights, nbrs)) / wsum
    return relaxed + dt * np.clip(transport, -1.0, 1.0)


def inpaint(image, mask, r_inp=3, *, tol=1e-4, max_sweeps=500, edge_k=0.1,
            transport_dt=0.05, return_info=False):
    """Fill ``mask`` pixels from their surroundings, channel by channel.

    Masked pixels are first seeded by marching inward from the mask
    boundary (neighbourhood radius ``r_inp``), then relaxed with a
    Navier-Stokes style scheme until the largest per-pixel update falls
    below ``tol`` or ``max_sweeps`` is reached.  Pixels outside the mask
    are returned unchanged.
    """
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != image.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {image.shape[:2]}")
    if r_inp < 1:
        raise ValueError("r_inp must be >= 1")
    out = image.copy()
    if not mask.any():
        return (out, InpaintInfo(0, 0.0, True)) if return_info else out
    if mask.all():
        raise FullCoverageError("mask covers the entire image; nothing to inpaint from")

    squeeze = out.ndim == 2
    if squeeze:
        out = out[..., None]
    # work on the mask's bounding box plus a margin of known context
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    pad = int(r_inp) + 2
    r0, r1 = max(rows[0] - pad, 0), min(rows[-1] + pad + 1, mask.shape[0])
    c0, c1 = max(cols[0] - pad, 0), min(cols[-1] + pad + 1, mask.shape[1])
    sub = out[r0:r1, c0:c1].copy()
    m = mask[r0:r1, c0:c1]

    sub = _fill_inward(sub, m, r_inp)
    sweeps, delta = 0, np.inf
    while sweeps < max_sweeps:
        proposal = np.clip(_ns_sweep(sub, edge_k, transport_dt), 0.0, 1.0)
        delta = float(np.abs(proposal[m] - sub[m]).max())
        sub[m] = proposal[m]
        sweeps += 1
        if delta < tol:
            break

    region = out[r0:r1, c0:c1]
    region[m] = sub[m]
    if squeeze:
        out = out[..., 0]
    info = InpaintInfo(sweeps, delta, delta < tol)
    return (out, info) if return_info else out
