"""Histogram of oriented gradients, its visualisation, and lung ROI boxes
derived from per-cell gradient energy."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.draw import line as draw_line
from skimage.filters import threshold_otsu

from .errors import ValidationError
from .tensor import resize_bilinear

# libm atan2 rather than numpy's SIMD kernel, whose last-ulp results vary by CPU
_atan2 = np.frompyfunc(math.atan2, 2, 1)


@dataclass(frozen=True)
class HogParams:
    cell_size: int = 8
    block_size: int = 2
    bins: int = 9
    l2hys_clip: float = 0.2
    eps: float = 1e-6

    def __post_init__(self):
        if self.cell_size < 2:
            raise ValidationError("cell_size must be >= 2")
        if self.bins < 2:
            raise ValidationError("bins must be >= 2")
        if not 0 < self.l2hys_clip <= 1:
            raise ValidationError("l2hys_clip must lie in (0, 1]")
        if self.block_size < 1:
            raise ValidationError("block_size must be >= 1")

    @property
    def bin_width(self):
        return 180.0 / self.bins


@dataclass
class HogDescriptor:
    values: np.ndarray          # flat, ordered (block_row, block_col, cell_in_block, bin)
    blocks_shape: tuple         # (n_blocks_y, n_blocks_x)
    cells_shape: tuple          # (n_cells_y, n_cells_x)
    params: HogParams

    def as_blocks(self):
        p = self.params
        return self.values.reshape(*self.blocks_shape, p.block_size * p.block_size, p.bins)

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class RoiBox:
    x: int
    y: int
    width: int
    height: int
    side: str = "unknown"

    def contains(self, x0, y0, x1, y1):
        """True if the pixel rectangle [x0, x1) x [y0, y1) lies inside the box."""
        return self.x <= x0 and self.y <= y0 and x1 <= self.x + self.width and y1 <= self.y + self.height


def resize_image(image, height, width):
    img = np.asarray(image, dtype=np.float64)
    return resize_bilinear(img[None, None], height, width)[0, 0]


def compute_gradients(image):
    """Per-pixel gradient magnitude and unsigned orientation in degrees [0, 180).

    Centered differences (I[+1] - I[-1]) / 2 with replicated borders.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValidationError("expected a single-channel 2-D image")
    p = np.pad(img, 1, mode="edge")
    gx = (p[1:-1, 2:] - p[1:-1, :-2]) / 2.0
    gy = (p[2:, 1:-1] - p[:-2, 1:-1]) / 2.0
    magnitude = np.sqrt(gx * gx + gy * gy)
    angle = np.mod(np.degrees(_atan2(gy, gx).astype(np.float64)), 180.0)
    return magnitude, angle


def _bin_votes(angle, params):
    pos = angle / params.bin_width - 0.5
    base = np.floor(pos)
    frac = pos - base
    lo = np.mod(base.astype(np.intp), params.bins)
    hi = np.mod(lo + 1, params.bins)
    return lo, hi, frac


def cell_histograms(magnitude, angle, params: HogParams = HogParams()):
    """Orientation histograms of shape (n_cells_y, n_cells_x, bins).

    Each pixel splits its magnitude linearly between the two nearest bin
    centres (centres at (i + 0.5) * 180 / bins, wrapping at 180). Rows and
    columns beyond the last whole cell are cropped.
    """
    c = params.cell_size
    ny, nx = magnitude.shape[0] // c, magnitude.shape[1] // c
    hist = np.zeros((ny, nx, params.bins))
    if ny == 0 or nx == 0:
        return hist
    mag = magnitude[:ny * c, :nx * c]
    lo, hi, frac = _bin_votes(angle[:ny * c, :nx * c], params)
    rows, cols = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    # one pixel per cell per step, scanned in the same order as a scalar loop
    for dy in range(c):
        for dx in range(c):
            m = mag[dy::c, dx::c]
            f = frac[dy::c, dx::c]
            hist[rows, cols, lo[dy::c, dx::c]] += m * (1.0 - f)
            hist[rows, cols, hi[dy::c, dx::c]] += m * f
    return hist


def _normalize_l2hys(v, params):
    def l2(a):
        s = np.zeros(a.shape[:-1])
        for k in range(a.shape[-1]):
            s = s + a[..., k] * a[..., k]
        return np.sqrt(s)[..., None]

    v = v / (l2(v) + params.eps)
    v = np.minimum(v, params.l2hys_clip)
    return v / (l2(v) + params.eps)


def hog_descriptor(image, params: HogParams = HogParams()) -> HogDescriptor:
    img = np.asarray(image, dtype=np.float64)
    c, b = params.cell_size, params.block_size
    ny, nx = img.shape[0] // c, img.shape[1] // c
    if ny < b or nx < b:
        raise ValidationError(f"image {img.shape} is smaller than one {b}x{b}-cell block of {c}px cells")
    hist = cell_histograms(*compute_gradients(img), params)
    nby, nbx = ny - b + 1, nx - b + 1
    blocks = np.empty((nby, nbx, b * b, params.bins))
    for k, (cy, cx) in enumerate((cy, cx) for cy in range(b) for cx in range(b)):
        blocks[:, :, k, :] = hist[cy:cy + nby, cx:cx + nbx, :]
    flat = _normalize_l2hys(blocks.reshape(nby, nbx, -1), params)
    return HogDescriptor(flat.reshape(-1), (nby, nbx), (ny, nx), params)


def descriptor_length(height, width, params: HogParams = HogParams()):
    ny, nx = height // params.cell_size, width // params.cell_size
    return max(ny - params.block_size + 1, 0) * max(nx - params.block_size + 1, 0) * params.block_size ** 2 \
        * params.bins


def cell_strengths(descriptor: HogDescriptor):
    """Per-cell histograms recovered by averaging every block that covers the cell."""
    p = descriptor.params
    b = p.block_size
    blocks = descriptor.as_blocks()
    ny, nx = descriptor.cells_shape
    acc = np.zeros((ny, nx, p.bins))
    cnt = np.zeros((ny, nx, 1))
    nby, nbx = descriptor.blocks_shape
    for k, (cy, cx) in enumerate((cy, cx) for cy in range(b) for cx in range(b)):
        acc[cy:cy + nby, cx:cx + nbx] += blocks[:, :, k, :]
        cnt[cy:cy + nby, cx:cx + nbx] += 1
    return acc / np.maximum(cnt, 1)


def hog_visualize(descriptor: HogDescriptor, out_size=None):
    """Star-glyph rendering: one stroke per bin through each cell centre, drawn
    along the edge direction (bin angle + 90 deg), brightness ~ bin strength."""
    p = descriptor.params
    ny, nx = descriptor.cells_shape
    if out_size is None:
        out_size = (ny * p.cell_size, nx * p.cell_size)
    h, w = out_size
    canvas = np.zeros((h, w))
    strengths = cell_strengths(descriptor)
    ch, cw = h / ny, w / nx
    half = 0.45 * min(ch, cw)
    for iy in range(ny):
        for ix in range(nx):
            cy, cx = int((iy + 0.5) * ch), int((ix + 0.5) * cw)
            for k in range(p.bins):
                s = strengths[iy, ix, k]
                if s <= 0:
                    continue
                theta = np.radians((k + 0.5) * p.bin_width + 90.0)
                dy, dx = half * np.sin(theta), half * np.cos(theta)
                r0, c0 = int(round(cy - dy)), int(round(cx - dx))
                r1, c1 = int(round(cy + dy)), int(round(cx + dx))
                rr, cc = draw_line(r0, c0, r1, c1)
                ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
                rr, cc = rr[ok], cc[ok]
                canvas[rr, cc] = np.maximum(canvas[rr, cc], s)
    top = canvas.max()
    return canvas / top if top > 0 else canvas


def cell_energy(image, params: HogParams = HogParams()):
    return cell_histograms(*compute_gradients(image), params).sum(axis=-1)


def extract_roi(image, params: HogParams = HogParams(), min_fraction=0.01, margin_cells=1):
    """Up to two lung boxes from Otsu-thresholded cell gradient energy.

    Each box is the cell-grid extent of a 4-connected component of
    above-threshold cells, grown by ``margin_cells`` (partially covered edge
    cells can fall below the threshold) and clipped to the image. Falls back
    to one full-image box (side "unknown") when no component covers more than
    ``min_fraction`` of the cells.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    full = [RoiBox(0, 0, w, h, "unknown")]
    energy = cell_energy(img, params)
    if energy.size == 0 or np.ptp(energy) <= 0:
        return full
    mask = energy > threshold_otsu(energy)
    labels, n = ndimage.label(mask)  # default structure is 4-connected
    if n == 0:
        return full
    sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, n + 1))
    keep = [i + 1 for i in np.argsort(-sizes, kind="stable")[:2] if sizes[i] > min_fraction * energy.size]
    if not keep:
        return full
    c, m = params.cell_size, margin_cells
    found = []
    for lab in keep:
        ys, xs = np.nonzero(labels == lab)
        x0, y0 = max(int(xs.min()) - m, 0) * c, max(int(ys.min()) - m, 0) * c
        x1 = min((int(xs.max()) + 1 + m) * c, w)
        y1 = min((int(ys.max()) + 1 + m) * c, h)
        found.append((float((xs.mean() + 0.5) * c), (x0, y0, x1 - x0, y1 - y0)))
    found.sort(key=lambda t: t[0])
    if len(found) == 2:
        sides = ("left", "right")
    else:
        sides = ("left" if found[0][0] < w / 2 else "right",)
    return [RoiBox(*box, side) for (_, box), side in zip(found, sides)]


def roi_crop(image, boxes):
    """Crop to the bounding union of ``boxes``."""
    x0 = min(b.x for b in boxes)
    y0 = min(b.y for b in boxes)
    x1 = max(b.x + b.width for b in boxes)
    y1 = max(b.y + b.height for b in boxes)
    return np.asarray(image)[y0:y1, x0:x1]
