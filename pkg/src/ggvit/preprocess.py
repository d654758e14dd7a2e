"""Face-crop geometry: square expansion, bilinear crop-resize, quadrant split.

The crop box is squared to max(w, h), enlarged 1.1x about its center, cut
out of the frame (zero-filled beyond the borders), resized to S x S, and
split into four quadrants that are each resized back to S x S. Resampling
is bilinear with half-pixel-center alignment; that convention is pinned by
golden tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EXPAND_RATIO = 1.1


@dataclass(frozen=True)
class FaceBox:
    """Axis-aligned pixel box; x/y may go negative after expansion."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"FaceBox needs positive extents, got w={self.w} h={self.h}")

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)


@dataclass
class StreamSet:
    """The five model inputs: whole face X0 plus quadrants X1..X4.

    Quadrant order is upper-left, upper-right, lower-left, lower-right.
    All five arrays are (3, S, S).
    """

    whole: np.ndarray
    quadrants: list[np.ndarray]

    def stacked(self) -> np.ndarray:
        return np.stack([self.whole, *self.quadrants], axis=0)


def expand_box(box: FaceBox) -> FaceBox:
    """Square box of side 1.1 * max(w, h), same center as the input.

    The side is computed as m + m/10, which keeps decimal-friendly inputs
    (integer detector boxes) exact; centers agree bit-exactly there and to
    within rounding (<= 2 ulp) for arbitrary float boxes.
    """
    cx, cy = box.center
    m = max(box.w, box.h)
    side = m + m / 10.0
    half = side / 2.0
    return FaceBox(cx - half, cy - half, side, side)


def select_face(boxes: list[FaceBox], mask_center: tuple[float, float]) -> FaceBox:
    """Box whose center is nearest the mask center; ties keep the lower index."""
    if not boxes:
        raise ValueError("select_face: empty box list")
    mx, my = mask_center
    best, best_d = None, None
    for b in boxes:
        cx, cy = b.center
        d = (cx - mx) ** 2 + (cy - my) ** 2
        if best_d is None or d < best_d:
            best, best_d = b, d
    return best


def _axis_samples(start: float, extent: float, n_out: int):
    """Source coordinates and bilinear weights for one output axis."""
    scale = extent / n_out
    coords = start + (np.arange(n_out) + 0.5) * scale - 0.5
    lo = np.floor(coords).astype(np.int64)
    frac = coords - lo
    return lo, frac


def _bilinear(image: np.ndarray, box: FaceBox, side: int, pad: str) -> np.ndarray:
    c, h, w = image.shape
    y_lo, y_frac = _axis_samples(box.y, box.h, side)
    x_lo, x_frac = _axis_samples(box.x, box.w, side)

    def gather(yi, xi):
        ys = np.clip(yi, 0, h - 1)
        xs = np.clip(xi, 0, w - 1)
        vals = image[:, ys[:, None], xs[None, :]]
        if pad == "edge":
            return vals
        valid = ((yi >= 0) & (yi < h))[:, None] & ((xi >= 0) & (xi < w))[None, :]
        return np.where(valid[None], vals, 0.0)

    wy = y_frac[:, None]
    wx = x_frac[None, :]
    out = ((1 - wy) * (1 - wx) * gather(y_lo, x_lo)
           + (1 - wy) * wx * gather(y_lo, x_lo + 1)
           + wy * (1 - wx) * gather(y_lo + 1, x_lo)
           + wy * wx * gather(y_lo + 1, x_lo + 1))
    return out.astype(image.dtype, copy=False)


def crop_resize(image: np.ndarray, box: FaceBox, side: int) -> np.ndarray:
    """Bilinear crop of ``box`` out of (3, H, W) into (3, side, side).

    Source pixels outside the frame contribute zeros.
    """
    if side < 2 or side % 2:
        raise ValueError(f"crop_resize: side must be even and >= 2, got {side}")
    if box.w <= 0 or box.h <= 0:
        raise ValueError("crop_resize: box with nonpositive side")
    return _bilinear(image, box, side, pad="zero")


def resize(image: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize of a whole (3, H, W) image to (3, side, side).

    Unlike a crop, a whole-image resize clamps at its own border, so a
    constant image stays constant at any scale.
    """
    _, h, w = image.shape
    return _bilinear(image, FaceBox(0.0, 0.0, float(w), float(h)), side, pad="edge")


def quadrant_slices(whole: np.ndarray) -> list[np.ndarray]:
    """The four (3, S/2, S/2) sub-grids of ``whole``: UL, UR, LL, LR."""
    s = whole.shape[-1]
    if s % 2:
        raise ValueError(f"quadrant_slices: side must be even, got {s}")
    half = s // 2
    return [
        whole[:, :half, :half],
        whole[:, :half, half:],
        whole[:, half:, :half],
        whole[:, half:, half:],
    ]


def split_quadrants(whole: np.ndarray) -> StreamSet:
    """StreamSet from a (3, S, S) whole-face image.

    Each quadrant slice is resized back to S x S; the pre-resize slices are
    exact sub-grids of ``whole``.
    """
    side = whole.shape[-1]
    quads = [resize(np.ascontiguousarray(q), side) for q in quadrant_slices(whole)]
    return StreamSet(whole=whole, quadrants=quads)


def build_streams(image: np.ndarray, box: FaceBox | None, side: int) -> StreamSet:
    """Full pipeline: expand box, crop-resize to S x S, split quadrants.

    ``image`` is (3, H, W) float in [0, 1]; a missing box means the full frame.
    """
    if box is None:
        _, h, w = image.shape
        box = FaceBox(0.0, 0.0, float(w), float(h))
    whole = crop_resize(image, expand_box(box), side)
    return split_quadrants(whole)


def to_float(img_u8: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float64 in [0, 1]."""
    return np.ascontiguousarray(img_u8.transpose(2, 0, 1)).astype(np.float64) / 255.0
