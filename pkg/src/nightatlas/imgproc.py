"""Image mathematics on unit-interval grayscale and RGB arrays.

Grayscale images are 2D ``float64`` arrays of shape ``(height, width)``;
RGB images are ``(height, width, 3)``. All functions are pure and return
new arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
THRESHOLD_METHODS = ("mean", "median", "p25", "none")


class DimensionError(ValueError):
    """Raised when an image does not have the dimensions an operation needs."""


@dataclass(frozen=True)
class AffineParams:
    rotation_deg: float = 0.0
    shift_x_frac: float = 0.0
    shift_y_frac: float = 0.0
    shear: float = 0.0
    zoom: float = 1.0
    flip_h: bool = False
    flip_v: bool = False

    def range_violations(self) -> list[str]:
        """Names of fields outside the augmentation ranges.

        Not enforced on construction: direct callers may warp with larger
        shifts than the sampler ever produces.
        """
        checks = (
            ("rotation_deg", self.rotation_deg, -180.0, 180.0),
            ("shift_x_frac", self.shift_x_frac, -0.2, 0.2),
            ("shift_y_frac", self.shift_y_frac, -0.2, 0.2),
            ("shear", self.shear, -0.2, 0.2),
            ("zoom", self.zoom, 0.8, 1.2),
        )
        return [name for name, v, lo, hi in checks if not lo <= v <= hi]

    @property
    def is_identity(self) -> bool:
        return self == AffineParams()


@dataclass(frozen=True)
class ThresholdReport:
    threshold_value: int
    zeros_before: int
    zeros_added: int
    total_zeros: int
    sparsity: float


@dataclass(frozen=True)
class EnhanceConfig:
    q_low: float = 0.2
    q_high: float = 0.998
    threshold_method: str = "mean"

    def __post_init__(self):
        if not 0.0 <= self.q_low < self.q_high <= 1.0:
            raise ValueError(f"need 0 <= q_low < q_high <= 1, got {self.q_low}, {self.q_high}")
        if self.threshold_method not in THRESHOLD_METHODS:
            raise ValueError(f"unknown threshold method {self.threshold_method!r}")


def sparsity(total_zeros: int, pixel_count: int) -> float:
    return total_zeros / pixel_count


def round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def to_grayscale(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"expected (h, w, 3) RGB array, got shape {img.shape}")
    r, g, b = LUMA_WEIGHTS
    gray = r * img[..., 0] + g * img[..., 1] + b * img[..., 2]
    return np.clip(gray, 0.0, 1.0)


def rescale_intensity(img: np.ndarray, q_low: float = 0.2, q_high: float = 0.998) -> np.ndarray:
    """Linearly stretch ``[quantile(q_low), quantile(q_high)]`` onto ``[0, 1]``.

    Quantiles use sorted order statistics with linear interpolation. A
    degenerate range (constant image) maps to all zeros.
    """
    if not q_low < q_high:
        raise ValueError("q_low must be below q_high")
    img = np.asarray(img, dtype=np.float64)
    lo, hi = np.quantile(img, [q_low, q_high])
    if hi <= lo:
        return np.zeros_like(img)
    return np.clip((img - lo) / (hi - lo), 0.0, 1.0)


def threshold_value(img: np.ndarray, method: str) -> float:
    if method == "mean":
        return float(img.mean())
    if method == "median":
        return float(np.median(img))
    if method == "p25":
        return float(np.quantile(img, 0.25))
    if method == "none":
        return 0.0
    raise ValueError(f"unknown threshold method {method!r}")


def threshold_image(img: np.ndarray, method: str = "mean") -> tuple[np.ndarray, ThresholdReport]:
    img = np.asarray(img, dtype=np.float64)
    t = threshold_value(img, method)
    out = np.where(img < t, 0.0, img)
    zeros_before = int(np.count_nonzero(img == 0.0))
    total = int(np.count_nonzero(out == 0.0))
    report = ThresholdReport(
        threshold_value=int(round_half_up(t * 255.0)),
        zeros_before=zeros_before,
        zeros_added=total - zeros_before,
        total_zeros=total,
        sparsity=sparsity(total, img.size),
    )
    return out, report


def _affine_matrix(p: AffineParams) -> np.ndarray:
    # Forward 2x2 map on centered (x, y) coordinates: flip, rotate, shear, zoom.
    flip = np.diag([-1.0 if p.flip_h else 1.0, -1.0 if p.flip_v else 1.0])
    theta = math.radians(p.rotation_deg)
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    shear = np.array([[1.0, -math.sin(p.shear)], [0.0, math.cos(p.shear)]])
    zoom = np.diag([p.zoom, p.zoom])
    return zoom @ shear @ rot @ flip


def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``img`` at float coordinates; neighbours outside the image read as 0."""
    h, w = img.shape
    # zero border (1 before, 2 after) lets clamped coordinates index without masks
    padded = np.zeros((h + 3, w + 3), dtype=np.float64)
    padded[1:h + 1, 1:w + 1] = img
    xs = np.clip(xs, -1.0, float(w)) + 1.0
    ys = np.clip(ys, -1.0, float(h)) + 1.0
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    flat = padded.ravel()
    stride = w + 3
    i00 = y0 * stride + x0
    top = flat[i00] * (1.0 - fx) + flat[i00 + 1] * fx
    bottom = flat[i00 + stride] * (1.0 - fx) + flat[i00 + stride + 1] * fx
    return top * (1.0 - fy) + bottom * fy


def affine_transform(img: np.ndarray, p: AffineParams) -> np.ndarray:
    """Warp ``img`` about its center by flip, rotation, shear, zoom, then shift.

    Uses inverse mapping with bilinear sampling. Source positions outside
    the image contribute zeros.
    """
    img = np.asarray(img, dtype=np.float64)
    if p.is_identity:
        return img.copy()
    h, w = img.shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    inv = np.linalg.inv(_affine_matrix(p))
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    u = xs - cx - p.shift_x_frac * w
    v = ys - cy - p.shift_y_frac * h
    src_x = inv[0, 0] * u + inv[0, 1] * v + cx
    src_y = inv[1, 0] * u + inv[1, 1] * v + cy
    # snap round-off so exact grid positions stay exact (flips, 90 degree turns)
    rx, ry = np.round(src_x), np.round(src_y)
    src_x = np.where(np.abs(src_x - rx) < 1e-9, rx, src_x)
    src_y = np.where(np.abs(src_y - ry) < 1e-9, ry, src_y)
    return np.clip(bilinear_sample(img, src_x, src_y), 0.0, 1.0)


def center_crop(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    h, w = img.shape[:2]
    if out_w > w or out_h > h or out_w < 1 or out_h < 1:
        raise DimensionError(f"cannot crop {w}x{h} to {out_w}x{out_h}")
    left = (w - out_w) // 2
    top = (h - out_h) // 2
    return img[top:top + out_h, left:left + out_w].copy()


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize with edge clamping."""
    if out_w < 1 or out_h < 1:
        raise DimensionError(f"invalid target size {out_w}x{out_h}")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    fy = fy[:, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return np.clip(top * (1 - fy) + bottom * fy, 0.0, 1.0)


def enhance(img: np.ndarray, cfg: EnhanceConfig = EnhanceConfig()) -> np.ndarray:
    gray = rescale_intensity(to_grayscale(img), cfg.q_low, cfg.q_high)
    if cfg.threshold_method == "none":
        return gray
    out, _ = threshold_image(gray, cfg.threshold_method)
    return out


@dataclass(frozen=True)
class Geometry:
    """Crop/resize chain: square center crop, bilinear resize, center crop.

    The default is the full-size chain 640x426 -> 426x426 -> 256x256 -> 224x224.
    """

    in_w: int = 640
    in_h: int = 426
    resize: int = 256
    out: int = 224

    @property
    def square(self) -> int:
        return min(self.in_w, self.in_h)


FULL_GEOMETRY = Geometry()
DESK_GEOMETRY = Geometry(resize=72, out=64)


def geometry_pipeline(img: np.ndarray, geometry: Geometry = FULL_GEOMETRY) -> np.ndarray:
    h, w = img.shape
    if (w, h) != (geometry.in_w, geometry.in_h):
        raise DimensionError(f"expected {geometry.in_w}x{geometry.in_h} input, got {w}x{h}")
    sq = geometry.square
    img = center_crop(img, sq, sq)
    img = resize_bilinear(img, geometry.resize, geometry.resize)
    return center_crop(img, geometry.out, geometry.out)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr, dtype=np.float64) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(round_half_up(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def read_image(path) -> np.ndarray:
    """Load an 8-bit PNG/PGM as a gray ``(h, w)`` or RGB ``(h, w, 3)`` unit array."""
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return from_uint8(np.asarray(im))


def write_image(path, img: np.ndarray) -> None:
    """Write a unit-interval image as 8-bit; ``.pgm`` paths produce binary P5."""
    from PIL import Image

    data = to_uint8(img)
    if str(path).lower().endswith(".pgm"):
        if data.ndim != 2:
            raise DimensionError("PGM output needs a grayscale image")
        h, w = data.shape
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(data.tobytes())
        return
    Image.fromarray(data, mode="L" if data.ndim == 2 else "RGB").save(path)
