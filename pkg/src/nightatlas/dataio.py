"""Image manifests, cached downloads, geographic subsets and synthetic cities."""

from __future__ import annotations

import csv
import json
import logging
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import requests

logger = logging.getLogger(__name__)

MANIFEST_FIELDS = ("id", "mission", "lat", "lon")
IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png")
SYNTH_NAMES = ("Berlin", "Madrid", "Paris", "Lisbon", "Nantes", "Perth", "Seattle", "Tehran")


class ManifestError(ValueError):
    pass


class CacheError(OSError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    mission: str
    lat: float
    lon: float


@dataclass(frozen=True)
class BBox:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    def __post_init__(self):
        if self.lat_min > self.lat_max or self.lon_min > self.lon_max:
            raise ValueError(f"inverted bounding box {self}")

    def contains(self, lat: float, lon: float) -> bool:
        return self.lat_min <= lat <= self.lat_max and self.lon_min <= lon <= self.lon_max


def _parse_degrees(text: str, lo: float, hi: float, name: str, line: int) -> float:
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise ManifestError(f"line {line}: {name} {text!r} is not decimal degrees") from None
    if not np.isfinite(value) or not lo <= value <= hi:
        raise ManifestError(f"line {line}: {name}={value} outside [{lo}, {hi}]")
    return value


def parse_manifest(text: str) -> list[ManifestEntry]:
    """Parse ``id,mission,lat,lon`` CSV text; line numbers in errors are 1-based."""
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        return []
    reader = csv.reader(lines)
    header = [h.strip().lower() for h in next(reader)]
    if tuple(header[:4]) != MANIFEST_FIELDS:
        raise ManifestError(f"line 1: expected header {','.join(MANIFEST_FIELDS)}, got {','.join(header)}")
    entries = []
    seen = set()
    for line_no, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 4:
            raise ManifestError(f"line {line_no}: expected 4 fields, got {len(row)}")
        ident, mission = row[0].strip(), row[1].strip()
        if not ident:
            raise ManifestError(f"line {line_no}: empty id")
        if ident in seen:
            raise ManifestError(f"line {line_no}: duplicate id {ident!r}")
        seen.add(ident)
        lat = _parse_degrees(row[2].strip(), -90.0, 90.0, "lat", line_no)
        lon = _parse_degrees(row[3].strip(), -180.0, 180.0, "lon", line_no)
        entries.append(ManifestEntry(ident, mission, lat, lon))
    return entries


def read_manifest(path) -> list[ManifestEntry]:
    return parse_manifest(Path(path).read_text())


def write_manifest(entries: Iterable[ManifestEntry], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for e in entries:
            w.writerow([e.id, e.mission, repr(e.lat), repr(e.lon)])


# ---------------------------------------------------------------------------
# downloads


def cached_path(cache_dir, entry_id: str) -> Path | None:
    cache_dir = Path(cache_dir)
    for ext in IMAGE_EXTENSIONS:
        p = cache_dir / f"{entry_id}{ext}"
        if p.exists():
            return p
    return None


def _extension(url: str, content_type: str) -> str:
    ct = (content_type or "").lower()
    if "png" in ct:
        return ".png"
    if "jpeg" in ct or "jpg" in ct:
        return ".jpg"
    suffix = Path(url.split("?")[0]).suffix.lower()
    return suffix if suffix in IMAGE_EXTENSIONS else ".jpg"


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".part-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _check_cache_writable(cache_dir: Path) -> None:
    try:
        cache_dir.mkdir(parents=True, exist_ok=True)
        fd, probe = tempfile.mkstemp(dir=cache_dir, prefix=".probe-")
        os.close(fd)
        os.unlink(probe)
    except OSError as exc:
        raise CacheError(f"cache directory {cache_dir} is not writable: {exc}") from exc


def fetch_images(
    entries: Sequence[ManifestEntry],
    url_template: str,
    cache_dir,
    retries: int = 3,
    workers: int = 4,
    timeout: float = 30.0,
    force: bool = False,
    backoff: float = 0.5,
) -> dict[str, str]:
    """Download every uncached entry; returns ``id -> cached|downloaded|missing``.

    A 404 is permanent. Other failures are retried ``retries`` times before the
    entry is recorded missing. Only an unwritable cache aborts the run.
    """
    if "{id}" not in url_template:
        raise ValueError("url template needs an {id} placeholder")
    cache_dir = Path(cache_dir)
    _check_cache_writable(cache_dir)

    def fetch_one(entry: ManifestEntry) -> str:
        if not force and cached_path(cache_dir, entry.id) is not None:
            return "cached"
        url = url_template.format(id=entry.id, mission=entry.mission)
        for attempt in range(retries + 1):
            try:
                resp = requests.get(url, timeout=timeout)
            except requests.RequestException as exc:
                logger.warning("%s: %s (attempt %d)", entry.id, exc, attempt + 1)
            else:
                if resp.status_code == 200:
                    ext = _extension(url, resp.headers.get("Content-Type", ""))
                    try:
                        _atomic_write(cache_dir / f"{entry.id}{ext}", resp.content)
                    except OSError as exc:
                        raise CacheError(f"cannot write {entry.id} to {cache_dir}: {exc}") from exc
                    return "downloaded"
                if resp.status_code in (404, 410):
                    logger.info("%s: HTTP %d, not retrievable", entry.id, resp.status_code)
                    return "missing"
                logger.warning("%s: HTTP %d (attempt %d)", entry.id, resp.status_code, attempt + 1)
            if attempt < retries and backoff:
                time.sleep(backoff * 2 ** attempt)
        return "missing"

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        statuses = list(pool.map(fetch_one, entries))
    return {e.id: s for e, s in zip(entries, statuses)}


# ---------------------------------------------------------------------------
# subsets


def read_exclusions(path) -> list[str]:
    """One id per line; blank lines and ``#`` comments ignored."""
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            out.append(line)
    return out


def subset_by_bbox(entries: Iterable[ManifestEntry], box: BBox, exclusions: Iterable[str] = ()) -> list[ManifestEntry]:
    excluded = set(exclusions)
    return [e for e in entries if box.contains(e.lat, e.lon) and e.id not in excluded]


def load_bbox_config(path) -> dict[str, tuple[BBox, list[str]]]:
    """Read ``{label: {lat_min, lat_max, lon_min, lon_max, exclusions_path}}``.

    Exclusion paths are resolved relative to the config file.
    """
    path = Path(path)
    raw = json.loads(path.read_text())
    out = {}
    for label, spec in raw.items():
        box = BBox(*(float(spec[k]) for k in ("lat_min", "lat_max", "lon_min", "lon_max")))
        excl_path = spec.get("exclusions_path")
        exclusions = []
        if excl_path:
            p = Path(excl_path)
            exclusions = read_exclusions(p if p.is_absolute() else path.parent / p)
        out[label] = (box, exclusions)
    return out


# ---------------------------------------------------------------------------
# synthetic night-city fixtures


ROAD_LAYOUTS = ("random", "radial", "grid")


@dataclass(frozen=True)
class SynthSpec:
    """Layout recipe for one synthetic night-city image.

    ``class_seed`` fixes blob and road positions; ``instance_seed`` only
    drives the per-shot noise.
    """

    class_seed: int
    blob_count: int = 40
    road_count: int = 8
    noise_level: float = 0.05
    instance_seed: int = 0
    layout: str = "random"
    blob_scale: float = 1.0
    width: int = 640
    height: int = 426

    def __post_init__(self):
        if self.blob_count < 0 or self.road_count < 0:
            raise ValueError("blob and road counts must be non-negative")
        if not 0.0 <= self.noise_level < 1.0:
            raise ValueError("noise_level must lie in [0, 1)")
        if self.layout not in ROAD_LAYOUTS:
            raise ValueError(f"unknown road layout {self.layout!r}")


def _segment_distance(px, py, x0, y0, x1, y1):
    dx, dy = x1 - x0, y1 - y0
    length2 = dx * dx + dy * dy
    t = 0.0 if length2 == 0 else np.clip(((px - x0) * dx + (py - y0) * dy) / length2, 0.0, 1.0)
    return np.hypot(px - (x0 + t * dx), py - (y0 + t * dy))


def _road_segments(rng, spec: SynthSpec, cx: float, cy: float) -> list[tuple[float, float, float, float]]:
    w, h = spec.width, spec.height
    segs = []
    if spec.layout == "random":
        for _ in range(spec.road_count):
            pts = rng.uniform([0, 0], [w, h], size=(int(rng.integers(2, 5)), 2))
            segs += [(x0, y0, x1, y1) for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:])]
    elif spec.layout == "radial":
        for a in rng.uniform(0, 2 * np.pi, spec.road_count):
            length = rng.uniform(0.3, 0.6) * w
            segs.append((cx, cy, cx + length * np.cos(a), cy + length * np.sin(a)))
    else:
        theta = rng.uniform(0, np.pi)
        span = 0.45 * w
        half = max(1, spec.road_count // 2)
        offsets = np.linspace(-span, span, half)
        for ang in (theta, theta + np.pi / 2):
            d = np.array([np.cos(ang), np.sin(ang)])
            n = np.array([-d[1], d[0]])
            for o in offsets:
                p0 = np.array([cx, cy]) + o * n - span * d
                p1 = np.array([cx, cy]) + o * n + span * d
                segs.append((p0[0], p0[1], p1[0], p1[1]))
    return segs


def _window(h: int, w: int, x0: float, y0: float, x1: float, y1: float, reach: float):
    """Index bounds of the box around a shape, grown by ``reach`` and clipped."""
    r0 = max(0, int(np.floor(min(y0, y1) - reach)))
    r1 = min(h, int(np.ceil(max(y0, y1) + reach)) + 1)
    c0 = max(0, int(np.floor(min(x0, x1) - reach)))
    c1 = min(w, int(np.ceil(max(x0, x1) + reach)) + 1)
    return r0, r1, c0, c1


def synth_structure(spec: SynthSpec) -> np.ndarray:
    """Noise-free luminance of the city layout determined by ``class_seed``."""
    rng = np.random.default_rng([spec.class_seed, 0x5EED])
    h, w = spec.height, spec.width
    lum = np.full((h, w), 0.02)
    cx, cy = rng.uniform(0.4 * w, 0.6 * w), rng.uniform(0.4 * h, 0.6 * h)
    # lit districts fill the frame the way a city does from orbit
    for _ in range(spec.blob_count):
        bx, by = rng.uniform(0, w), rng.uniform(0, h)
        sigma = rng.uniform(4.0, 20.0) * spec.blob_scale
        amp = rng.uniform(0.2, 0.9)
        r0, r1, c0, c1 = _window(h, w, bx, by, bx, by, 4 * sigma)
        ys, xs = np.ogrid[r0:r1, c0:c1]
        lum[r0:r1, c0:c1] += amp * np.exp(-((xs - bx) ** 2 + (ys - by) ** 2) / (2 * sigma ** 2))
    amp = rng.uniform(0.4, 0.8)
    width = rng.uniform(1.5, 4.0)
    for x0, y0, x1, y1 in _road_segments(rng, spec, cx, cy):
        r0, r1, c0, c1 = _window(h, w, x0, y0, x1, y1, 4 * width)
        if r0 >= r1 or c0 >= c1:
            continue
        ys, xs = np.mgrid[r0:r1, c0:c1].astype(np.float64)
        d = _segment_distance(xs, ys, x0, y0, x1, y1)
        lum[r0:r1, c0:c1] += amp * np.exp(-(d ** 2) / (2 * width ** 2))
    return np.clip(lum, 0.0, 1.0)


def synth_city(spec: SynthSpec) -> np.ndarray:
    """Render a ``height x width x 3`` night-city image with sodium-lamp tint."""
    lum = synth_structure(spec)
    if spec.noise_level > 0:
        rng = np.random.default_rng([spec.class_seed, spec.instance_seed, 0x4015E])
        gain = 1.0 + rng.uniform(-spec.noise_level, spec.noise_level)
        lum = lum * gain + rng.normal(0.0, spec.noise_level * 0.2, lum.shape)
        lum = np.clip(lum, 0.0, 1.0)
    tint = np.array([1.0, 0.82, 0.55])
    return np.clip(lum[..., None] * tint, 0.0, 1.0)


# hand-picked contrasting styles for the first classes: sprawling districts,
# a radial centre, and a dense grid of small lights
ARCHETYPES = (
    {"layout": "random", "blob_count": 14, "road_count": 2, "blob_scale": 2.5},
    {"layout": "radial", "blob_count": 80, "road_count": 16, "blob_scale": 1.0},
    {"layout": "grid", "blob_count": 150, "road_count": 10, "blob_scale": 0.5},
)


def class_style(seed: int, layout: str | None = None) -> dict:
    """Seeded blob/road statistics giving each synthetic class its own character."""
    rng = np.random.default_rng([seed, 0x57])
    return {
        "blob_count": int(rng.integers(8, 60)),
        "road_count": int(rng.integers(4, 12)),
        "blob_scale": float(rng.uniform(0.5, 2.0)),
        "layout": layout if layout is not None else ROAD_LAYOUTS[int(rng.integers(len(ROAD_LAYOUTS)))],
    }


def other_style(seed: int) -> dict:
    """Sparse small-settlement scenes standing in for the unlabelled catch-all."""
    rng = np.random.default_rng([seed, 0x07])
    return {
        "blob_count": int(rng.integers(2, 16)),
        "road_count": int(rng.integers(0, 2)),
        "blob_scale": float(rng.uniform(0.3, 1.0)),
        "layout": "random",
    }


def synth_dataset(
    class_count: int,
    per_class: int,
    seed: int,
    other_count: int = 0,
    noise_level: float = 0.05,
) -> list[tuple[np.ndarray, str]]:
    """``per_class`` noisy renders of one fixed layout per class, plus Other layouts.

    The first classes take the fixed ``ARCHETYPES``, later ones a seeded
    style; Other images are sparse scenes from ``other_style``. The first
    render of each class is the natural single reference.
    """
    if class_count < 1 or per_class < 1:
        raise ValueError("class_count and per_class must be at least 1")
    names = list(SYNTH_NAMES[:class_count]) + [f"city{i}" for i in range(len(SYNTH_NAMES), class_count)]
    out = []
    for c, name in enumerate(names):
        class_seed = int(np.random.SeedSequence([seed, c]).generate_state(1)[0])
        if c < len(ARCHETYPES):
            style = dict(ARCHETYPES[c])
        else:
            style = class_style(class_seed, ROAD_LAYOUTS[c % len(ROAD_LAYOUTS)])
        for j in range(per_class):
            spec = SynthSpec(class_seed, noise_level=noise_level, instance_seed=j, **style)
            out.append((synth_city(spec), name))
    for j in range(other_count):
        other_seed = int(np.random.SeedSequence([seed, 1 << 16, j]).generate_state(1)[0])
        spec = SynthSpec(other_seed, noise_level=noise_level, **other_style(other_seed))
        out.append((synth_city(spec), "Other"))
    return out
