"""Single-reference augmentation: keyed parameter draws, variants and datasets.

Every variant is a pure function of ``(source image, seed, variant index)``,
so datasets are stored as manifests and pixels regenerated on demand.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .imgproc import (
    FULL_GEOMETRY,
    AffineParams,
    DimensionError,
    EnhanceConfig,
    Geometry,
    affine_transform,
    enhance,
    geometry_pipeline,
    read_image,
    write_image,
)

OTHER = "Other"
_MASK64 = (1 << 64) - 1


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentConfig:
    rotation_max_deg: float = 180.0
    shift_max_frac: float = 0.2
    shear_max: float = 0.2
    zoom_max_frac: float = 0.2
    allow_flip_h: bool = True
    allow_flip_v: bool = True
    enhance: EnhanceConfig = EnhanceConfig()
    variants_per_image: int = 100
    master_seed: int = 0

    def __post_init__(self):
        maxima = (self.rotation_max_deg, self.shift_max_frac, self.shear_max, self.zoom_max_frac)
        if min(maxima) < 0:
            raise ConfigurationError("augmentation maxima must be non-negative")
        if self.variants_per_image < 1:
            raise ConfigurationError("variants_per_image must be at least 1")

    @classmethod
    def identity(cls, **kw) -> "AugmentConfig":
        base = dict(rotation_max_deg=0.0, shift_max_frac=0.0, shear_max=0.0, zoom_max_frac=0.0,
                    allow_flip_h=False, allow_flip_v=False)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        d = dict(d)
        if isinstance(d.get("enhance"), dict):
            d["enhance"] = EnhanceConfig(**d["enhance"])
        return cls(**d)


def keyed_rng(*key: int) -> np.random.Generator:
    """Counter-based generator for a key tuple; no state is shared between keys."""
    seq = np.random.SeedSequence([int(k) & _MASK64 for k in key])
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(*key: int) -> int:
    return int(np.random.SeedSequence([int(k) & _MASK64 for k in key]).generate_state(1, np.uint64)[0])


def sample_params(seed: int, index: int, cfg: AugmentConfig) -> AffineParams:
    """Draw one transformation. Always consumes seven uniforms in fixed order."""
    u = keyed_rng(seed, index).random(7)

    def sym(m, x):
        return float(m * (2.0 * x - 1.0)) + 0.0

    return AffineParams(
        rotation_deg=sym(cfg.rotation_max_deg, u[0]),
        shift_x_frac=sym(cfg.shift_max_frac, u[1]),
        shift_y_frac=sym(cfg.shift_max_frac, u[2]),
        shear=sym(cfg.shear_max, u[3]),
        zoom=1.0 + sym(cfg.zoom_max_frac, u[4]),
        flip_h=bool(cfg.allow_flip_h and u[5] < 0.5),
        flip_v=bool(cfg.allow_flip_v and u[6] < 0.5),
    )


def make_variant(enhanced: np.ndarray, seed: int, index: int, cfg: AugmentConfig,
                 geometry: Geometry = FULL_GEOMETRY) -> np.ndarray:
    return geometry_pipeline(affine_transform(enhanced, sample_params(seed, index, cfg)), geometry)


def augment_reference(ref: np.ndarray, cfg: AugmentConfig, geometry: Geometry = FULL_GEOMETRY) -> list[np.ndarray]:
    h, w = ref.shape[:2]
    if (w, h) != (geometry.in_w, geometry.in_h):
        raise DimensionError(f"reference must be {geometry.in_w}x{geometry.in_h}, got {w}x{h}")
    base = enhance(ref, cfg.enhance)
    return [make_variant(base, cfg.master_seed, i, cfg, geometry) for i in range(cfg.variants_per_image)]


def preprocess_original(img: np.ndarray, enhance_cfg: EnhanceConfig = EnhanceConfig(),
                        geometry: Geometry = FULL_GEOMETRY) -> np.ndarray:
    """Test-time path: enhancement and geometry, no transformation."""
    return geometry_pipeline(enhance(img, enhance_cfg), geometry)


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class DatasetItem:
    source_id: str
    label: str
    variant_index: int
    seed: int
    split: str

    @property
    def item_id(self) -> str:
        return f"{self.source_id}_{self.variant_index}"


def split_counts(class_sizes: Sequence[int], fraction: float) -> list[int]:
    """Training count per class; totals ``round(N * fraction)`` exactly (largest remainder)."""
    total = sum(class_sizes)
    target = int(np.floor(total * fraction + 0.5))
    exact = [n * fraction for n in class_sizes]
    counts = [int(np.floor(x)) for x in exact]
    order = sorted(range(len(class_sizes)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: target - sum(counts)]:
        counts[i] += 1
    return counts


def plan_items(
    sources: Sequence[tuple[str, str, int, int]],
    split_fraction: float,
    split_seed: int,
) -> list[DatasetItem]:
    """Expand ``(source_id, label, variants, seed)`` rows into shuffled, split items.

    The split is stratified per label so validation holds every class.
    """
    if not 0.0 < split_fraction < 1.0:
        raise ConfigurationError("split_fraction must lie strictly between 0 and 1")
    ids = [s[0] for s in sources]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("duplicate source ids")
    by_label: dict[str, list[tuple[str, int, int]]] = OrderedDict()
    for source_id, label, n, seed in sources:
        by_label.setdefault(label, []).extend((source_id, i, seed) for i in range(n))
    labels = sorted(by_label)
    train_n = split_counts([len(by_label[lab]) for lab in labels], split_fraction)
    rng = keyed_rng(split_seed, 0)
    items = []
    for lab, n_train in zip(labels, train_n):
        entries = by_label[lab]
        perm = rng.permutation(len(entries))
        for rank, j in enumerate(perm):
            source_id, idx, seed = entries[j]
            items.append(DatasetItem(source_id, lab, idx, seed, "train" if rank < n_train else "validation"))
    order = keyed_rng(split_seed, 1).permutation(len(items))
    return [items[i] for i in order]


@dataclass
class SraDataset:
    """Labelled variant manifest plus the means to render any item.

    ``load_source`` maps a source id to its RGB image; enhanced sources are
    memoized (bounded) and rendered items optionally kept in memory.
    """

    classes: list[str]
    items: list[DatasetItem]
    configs: dict[str, AugmentConfig]
    load_source: Callable[[str], np.ndarray]
    geometry: Geometry = FULL_GEOMETRY
    source_paths: dict[str, str] = field(default_factory=dict)
    cache_images: bool = True
    _enhanced: OrderedDict = field(default_factory=OrderedDict, repr=False)
    _rendered: dict = field(default_factory=dict, repr=False)

    def split(self, name: str) -> list[DatasetItem]:
        return [it for it in self.items if it.split == name]

    def enhanced_source(self, source_id: str) -> np.ndarray:
        if source_id in self._enhanced:
            self._enhanced.move_to_end(source_id)
            return self._enhanced[source_id]
        img = enhance(self.load_source(source_id), self.configs[source_id].enhance)
        self._enhanced[source_id] = img
        if len(self._enhanced) > 64:
            self._enhanced.popitem(last=False)
        return img

    def image(self, item: DatasetItem) -> np.ndarray:
        key = (item.source_id, item.variant_index)
        if key in self._rendered:
            return self._rendered[key]
        img = make_variant(self.enhanced_source(item.source_id), item.seed, item.variant_index,
                           self.configs[item.source_id], self.geometry)
        if self.cache_images:
            self._rendered[key] = img
        return img

    def label_index(self, item: DatasetItem) -> int:
        return self.classes.index(item.label)

    def arrays(self, items: Sequence[DatasetItem], dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
        """Stack items into ``(n, 1, h, w)`` images and integer labels."""
        g = self.geometry.out
        x = np.empty((len(items), 1, g, g), dtype=dtype)
        for i, it in enumerate(items):
            x[i, 0] = self.image(it)
        y = np.array([self.label_index(it) for it in items], dtype=np.int64)
        return x, y

    # -- persistence --------------------------------------------------------

    def manifest_lines(self) -> list[str]:
        return [
            json.dumps({"source_id": it.source_id, "label": it.label, "variant_index": it.variant_index,
                        "seed": it.seed, "split": it.split})
            for it in self.items
        ]

    def save(self, directory, materialize: bool = False) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "manifest.jsonl").write_text("\n".join(self.manifest_lines()) + "\n")
        meta = {
            "classes": self.classes,
            "geometry": asdict(self.geometry),
            "configs": {k: v.to_dict() for k, v in sorted(self.configs.items())},
            "sources": dict(sorted(self.source_paths.items())),
        }
        (directory / "dataset.json").write_text(json.dumps(meta, indent=1) + "\n")
        if materialize:
            img_dir = directory / "images"
            img_dir.mkdir(exist_ok=True)
            for it in self.items:
                write_image(img_dir / f"{it.item_id}.png", self.image(it))
        return directory

    @classmethod
    def load(cls, directory, cache_images: bool = True) -> "SraDataset":
        directory = Path(directory)
        meta = json.loads((directory / "dataset.json").read_text())
        items = [DatasetItem(**json.loads(line))
                 for line in (directory / "manifest.jsonl").read_text().splitlines() if line.strip()]
        paths = meta["sources"]

        def load_source(source_id):
            p = Path(paths[source_id])
            return read_image(p if p.is_absolute() else directory / p)

        return cls(
            classes=meta["classes"],
            items=items,
            configs={k: AugmentConfig.from_dict(v) for k, v in meta["configs"].items()},
            load_source=load_source,
            geometry=Geometry(**meta["geometry"]),
            source_paths=paths,
            cache_images=cache_images,
        )


def build_sra_dataset(
    references: Mapping[str, np.ndarray],
    others: Sequence[np.ndarray] | Mapping[str, np.ndarray],
    cfg_class: AugmentConfig,
    cfg_other: AugmentConfig,
    split_fraction: float,
    split_seed: int,
    geometry: Geometry = FULL_GEOMETRY,
    other_label: str = OTHER,
    source_paths: Mapping[str, str] | None = None,
) -> SraDataset:
    """Augment one reference per label plus every Other image into a split dataset.

    Each source gets its own seed derived from the config's master seed and
    the source's position, so variants differ across sources.
    """
    if not references:
        raise ConfigurationError("at least one labelled reference is required")
    if not isinstance(others, Mapping):
        others = {f"other_{i:05d}": img for i, img in enumerate(others)}
    images: dict[str, np.ndarray] = {}
    configs: dict[str, AugmentConfig] = {}
    rows = []
    for n, label in enumerate(sorted(references)):
        sid = f"ref_{label}"
        images[sid] = references[label]
        configs[sid] = cfg_class
        rows.append((sid, label, cfg_class.variants_per_image, derive_seed(cfg_class.master_seed, n)))
    for n, sid in enumerate(others):
        images[sid] = others[sid]
        configs[sid] = cfg_other
        rows.append((sid, other_label, cfg_other.variants_per_image, derive_seed(cfg_other.master_seed, 1 << 20, n)))
    for sid, img in images.items():
        h, w = img.shape[:2]
        if (w, h) != (geometry.in_w, geometry.in_h):
            raise DimensionError(f"source {sid} is {w}x{h}, expected {geometry.in_w}x{geometry.in_h}")
    items = plan_items(rows, split_fraction, split_seed)
    classes = sorted(set(references) | ({other_label} if others else set()))
    return SraDataset(classes, items, configs, images.__getitem__, geometry,
                      dict(source_paths or {}))
