import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nightatlas import augment as au
from nightatlas.dataio import SynthSpec, synth_city
from nightatlas.imgproc import DESK_GEOMETRY, AffineParams, DimensionError, affine_transform


def _ref(seed=0):
    return synth_city(SynthSpec(seed, blob_count=12, road_count=3))


def test_sample_params_within_ranges():
    cfg = au.AugmentConfig()
    draws = [au.sample_params(5, i, cfg) for i in range(100_000)]
    rot = np.array([p.rotation_deg for p in draws])
    sx = np.array([p.shift_x_frac for p in draws])
    sy = np.array([p.shift_y_frac for p in draws])
    sh = np.array([p.shear for p in draws])
    zm = np.array([p.zoom for p in draws])
    assert np.abs(rot).max() <= 180 and np.abs(sx).max() <= 0.2 and np.abs(sy).max() <= 0.2
    assert np.abs(sh).max() <= 0.2 and zm.min() >= 0.8 and zm.max() <= 1.2
    # uniform over the symmetric interval: mean ~0, both tails reached
    assert abs(rot.mean()) < 1.5 and rot.min() < -179 and rot.max() > 179
    assert abs(np.mean([p.flip_h for p in draws]) - 0.5) < 0.01
    assert all(not p.range_violations() for p in draws[:1000])


def test_sample_params_golden():
    p = au.sample_params(42, 7, au.AugmentConfig())
    # independently: seven Philox uniforms keyed by (42, 7), mapped to [-m, m]
    u = np.random.Generator(np.random.Philox(np.random.SeedSequence([42, 7]))).random(7)
    assert p.rotation_deg == pytest.approx(180 * (2 * u[0] - 1), abs=1e-12)
    assert p.zoom == pytest.approx(1 + 0.2 * (2 * u[4] - 1), abs=1e-12)
    assert (p.rotation_deg, p.shift_x_frac, p.shift_y_frac, p.shear, p.zoom, p.flip_h, p.flip_v) == pytest.approx(
        (55.44932766327007, -0.03594511696071234, 0.12085198431272089, 0.1835087934942485,
         1.0517423578329295, False, False), abs=1e-12)


@given(st.integers(0, 2 ** 40), st.integers(0, 10 ** 6))
def test_draws_are_pure_functions_of_key(seed, index):
    cfg = au.AugmentConfig()
    assert au.sample_params(seed, index, cfg) == au.sample_params(seed, index, cfg)


def test_identity_config_is_noop():
    cfg = au.AugmentConfig.identity()
    for i in range(20):
        assert au.sample_params(3, i, cfg) == AffineParams()
    ref = _ref()
    variants = au.augment_reference(ref, au.AugmentConfig.identity(variants_per_image=3))
    base = au.preprocess_original(ref)
    assert all(np.array_equal(v, base) for v in variants)


def test_double_flip_involution():
    img = au.preprocess_original(_ref(1))
    p = AffineParams(flip_h=True, flip_v=True)
    assert np.array_equal(affine_transform(affine_transform(img, p), p), img)


def test_augment_reference_shapes_and_determinism():
    cfg = au.AugmentConfig(variants_per_image=5, master_seed=9)
    a = au.augment_reference(_ref(2), cfg)
    b = au.augment_reference(_ref(2), cfg)
    assert len(a) == 5 and all(v.shape == (224, 224) for v in a)
    assert all(v.min() >= 0 and v.max() <= 1 for v in a)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], a[1])
    with pytest.raises(DimensionError):
        au.augment_reference(np.zeros((100, 100, 3)), cfg)


def test_config_validation():
    with pytest.raises(au.ConfigurationError):
        au.AugmentConfig(rotation_max_deg=-1)
    with pytest.raises(au.ConfigurationError):
        au.AugmentConfig(variants_per_image=0)
    cfg = au.AugmentConfig(shear_max=0.1, master_seed=4)
    assert au.AugmentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_split_counts():
    assert au.split_counts([62520], 50000 / 62520) == [50000]
    assert sum(au.split_counts([100, 100, 100, 200], 0.8)) == 400
    assert au.split_counts([3, 3], 0.5) == [2, 1]  # remainder ties go to the earlier class
    assert sum(au.split_counts([7, 11, 13], 0.3)) == round(31 * 0.3)


def test_other_class_arithmetic():
    assert 3126 * 20 == 62520 and 62520 - 50000 == 12520
    assert 56 * 20 == 1120


def test_plan_items_split_is_stratified_and_deterministic():
    rows = [("a", "A", 10, 1), ("b", "B", 10, 2), ("c", "Other", 30, 3)]
    items = au.plan_items(rows, 0.8, 5)
    assert items == au.plan_items(rows, 0.8, 5)
    assert len(items) == 50 and len({it.item_id for it in items}) == 50
    for lab, n in (("A", 8), ("B", 8), ("Other", 24)):
        assert sum(it.label == lab and it.split == "train" for it in items) == n
    with pytest.raises(au.ConfigurationError):
        au.plan_items(rows, 1.0, 5)
    with pytest.raises(au.ConfigurationError):
        au.plan_items(rows + [("a", "A", 1, 1)], 0.8, 5)


def _small_dataset():
    refs = {"Berlin": _ref(3), "Paris": _ref(4)}
    others = [_ref(5), _ref(6)]
    return au.build_sra_dataset(refs, others, au.AugmentConfig(variants_per_image=4, master_seed=1),
                                au.AugmentConfig(variants_per_image=2, master_seed=2), 0.5, 0,
                                geometry=DESK_GEOMETRY)


def test_build_dataset_structure():
    ds = _small_dataset()
    assert ds.classes == ["Berlin", "Other", "Paris"]
    assert len(ds.items) == 12
    assert {it.item_id for it in ds.items if it.label == "Berlin"} == {f"ref_Berlin_{i}" for i in range(4)}
    x, y = ds.arrays(ds.items)
    assert x.shape == (12, 1, 64, 64) and x.dtype == np.float32
    assert [ds.classes[i] for i in y] == [it.label for it in ds.items]
    with pytest.raises(au.ConfigurationError):
        au.build_sra_dataset({}, [], au.AugmentConfig(), au.AugmentConfig(), 0.8, 0)
    with pytest.raises(DimensionError):
        au.build_sra_dataset({"X": np.zeros((10, 10, 3))}, [], au.AugmentConfig(), au.AugmentConfig(), 0.8, 0)


def test_dataset_save_load_round_trip(tmp_path):
    from nightatlas.imgproc import write_image

    ds = _small_dataset()
    src = tmp_path / "src"
    src.mkdir()
    paths = {}
    for sid in ds.configs:
        write_image(src / f"{sid}.png", ds.load_source(sid))
        paths[sid] = f"../src/{sid}.png"
    ds.source_paths = paths
    out = ds.save(tmp_path / "ds", materialize=True)
    lines = (out / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 12
    assert set(json.loads(lines[0])) == {"source_id", "label", "variant_index", "seed", "split"}
    assert len(list((out / "images").glob("*.png"))) == 12
    back = au.SraDataset.load(out)
    assert back.items == ds.items and back.classes == ds.classes and back.geometry == ds.geometry
    # sources went through 8-bit PNG, so compare against the same quantized pixels
    from nightatlas.imgproc import read_image

    quantized = au.SraDataset(ds.classes, ds.items, ds.configs, lambda sid: read_image(src / f"{sid}.png"),
                              ds.geometry)
    x0, y0 = quantized.arrays(ds.items)
    x1, y1 = back.arrays(back.items)
    assert np.array_equal(x0, x1) and np.array_equal(y0, y1)
    assert np.array_equal(read_image(out / "images" / f"{ds.items[0].item_id}.png"),
                          np.round(ds.image(ds.items[0]) * 255) / 255)
