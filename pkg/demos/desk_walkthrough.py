"""Both classifiers end to end on the synthetic desk-scale dataset.

Three synthetic cities each get one reference and 100 variants; 200 sparse
scenes make up Other. Eigencities are swept over thresholds, then the CNN
trains for five epochs. Reports land in the output directory.

    python demos/desk_walkthrough.py run_dir
"""

import sys
from pathlib import Path

from nightatlas import augment, eigencity, evalkit, harness
from nightatlas.dataio import synth_dataset
from nightatlas.imgproc import DESK_GEOMETRY


def build_dataset():
    data = synth_dataset(3, 1, seed=7, other_count=200)
    refs = {label: img for img, label in data if label != augment.OTHER}
    others = [img for img, label in data if label == augment.OTHER]
    return augment.build_sra_dataset(
        refs, others,
        augment.AugmentConfig(variants_per_image=100, master_seed=1),
        augment.AugmentConfig(variants_per_image=1, master_seed=2),
        0.8, 3, geometry=DESK_GEOMETRY,
    )


def run_eigencities(ds, out: Path) -> None:
    train = augment.SraDataset(ds.classes, ds.split("train"), ds.configs, ds.load_source, ds.geometry)
    model = harness.train_eigencity(train, k=6)
    val = ds.split("validation")
    emb = model.embed([ds.image(it) for it in val])
    reports = eigencity.threshold_sweep(list(zip(emb, [it.label for it in val])), model.training_pairs())
    evalkit.export_reports(reports, out / "pca", city_classes=["Berlin", "Madrid", "Paris"])
    best = max(reports, key=lambda r: r.accuracy)
    print(f"eigencities: best threshold {best.tag:.2f}, accuracy {best.accuracy:.3f}")


def run_cnn(ds, out: Path) -> None:
    cfg = harness.TrainConfig(mode="C", epochs=5, batch_size=4, learning_rate=3e-4, scale=4)
    result = harness.train_cnn(ds, cfg, run_dir=out / "cnn")
    for r in result.records:
        print(f"cnn epoch {r.epoch}: loss {r.train_loss:.3f}, validation accuracy {r.val_accuracy:.3f}")
    val = ds.split("validation")
    x, _ = ds.arrays(val)
    lookup = {it.item_id: it for it in val}
    report, _ = evalkit.evaluate_epoch(result.network, x, [it.label for it in val],
                                       [it.item_id for it in val], epoch=cfg.epochs, top_k=5)
    evalkit.export_reports([report], out / "cnn" / "reports", lambda i: ds.image(lookup[i]),
                           ["Berlin", "Madrid", "Paris"])
    for c, entries in report.top.items():
        print(f"  top {c}: " + ", ".join(f"{i} ({p:.2f})" for i, p in entries))


def main(out: Path) -> None:
    ds = build_dataset()
    print(f"{len(ds.items)} items, {len(ds.split('train'))} for training")
    run_eigencities(ds, out)
    run_cnn(ds, out)


if __name__ == "__main__":
    main(Path(sys.argv[1] if len(sys.argv) > 1 else "desk_run"))
