"""Command-line driver: one subcommand per workflow stage.

Settings resolve as flags > ``NIGHTATLAS_*`` environment > JSON config file >
defaults. The resolved configuration is printed at startup and written into
the run directory before any work starts.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import augment, dataio, eigencity, evalkit, harness, imgproc
from .neuralnet.network import ConstructionError

ENV_PREFIX = "NIGHTATLAS_"
EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

logger = logging.getLogger("nightatlas")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 0  # 0 leaves parallelism uncapped
    geometry: str = "full"
    # enhancement
    q_low: float = 0.2
    q_high: float = 0.998
    threshold_method: str = "mean"
    # augmentation
    rotation_max_deg: float = 180.0
    shift_max_frac: float = 0.2
    shear_max: float = 0.2
    zoom_max_frac: float = 0.2
    flips: bool = True
    variants_per_image: int = 100
    other_variants: int = 1
    # ids listed here are dropped from Other; empty keeps every image
    other_exclusions: str = ""
    split_fraction: float = 0.8
    # eigencities
    k: int = 6
    thresholds: str = "0:1:0.05"
    spectrum_shift: bool = False
    spectrum_log: bool = False
    # CNN
    mode: str = "C"
    epochs: int = 50
    batch: int = 64
    learning_rate: float = 1e-4
    l2_lambda: float = 5e-4
    dropout_rate: float = 0.4
    scale: int = 1
    top_k: int = 10
    # ingestion
    url_template: str = ""
    retries: int = 3
    workers: int = 4
    timeout: float = 30.0
    force: bool = False
    # synthetic fixtures
    synth_classes: int = 3
    synth_per_class: int = 1
    synth_others: int = 200
    noise_level: float = 0.05

    def geometry_obj(self) -> imgproc.Geometry:
        if self.geometry == "full":
            return imgproc.FULL_GEOMETRY
        if self.geometry == "desk":
            return imgproc.DESK_GEOMETRY
        raise UsageError(f"geometry must be 'full' or 'desk', got {self.geometry!r}")

    def enhance_cfg(self) -> imgproc.EnhanceConfig:
        return imgproc.EnhanceConfig(self.q_low, self.q_high, self.threshold_method)

    def augment_cfg(self, variants: int, master_seed: int) -> augment.AugmentConfig:
        return augment.AugmentConfig(
            rotation_max_deg=self.rotation_max_deg, shift_max_frac=self.shift_max_frac,
            shear_max=self.shear_max, zoom_max_frac=self.zoom_max_frac,
            allow_flip_h=self.flips, allow_flip_v=self.flips, enhance=self.enhance_cfg(),
            variants_per_image=variants, master_seed=master_seed,
        )

    def train_cfg(self) -> harness.TrainConfig:
        return harness.TrainConfig(
            mode=self.mode, epochs=self.epochs, batch_size=self.batch, seed=self.seed,
            learning_rate=self.learning_rate, l2_lambda=self.l2_lambda, scale=self.scale,
            dropout_rate=self.dropout_rate,
        )

    def threshold_list(self) -> list[float]:
        return parse_thresholds(self.thresholds)


def parse_thresholds(text: str) -> list[float]:
    """``start:stop:step`` (inclusive) or a comma list."""
    try:
        if ":" in text:
            start, stop, step = (float(x) for x in text.split(":"))
            if step <= 0 or stop < start:
                raise ValueError
            n = int(round((stop - start) / step))
            return [round(start + i * step, 10) for i in range(n + 1)]
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad threshold spec {text!r}; use start:stop:step or a comma list") from None


def _coerce(name: str, kind, raw):
    if kind is bool or kind == "bool":
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{name}: expected a boolean, got {raw!r}")
    caster = {"int": int, "float": float, "str": str}.get(kind, kind)
    try:
        return caster(raw)
    except (TypeError, ValueError):
        raise UsageError(f"{name}: cannot read {raw!r} as {getattr(caster, '__name__', caster)}") from None


def resolve_config(flags: dict, env: dict | None = None, config_path=None) -> tuple[RunConfig, dict[str, str]]:
    """Merge the four layers; returns the config and the source of every field."""
    env = os.environ if env is None else env
    file_values = {}
    if config_path is not None:
        try:
            file_values = json.loads(Path(config_path).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config file {config_path}: {exc}") from exc
        if not isinstance(file_values, dict):
            raise UsageError(f"config file {config_path} must hold a JSON object")
    known = {f.name: f.type for f in fields(RunConfig)}
    unknown = sorted(set(file_values) - set(known))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    values, sources = {}, {}
    for name, kind in known.items():
        env_key = ENV_PREFIX + name.upper()
        if flags.get(name) is not None:
            values[name], sources[name] = _coerce(name, kind, flags[name]), "flag"
        elif env_key in env:
            values[name], sources[name] = _coerce(name, kind, env[env_key]), "env"
        elif name in file_values:
            values[name], sources[name] = _coerce(name, kind, file_values[name]), "config"
        else:
            sources[name] = "default"
    return RunConfig(**values), sources


def describe(cfg: RunConfig, sources: dict[str, str]) -> str:
    return "\n".join(f"  {k} = {v!r} ({sources[k]})" for k, v in asdict(cfg).items())


def write_run_config(cfg: RunConfig, directory, command: str) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"run_config.{command}.json"
    path.write_text(json.dumps(asdict(cfg), indent=1, sort_keys=True) + "\n")
    return path


def limit_threads(n: int) -> None:
    """Cap BLAS/OpenMP pools; only effective before numpy spins them up."""
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return
    threadpool_limits(n)


# ---------------------------------------------------------------------------
# labelled image lists: CSV with id,label,path


def read_labels(path) -> list[tuple[str, str, Path]]:
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"id", "label", "path"} <= set(reader.fieldnames):
            raise dataio.ManifestError(f"{path}: header must contain id,label,path")
        for row in reader:
            p = Path(row["path"])
            rows.append((row["id"], row["label"], p if p.is_absolute() else path.parent / p))
    return rows


def write_labels(rows: Sequence[tuple[str, str, str]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "path"])
        w.writerows(rows)


# ---------------------------------------------------------------------------
# subcommands


def cmd_fetch(args, cfg: RunConfig) -> int:
    if not cfg.url_template:
        raise UsageError("fetch needs --url-template (or NIGHTATLAS_URL_TEMPLATE)")
    entries = dataio.read_manifest(args.manifest)
    status = dataio.fetch_images(entries, cfg.url_template, args.cache, retries=cfg.retries,
                                 workers=min(cfg.workers, cfg.threads) if cfg.threads else cfg.workers,
                                 timeout=cfg.timeout, force=cfg.force)
    counts = {s: sum(1 for v in status.values() if v == s) for s in ("cached", "downloaded", "missing")}
    Path(args.cache).mkdir(parents=True, exist_ok=True)
    (Path(args.cache) / "fetch_status.json").write_text(json.dumps(status, indent=1, sort_keys=True) + "\n")
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def cmd_subset(args, cfg: RunConfig) -> int:
    entries = dataio.read_manifest(args.manifest)
    boxes = dataio.load_bbox_config(args.bbox)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for label, (box, exclusions) in sorted(boxes.items()):
        subset = dataio.subset_by_bbox(entries, box, exclusions)
        dataio.write_manifest(subset, out / f"{label}.csv")
        print(f"{label}: {len(subset)}")
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    data = dataio.synth_dataset(cfg.synth_classes, cfg.synth_per_class, cfg.seed,
                                other_count=cfg.synth_others, noise_level=cfg.noise_level)
    rows, seen = [], {}
    for img, label in data:
        n = seen.get(label, 0)
        seen[label] = n + 1
        item_id = f"{label}_{n:05d}"
        imgproc.write_image(img_dir / f"{item_id}.png", img)
        rows.append((item_id, label, f"images/{item_id}.png"))
    write_labels(rows, out / "labels.csv")
    print(f"wrote {len(rows)} images to {out}")
    return EXIT_OK


def cmd_augment(args, cfg: RunConfig) -> int:
    """The first image of each non-Other label is its single reference."""
    rows = read_labels(args.labels)
    if cfg.other_exclusions:
        dropped = set(dataio.read_exclusions(cfg.other_exclusions))
        rows = [r for r in rows if not (r[1] == augment.OTHER and r[0] in dropped)]
    refs, ref_paths, others, other_paths = {}, {}, {}, {}
    for item_id, label, path in rows:
        if label == augment.OTHER:
            others[item_id] = imgproc.read_image(path)
            other_paths[item_id] = str(path.resolve())
        elif label not in refs:
            refs[label] = imgproc.read_image(path)
            ref_paths[f"ref_{label}"] = str(path.resolve())
    if not refs:
        raise dataio.ManifestError(f"{args.labels}: no labelled reference images")
    ds = augment.build_sra_dataset(
        refs, others,
        cfg.augment_cfg(cfg.variants_per_image, cfg.seed),
        cfg.augment_cfg(cfg.other_variants, cfg.seed + 1),
        cfg.split_fraction, cfg.seed, geometry=cfg.geometry_obj(),
        source_paths={**ref_paths, **other_paths},
    )
    ds.save(args.out, materialize=args.materialize)
    write_run_config(cfg, args.out, args.command)
    print(f"{len(ds.items)} items ({len(ds.split('train'))} train) in {args.out}")
    return EXIT_OK


def cmd_train_pca(args, cfg: RunConfig) -> int:
    ds = augment.SraDataset.load(args.data)
    run = Path(args.run)
    write_run_config(cfg, run, args.command)
    train = augment.SraDataset(ds.classes, ds.split("train"), ds.configs, ds.load_source, ds.geometry)
    model = harness.train_eigencity(train, cfg.k, shift=cfg.spectrum_shift, log=cfg.spectrum_log)
    model.save(run / "eigencity")
    print(f"fitted k={cfg.k} on {len(model.labels)} items; model in {run / 'eigencity'}")
    return EXIT_OK


def cmd_eval_pca(args, cfg: RunConfig) -> int:
    ds = augment.SraDataset.load(args.data)
    run = Path(args.run)
    write_run_config(cfg, run, args.command)
    model = harness.EigencityModel.load(run / "eigencity")
    items = ds.split("validation")
    emb = model.embed([ds.image(it) for it in items], shift=cfg.spectrum_shift, log=cfg.spectrum_log)
    test = list(zip(emb, [it.label for it in items]))
    reports = eigencity.threshold_sweep(test, model.training_pairs(), cfg.threshold_list())
    cities = [c for c in sorted(set(model.labels)) if c != augment.OTHER]
    evalkit.export_reports(reports, run / "reports" / "pca", city_classes=cities)
    for r in reports:
        print(f"threshold {r.tag:.2f} accuracy {r.accuracy:.4f} mean_precision {r.metrics.mean_precision:.4f}")
    return EXIT_OK


def cmd_train_cnn(args, cfg: RunConfig) -> int:
    ds = augment.SraDataset.load(args.data)
    run = Path(args.run)
    write_run_config(cfg, run, args.command)
    result = harness.train_cnn(ds, cfg.train_cfg(), run_dir=run)
    for r in result.records:
        print(f"epoch {r.epoch} loss {r.train_loss:.4f} val_accuracy {r.val_accuracy:.4f}")
    return EXIT_OK


def _write_probabilities(path, ids, true_labels, probs, classes) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "true"] + list(classes))
        for i, t, p in zip(ids, true_labels, probs):
            w.writerow([i, t] + [repr(float(v)) for v in p])


def _read_probabilities(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    classes = header[2:]
    ids = [r[0] for r in rows]
    true = [r[1] for r in rows]
    probs = np.array([[float(v) for v in r[2:]] for r in rows]).reshape(len(rows), len(classes))
    return ids, true, probs, classes


def cmd_eval_cnn(args, cfg: RunConfig) -> int:
    ds = augment.SraDataset.load(args.data)
    run = Path(args.run)
    checkpoints = sorted((run / "checkpoints").glob("epoch_*.nann"))
    if not checkpoints:
        raise dataio.ManifestError(f"no checkpoints under {run / 'checkpoints'}")
    items = ds.split("validation")
    x, _ = ds.arrays(items)
    ids = [it.item_id for it in items]
    true = [it.label for it in items]
    pred_dir = run / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    for ckpt in checkpoints:
        epoch = int(ckpt.stem.split("_")[1])
        net = harness.load_checkpoint(ckpt)
        report, probs = evalkit.evaluate_epoch(net, x, true, ids, epoch, cfg.batch, cfg.top_k)
        _write_probabilities(pred_dir / f"epoch_{epoch:03d}.csv", ids, true, probs, net.config.classes)
        reports.append(report)
        print(f"epoch {epoch} accuracy {report.accuracy:.4f}")
    lookup = {it.item_id: it for it in items}
    cities = [c for c in ds.classes if c != augment.OTHER]
    evalkit.export_reports(reports, run / "reports" / "cnn", lambda i: ds.image(lookup[i]), cities)
    return EXIT_OK


def cmd_report(args, cfg: RunConfig) -> int:
    """Rebuild CNN report CSVs (and sheets when ``--data`` is given) from saved probabilities."""
    run = Path(args.run)
    files = sorted((run / "predictions").glob("epoch_*.csv"))
    if not files:
        raise dataio.ManifestError(f"no saved predictions under {run / 'predictions'}")
    lookup = None
    if args.data:
        ds = augment.SraDataset.load(args.data)
        by_id = {it.item_id: it for it in ds.items}
        lookup = lambda i: ds.image(by_id[i])  # noqa: E731
    reports = []
    for f in files:
        ids, true, probs, classes = _read_probabilities(f)
        epoch = int(f.stem.split("_")[1])
        reports.append(evalkit.evaluate_probabilities(ids, true, probs, classes, epoch, "epoch", cfg.top_k))
    cities = [c for c in reports[0].metrics.classes if c != augment.OTHER]
    evalkit.export_reports(reports, run / "reports" / "cnn", lookup, cities)
    curves = run / "curves"
    if curves.exists():
        print(f"curves in {curves}")
    print(f"rebuilt {len(reports)} reports in {run / 'reports' / 'cnn'}")
    return EXIT_OK


COMMANDS = {
    "fetch": cmd_fetch, "subset": cmd_subset, "augment": cmd_augment, "train-pca": cmd_train_pca,
    "eval-pca": cmd_eval_pca, "train-cnn": cmd_train_cnn, "eval-cnn": cmd_eval_cnn,
    "synth": cmd_synth, "report": cmd_report,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with RunConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="cap on parallel threads")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nightatlas", description="Night-time city image classification workflow.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("fetch", help="download manifest images into a cache")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--url-template", dest="url_template")
    p.add_argument("--retries", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--timeout", type=float)
    p.add_argument("--force", action="store_const", const=True)

    p = sub.add_parser("subset", help="split a manifest by bounding boxes")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--bbox", required=True, help="bbox config JSON")
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="render a synthetic fixture dataset")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", dest="synth_classes", type=int)
    p.add_argument("--per-class", dest="synth_per_class", type=int)
    p.add_argument("--others", dest="synth_others", type=int)
    p.add_argument("--noise", dest="noise_level", type=float)

    p = sub.add_parser("augment", help="build a single-reference augmented dataset")
    _add_common(p)
    p.add_argument("--labels", required=True, help="CSV with id,label,path")
    p.add_argument("--out", required=True)
    p.add_argument("--geometry", choices=("full", "desk"))
    p.add_argument("--variants", dest="variants_per_image", type=int)
    p.add_argument("--other-variants", dest="other_variants", type=int)
    p.add_argument("--split", dest="split_fraction", type=float)
    p.add_argument("--threshold-method", dest="threshold_method", choices=imgproc.THRESHOLD_METHODS)
    p.add_argument("--other-exclusions", dest="other_exclusions",
                   help="id list removed from Other (cleaned mode)")
    p.add_argument("--materialize", action="store_true", help="also write every variant as PNG")

    for name, helptext in (("train-pca", "fit eigencities"), ("eval-pca", "threshold-vote sweep")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        p.add_argument("--data", required=True)
        p.add_argument("--run", required=True)
        p.add_argument("--k", type=int)
        p.add_argument("--shift", dest="spectrum_shift", action="store_const", const=True)
        p.add_argument("--log", dest="spectrum_log", action="store_const", const=True)
        if name == "eval-pca":
            p.add_argument("--thresholds", help="start:stop:step or comma list")

    p = sub.add_parser("train-cnn", help="train the convolutional classifier")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--mode", choices=harness.MODES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--l2", dest="l2_lambda", type=float)
    p.add_argument("--dropout", dest="dropout_rate", type=float)
    p.add_argument("--scale", type=int, help="divide feature maps and hidden units")

    p = sub.add_parser("eval-cnn", help="per-epoch validation reports")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--top-k", dest="top_k", type=int)

    p = sub.add_parser("report", help="re-render reports from a run directory")
    _add_common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--data", help="dataset directory, for contact sheets")
    p.add_argument("--top-k", dest="top_k", type=int)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if not argv:
            raise UsageError("no subcommand given")
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("no subcommand given")
        flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
        cfg, sources = resolve_config(flags, config_path=args.config)
        if cfg.threads < 0:
            raise UsageError("--threads must be non-negative")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if cfg.threads:
            limit_threads(cfg.threads)
        print(f"nightatlas {args.command}\n{describe(cfg, sources)}", flush=True)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        if not argv:
            parser.print_help(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (harness.ConfigurationError, augment.ConfigurationError, eigencity.ConfigurationError,
            ConstructionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
