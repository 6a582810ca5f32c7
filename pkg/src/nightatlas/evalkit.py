"""Confusion matrices, per-class precision/recall and report export."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

ABSTAIN = "<abstain>"


class UnknownLabelError(KeyError):
    pass


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes.

    ``abstain`` holds per-true-class counts of queries that received no
    prediction; it is ``None`` for classifiers that always predict.
    """

    classes: list[str]
    counts: np.ndarray
    abstain: np.ndarray | None = None

    @property
    def support(self) -> np.ndarray:
        s = self.counts.sum(axis=1)
        if self.abstain is not None:
            s = s + self.abstain
        return s

    @property
    def total(self) -> int:
        return int(self.support.sum())

    @property
    def accuracy(self) -> float:
        total = self.total
        return float(np.trace(self.counts)) / total if total else 0.0


@dataclass
class ClassMetrics:
    classes: list[str]
    precision: np.ndarray
    recall: np.ndarray
    support: np.ndarray

    @property
    def mean_precision(self) -> float:
        return float(np.mean(self.precision)) if len(self.classes) else 0.0

    @property
    def mean_recall(self) -> float:
        return float(np.mean(self.recall)) if len(self.classes) else 0.0

    def subset_means(self, labels: Iterable[str]) -> tuple[float, float]:
        idx = [self.classes.index(c) for c in labels]
        if not idx:
            return 0.0, 0.0
        return float(np.mean(self.precision[idx])), float(np.mean(self.recall[idx]))

    def as_dict(self) -> dict[str, dict[str, float]]:
        return {
            c: {"precision": float(p), "recall": float(r), "support": int(s)}
            for c, p, r, s in zip(self.classes, self.precision, self.recall, self.support)
        }


@dataclass
class EvalReport:
    tag_name: str
    tag: float | int
    confusion: ConfusionMatrix
    metrics: ClassMetrics
    accuracy: float
    top: dict[str, list[tuple[str, float]]] = field(default_factory=dict)


def confusion_matrix(
    pairs: Iterable[tuple[str, str]], classes: Sequence[str], allow_abstain: bool = False
) -> ConfusionMatrix:
    classes = list(classes)
    index = {c: i for i, c in enumerate(classes)}
    n = len(classes)
    counts = np.zeros((n, n), dtype=np.int64)
    abstain = np.zeros(n, dtype=np.int64) if allow_abstain else None
    for true, pred in pairs:
        if true not in index:
            raise UnknownLabelError(f"unregistered true label {true!r}")
        if pred == ABSTAIN and allow_abstain:
            abstain[index[true]] += 1
            continue
        if pred not in index:
            raise UnknownLabelError(f"unregistered predicted label {pred!r}")
        counts[index[true], index[pred]] += 1
    return ConfusionMatrix(classes, counts, abstain)


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = num.astype(np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


def precision_recall(m: ConfusionMatrix) -> ClassMetrics:
    diag = np.diag(m.counts)
    precision = _safe_div(diag, m.counts.sum(axis=0))
    recall = _safe_div(diag, m.support)
    return ClassMetrics(list(m.classes), precision, recall, m.support.copy())


def report_from_predictions(
    true_labels: Sequence[str],
    predicted: Sequence[str],
    classes: Sequence[str],
    tag_name: str,
    tag,
    allow_abstain: bool = False,
) -> EvalReport:
    cm = confusion_matrix(zip(true_labels, predicted), classes, allow_abstain=allow_abstain)
    return EvalReport(tag_name, tag, cm, precision_recall(cm), cm.accuracy)


def argmax_lowest(probs: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest class index."""
    return np.argmax(probs, axis=1)


def top_predictions(
    ids: Sequence[str], probs: np.ndarray, classes: Sequence[str], k: int = 10
) -> dict[str, list[tuple[str, float]]]:
    """Per class, the ``k`` items predicted as that class with the highest probability."""
    pred = argmax_lowest(probs)
    top = {}
    for ci, c in enumerate(classes):
        members = np.flatnonzero(pred == ci)
        # stable sort on -prob keeps input order among equal probabilities
        order = members[np.argsort(-probs[members, ci], kind="stable")][:k]
        top[c] = [(ids[i], float(probs[i, ci])) for i in order]
    return top


def evaluate_probabilities(
    ids: Sequence[str],
    true_labels: Sequence[str],
    probs: np.ndarray,
    classes: Sequence[str],
    tag,
    tag_name: str = "epoch",
    top_k: int = 10,
) -> EvalReport:
    pred = argmax_lowest(probs)
    predicted = [classes[i] for i in pred]
    report = report_from_predictions(true_labels, predicted, classes, tag_name, tag)
    report.top = top_predictions(ids, probs, classes, top_k)
    return report


def evaluate_epoch(
    network,
    images: np.ndarray,
    true_labels: Sequence[str],
    ids: Sequence[str] | None = None,
    epoch: int = 0,
    batch_size: int = 64,
    top_k: int = 10,
) -> tuple[EvalReport, np.ndarray]:
    """Eval-mode forward pass over ``images`` (``n x 1 x h x w``).

    Returns the report and the raw probability matrix so callers can dump it.
    """
    if ids is None:
        ids = [str(i) for i in range(len(images))]
    probs = network.predict(images, batch_size=batch_size)
    classes = list(network.config.classes)
    return evaluate_probabilities(ids, true_labels, probs, classes, epoch, "epoch", top_k), probs


# ---------------------------------------------------------------------------
# export


def _fmt(x: float) -> str:
    return repr(float(x))


def metrics_rows(report: EvalReport) -> list[list[str]]:
    m = report.metrics
    return [
        [str(report.tag), c, _fmt(p), _fmt(r), str(int(s))]
        for c, p, r, s in zip(m.classes, m.precision, m.recall, m.support)
    ]


def write_metrics_csv(reports: Sequence[EvalReport], path) -> None:
    tag_name = reports[0].tag_name if reports else "epoch"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([tag_name, "class", "precision", "recall", "support"])
        for r in reports:
            w.writerows(metrics_rows(r))


def read_metrics_csv(path) -> dict[str, ClassMetrics]:
    """Parse a metrics CSV back into ``ClassMetrics`` keyed by tag."""
    grouped: dict[str, list[list[str]]] = {}
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    for row in rows[1:]:
        grouped.setdefault(row[0], []).append(row)
    out = {}
    for tag, rows in grouped.items():
        out[tag] = ClassMetrics(
            [r[1] for r in rows],
            np.array([float(r[2]) for r in rows]),
            np.array([float(r[3]) for r in rows]),
            np.array([int(r[4]) for r in rows]),
        )
    return out


def write_confusion_csv(m: ConfusionMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["true"] + [f"pred_{c}" for c in m.classes]
        if m.abstain is not None:
            header.append("abstain")
        w.writerow(header)
        for i, c in enumerate(m.classes):
            row = [c] + [str(int(v)) for v in m.counts[i]]
            if m.abstain is not None:
                row.append(str(int(m.abstain[i])))
            w.writerow(row)


def write_summary_csv(reports: Sequence[EvalReport], path, city_classes: Sequence[str] | None = None) -> None:
    tag_name = reports[0].tag_name if reports else "epoch"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([tag_name, "accuracy", "mean_precision", "mean_recall",
                    "city_mean_precision", "city_mean_recall"])
        for r in reports:
            cities = city_classes if city_classes is not None else r.metrics.classes
            cp, cr = r.metrics.subset_means(cities)
            w.writerow([str(r.tag), _fmt(r.accuracy), _fmt(r.metrics.mean_precision),
                        _fmt(r.metrics.mean_recall), _fmt(cp), _fmt(cr)])


def contact_sheet(images: Sequence[np.ndarray], captions: Sequence[str], columns: int = 5):
    """Tile grayscale images into one PIL image with a caption strip under each."""
    from PIL import Image, ImageDraw

    from .imgproc import to_uint8

    if not images:
        return Image.new("L", (1, 1))
    h, w = images[0].shape
    strip = 14
    rows = (len(images) + columns - 1) // columns
    cols = min(columns, len(images))
    sheet = Image.new("L", (cols * w, rows * (h + strip)), color=0)
    draw = ImageDraw.Draw(sheet)
    for i, (img, cap) in enumerate(zip(images, captions)):
        r, c = divmod(i, columns)
        sheet.paste(Image.fromarray(to_uint8(img), mode="L"), (c * w, r * (h + strip)))
        draw.text((c * w + 2, r * (h + strip) + h + 1), cap, fill=255)
    return sheet


def export_report(
    report: EvalReport,
    directory,
    image_lookup: Callable[[str], np.ndarray] | None = None,
) -> list[Path]:
    """Write confusion.csv, metrics.csv, top_predictions.json and contact sheets."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        written = [directory / "confusion.csv", directory / "metrics.csv", directory / "top_predictions.json"]
        write_confusion_csv(report.confusion, written[0])
        write_metrics_csv([report], written[1])
        with open(written[2], "w") as fh:
            json.dump({c: [{"id": i, "probability": p} for i, p in v] for c, v in report.top.items()},
                      fh, indent=1, sort_keys=False)
            fh.write("\n")
        if image_lookup is not None:
            for c, entries in report.top.items():
                if not entries:
                    continue
                sheet = contact_sheet([image_lookup(i) for i, _ in entries],
                                      [f"{i} {p:.2f}" for i, p in entries])
                path = directory / f"top_{c}.png"
                sheet.save(path)
                written.append(path)
    except OSError as exc:
        raise OSError(f"failed writing report to {directory}: {exc}") from exc
    return written


def export_reports(
    reports: Sequence[EvalReport],
    directory,
    image_lookup: Callable[[str], np.ndarray] | None = None,
    city_classes: Sequence[str] | None = None,
) -> None:
    """Per-tag subdirectories plus combined metrics.csv and summary.csv at the root."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for r in reports:
        export_report(r, directory / f"{r.tag_name}_{r.tag}", image_lookup)
    write_metrics_csv(reports, directory / "metrics.csv")
    write_summary_csv(reports, directory / "summary.csv", city_classes)


def smooth_ema(values: Sequence[float], factor: float = 0.6) -> list[float]:
    """Exponential moving average ``s = factor * s + (1 - factor) * x``."""
    out = []
    s = None
    for x in values:
        s = x if s is None else factor * s + (1.0 - factor) * x
        out.append(s)
    return out

