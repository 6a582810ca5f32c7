"""Standard scaling, snapshot PCA ("eigencities") and cosine-distance voting."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import evalkit
from .evalkit import ABSTAIN, EvalReport

MODEL_MAGIC = b"ECPC"
MODEL_VERSION = 1
STD_EPSILON = 1e-8


class InsufficientDataError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass
class ScalerStats:
    mean: np.ndarray
    std: np.ndarray
    epsilon: float = STD_EPSILON


@dataclass
class PcaModel:
    components: np.ndarray          # k x d, orthonormal rows
    explained_variance: np.ndarray  # k, non-increasing
    scaler: ScalerStats

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def d(self) -> int:
        return self.components.shape[1]


@dataclass
class VoteResult:
    label: str
    votes: dict[str, int]
    best_distance: dict[str, float]


def fit_scaler(rows: np.ndarray, epsilon: float = STD_EPSILON) -> ScalerStats:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise InsufficientDataError("need at least two rows to fit a scaler")
    mean = rows.mean(axis=0)
    std = np.sqrt(((rows - mean) ** 2).mean(axis=0))
    return ScalerStats(mean, np.maximum(std, epsilon), epsilon)


def apply_scaler(stats: ScalerStats, rows: np.ndarray) -> np.ndarray:
    """Standardize one row (``d``) or a batch (``n x d``)."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[-1] != stats.mean.shape[0]:
        raise ValueError(f"expected {stats.mean.shape[0]} features, got {rows.shape[-1]}")
    return (rows - stats.mean) / stats.std


def _orthonormal_completion(basis: np.ndarray, d: int, count: int) -> np.ndarray:
    """Extend orthonormal rows ``basis`` with ``count`` more unit vectors."""
    rows = list(basis)
    for j in range(d):
        if len(rows) == basis.shape[0] + count:
            break
        e = np.zeros(d)
        e[j] = 1.0
        for _ in range(2):
            for r in rows:
                e -= (r @ e) * r
        norm = np.linalg.norm(e)
        if norm > 1e-6:
            rows.append(e / norm)
    return np.array(rows[basis.shape[0]:]).reshape(count, d)


def _fix_signs(components: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(len(components)), idx])
    signs[signs == 0] = 1.0
    return components * signs[:, None]


def fit_pca(rows: np.ndarray, k: int = 6, scaler: ScalerStats | None = None) -> PcaModel:
    """Top-``k`` principal components via the ``n x n`` Gram matrix.

    Covariance uses divisor ``n``. ``scaler`` is stored on the model for
    projection; when omitted, the column means (with unit std) are used so
    that :func:`project` centres queries the same way the fit did.
    """
    rows = np.asarray(rows, dtype=np.float64)
    n, d = rows.shape
    if not 1 <= k <= min(n - 1, d):
        raise ConfigurationError(f"k={k} outside [1, {min(n - 1, d)}] for {n}x{d} data")
    mean = rows.mean(axis=0)
    centered = rows - mean
    gram = centered @ centered.T / n
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1][:k]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]

    tol = max(evals[0], 1.0) * 1e-10 if k else 0.0
    good = evals > tol
    comps = np.zeros((k, d))
    if good.any():
        lifted = centered.T @ evecs[:, good]        # d x g
        lifted /= np.linalg.norm(lifted, axis=0)
        comps[good] = lifted.T
    if not good.all():
        # null directions: any orthonormal completion is a valid eigenvector
        comps[~good] = _orthonormal_completion(comps[good], d, int((~good).sum()))
        evals[~good] = 0.0
    if scaler is None:
        scaler = ScalerStats(mean, np.ones(d))
    return PcaModel(_fix_signs(comps), evals, scaler)


def fit_eigencities(rows: np.ndarray, k: int = 6) -> PcaModel:
    stats = fit_scaler(rows)
    return fit_pca(apply_scaler(stats, rows), k, scaler=stats)


def project(model: PcaModel, rows: np.ndarray) -> np.ndarray:
    return apply_scaler(model.scaler, rows) @ model.components.T


def reconstruction_error(model: PcaModel, rows: np.ndarray) -> float:
    z = apply_scaler(model.scaler, rows)
    recon = (z @ model.components.T) @ model.components
    return float(np.linalg.norm(z - recon))


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 1.0
    return float(np.clip(1.0 - (a @ b) / (na * nb), 0.0, 2.0))


def cosine_distance_matrix(queries: np.ndarray, train: np.ndarray) -> np.ndarray:
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    t = np.atleast_2d(np.asarray(train, dtype=np.float64))
    qn = np.linalg.norm(q, axis=1)
    tn = np.linalg.norm(t, axis=1)
    denom = np.outer(qn, tn)
    sim = np.zeros(denom.shape)
    np.divide(q @ t.T, denom, out=sim, where=denom > 0)
    return np.clip(1.0 - sim, 0.0, 2.0)


def _vote(distances: np.ndarray, labels: np.ndarray, classes: Sequence[str], threshold: float) -> VoteResult:
    votes = {}
    best = {}
    for c in classes:
        dc = distances[labels == c]
        votes[c] = int(np.count_nonzero(dc < threshold))
        best[c] = float(dc.min()) if dc.size else float("inf")
    top = max(votes.values()) if votes else 0
    if top == 0:
        return VoteResult(ABSTAIN, votes, best)
    tied = [c for c in classes if votes[c] == top]
    label = min(tied, key=lambda c: best[c])
    return VoteResult(label, votes, best)


def _class_order(labels: Sequence[str]) -> list[str]:
    return sorted(set(labels))


def classify_vote(
    query: np.ndarray,
    train: Sequence[tuple[np.ndarray, str]],
    threshold: float,
) -> VoteResult:
    """Predict the class with the most training embeddings closer than ``threshold``.

    Ties go to the class holding the single closest training embedding; no
    votes at all yields :data:`ABSTAIN`.
    """
    if not train:
        raise InsufficientDataError("empty training set")
    emb = np.array([e for e, _ in train])
    labels = np.array([lab for _, lab in train])
    d = cosine_distance_matrix(query, emb)[0]
    return _vote(d, labels, _class_order(labels), threshold)


def default_thresholds(step: float = 0.05) -> list[float]:
    n = int(round(1.0 / step))
    return [round(i * step, 10) for i in range(n + 1)]


def threshold_sweep(
    test: Sequence[tuple[np.ndarray, str]],
    train: Sequence[tuple[np.ndarray, str]],
    thresholds: Sequence[float] | None = None,
) -> list[EvalReport]:
    """Classify every test embedding at each threshold and score the results.

    Abstentions are kept in a separate column of the confusion matrix: they
    count against recall of the true class and never against precision.
    """
    thresholds = default_thresholds() if thresholds is None else list(thresholds)
    if not thresholds:
        raise ConfigurationError("no thresholds given")
    train_emb = np.array([e for e, _ in train])
    train_lab = np.array([lab for _, lab in train])
    train_classes = _class_order(train_lab)
    true = [lab for _, lab in test]
    classes = train_classes + sorted(set(true) - set(train_classes))
    dist = cosine_distance_matrix(np.array([e for e, _ in test]), train_emb)
    reports = []
    for t in thresholds:
        results = [_vote(row, train_lab, train_classes, t) for row in dist]
        pred = [r.label for r in results]
        reports.append(
            evalkit.report_from_predictions(true, pred, classes, "threshold", t, allow_abstain=True)
        )
    return reports


# ---------------------------------------------------------------------------
# persistence


def save_model(model: PcaModel, path) -> None:
    k, d = model.components.shape
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<III", MODEL_VERSION, k, d))
        for arr in (model.scaler.mean, model.scaler.std, model.components, model.explained_variance):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path) -> PcaModel:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: not an eigencity model file")
    version, k, d = struct.unpack("<III", data[4:16])
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported version {version}")
    expected = 16 + 8 * (2 * d + k * d + k)
    if len(data) != expected:
        raise ModelFormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    vals = np.frombuffer(data, dtype="<f8", offset=16).astype(np.float64)
    mean, std = vals[:d], vals[d:2 * d]
    comps = vals[2 * d:2 * d + k * d].reshape(k, d)
    ev = vals[2 * d + k * d:]
    return PcaModel(comps.copy(), ev.copy(), ScalerStats(mean.copy(), std.copy()))


def save_embeddings(path, embeddings: np.ndarray, labels: Sequence[str], ids: Sequence[str] | None = None) -> None:
    ids = ids if ids is not None else [str(i) for i in range(len(labels))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"] + [f"c{j}" for j in range(embeddings.shape[1])])
        for i, lab, e in zip(ids, labels, embeddings):
            w.writerow([i, lab] + [repr(float(v)) for v in e])


def load_embeddings(path) -> tuple[list[str], list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    ids = [r[0] for r in rows]
    labels = [r[1] for r in rows]
    emb = np.array([[float(v) for v in r[2:]] for r in rows])
    return ids, labels, emb
