"""Training loops for both classifiers, checkpoints and curve files."""

from __future__ import annotations

import csv
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import eigencity, evalkit
from .augment import OTHER, SraDataset, derive_seed, keyed_rng
from .neuralnet import AdamState, NetConfig, Network, adam_step, build_network
from .neuralnet.network import param_shapes
from .spectral import spectral_features

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"NANN"
CHECKPOINT_VERSION = 1
KIND_TAGS = {"conv": 0, "dense": 1, "relu": 2, "dropout": 3, "flatten": 4}
MODES = ("A", "B", "C")


class ConfigurationError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "C"
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    learning_rate: float = 1e-4
    l2_lambda: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    scale: int = 1
    dropout_rate: float = 0.4
    eval_every_epoch: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")

    @property
    def effective_l2(self) -> float:
        return 0.0 if self.mode == "A" else self.l2_lambda

    @property
    def dropout_active(self) -> bool:
        return self.mode == "C"

    def net_config(self, input_size: int, classes: Sequence[str], input_mean: float = 0.0,
                   input_std: float = 1.0) -> NetConfig:
        return NetConfig.default(
            input_size=input_size,
            width_div=self.scale,
            classes=tuple(classes),
            dropout_rate=self.dropout_rate,
            dropout_active=self.dropout_active,
            l2_lambda=self.effective_l2,
            input_mean=input_mean,
            input_std=input_std,
        )


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float
    checkpoint: str | None = None
    wall_time: float = field(default=0.0, compare=False)


@dataclass
class StepRecord:
    step: int
    epoch: int
    loss: float


@dataclass
class TrainResult:
    records: list[EpochRecord]
    steps: list[StepRecord]
    network: Network


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(network: Network, path) -> Path:
    """Binary parameters (float32, little-endian) plus ``<path>.json`` with the NetConfig."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(network.config.layers))]
    for spec, p in zip(network.config.layers, network.params):
        tensors = [] if p is None else [p["W"], p["b"]]
        chunks.append(struct.pack("<II", KIND_TAGS[spec.kind], len(tensors)))
        for t in tensors:
            chunks.append(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
            chunks.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    path.write_bytes(b"".join(chunks))
    Path(str(path) + ".json").write_text(network.config.to_json() + "\n")
    return path


def load_checkpoint(path) -> Network:
    path = Path(path)
    try:
        cfg = NetConfig.from_json(Path(str(path) + ".json").read_text())
    except (OSError, ValueError, TypeError, KeyError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable network config: {exc}") from exc
    data = path.read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointFormatError(f"{path}: truncated at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    version, n_layers = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    if n_layers != len(cfg.layers):
        raise CheckpointFormatError(f"{path}: {n_layers} layers but config has {len(cfg.layers)}")
    expected = param_shapes(cfg)
    params = []
    for i, spec in enumerate(cfg.layers):
        tag, count = struct.unpack("<II", take(8))
        if tag != KIND_TAGS[spec.kind]:
            raise CheckpointFormatError(f"{path}: layer {i} kind tag {tag} != {spec.kind}")
        tensors = []
        for _ in range(count):
            (ndim,) = struct.unpack("<I", take(4))
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
            n = int(np.prod(shape))
            tensors.append(np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32))
        if expected[i] is None:
            if tensors:
                raise CheckpointFormatError(f"{path}: layer {i} should carry no parameters")
            params.append(None)
            continue
        if len(tensors) != 2 or (tensors[0].shape, tensors[1].shape) != expected[i]:
            raise CheckpointFormatError(f"{path}: layer {i} parameter shapes do not match config")
        params.append({"W": tensors[0], "b": tensors[1]})
    if pos != len(data):
        raise CheckpointFormatError(f"{path}: {len(data) - pos} trailing bytes")
    return Network(cfg, params)


# ---------------------------------------------------------------------------
# CNN training


def _require_classes(dataset: SraDataset) -> None:
    for split in ("train", "validation"):
        present = {it.label for it in dataset.split(split)}
        missing = [c for c in dataset.classes if c not in present]
        if missing:
            raise ConfigurationError(f"{split} split has no items for {missing}")


def validation_accuracy(network: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 64) -> float:
    if len(y) == 0:
        return 0.0
    probs = network.predict(x, batch_size=batch_size)
    return float(np.mean(evalkit.argmax_lowest(probs) == y))


def write_curves(directory, steps: Sequence[StepRecord], records: Sequence[EpochRecord], smoothing: float = 0.6) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    smoothed = evalkit.smooth_ema([s.loss for s in steps], smoothing)
    with open(directory / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "epoch", "raw_loss", "smoothed_loss"])
        for s, sm in zip(steps, smoothed):
            w.writerow([s.step, s.epoch, repr(s.loss), repr(sm)])
    with open(directory / "val_accuracy.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "val_accuracy"])
        for r in records:
            w.writerow([r.epoch, repr(r.val_accuracy)])


def train_cnn(
    dataset: SraDataset,
    cfg: TrainConfig,
    run_dir=None,
    network: Network | None = None,
) -> TrainResult:
    """Train the all-convolutional classifier for ``cfg.epochs`` epochs.

    A fresh network standardises its input with the training split's pixel
    mean and std. Every epoch shuffles the training split (keyed by seed and epoch), keeps
    the last partial batch, evaluates validation accuracy in eval mode and,
    with ``run_dir``, writes a checkpoint and refreshes the curve CSVs.
    """
    _require_classes(dataset)
    train_items = dataset.split("train")
    x_train, y_train = dataset.arrays(train_items)
    x_val, y_val = dataset.arrays(dataset.split("validation"))
    if network is None:
        mean, std = float(x_train.mean()), float(x_train.std())
        net_cfg = cfg.net_config(dataset.geometry.out, dataset.classes, mean, std if std > 0 else 1.0)
        network = build_network(net_cfg, seed=cfg.seed)
    state = AdamState(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    params = network.parameter_arrays()
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps({"train": asdict(cfg), "classes": dataset.classes}, indent=1) + "\n")

    records: list[EpochRecord] = []
    steps: list[StepRecord] = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = keyed_rng(cfg.seed, 1000 + epoch).permutation(len(train_items))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            total, _, _, grads = network.loss_and_grads(
                x_train[idx], y_train[idx], l2_lambda=cfg.effective_l2, train=True,
                seed=derive_seed(cfg.seed, step),
            )
            adam_step(state, params, [g[k] for g in grads if g is not None for k in ("W", "b")])
            step += 1
            losses.append(total)
            steps.append(StepRecord(step, epoch, total))
        acc = validation_accuracy(network, x_val, y_val, cfg.batch_size) if cfg.eval_every_epoch else float("nan")
        ckpt = None
        if run_dir is not None:
            ckpt = str(save_checkpoint(network, run_dir / "checkpoints" / f"epoch_{epoch:03d}.nann"))
        rec = EpochRecord(epoch, float(np.mean(losses)), acc, ckpt, time.perf_counter() - t0)
        records.append(rec)
        logger.info("epoch %d loss %.4f val_acc %.4f", epoch, rec.train_loss, acc)
        if run_dir is not None:
            write_curves(run_dir / "curves", steps, records)
    return TrainResult(records, steps, network)


def overfit_batch(network: Network, x: np.ndarray, y: np.ndarray, steps: int, lr: float = 1e-3,
                  l2_lambda: float = 0.0, target: float | None = None) -> list[float]:
    """Repeated Adam steps on one batch without dropout; stops early at ``target``."""
    state = AdamState(lr)
    params = network.parameter_arrays()
    losses = []
    for _ in range(steps):
        total, _, _, grads = network.loss_and_grads(x, y, l2_lambda=l2_lambda, train=False)
        losses.append(total)
        if target is not None and total < target:
            break
        adam_step(state, params, [g[k] for g in grads if g is not None for k in ("W", "b")])
    return losses


# ---------------------------------------------------------------------------
# eigencity training


@dataclass
class EigencityModel:
    model: eigencity.PcaModel
    embeddings: np.ndarray
    labels: list[str]
    ids: list[str]

    def training_pairs(self) -> list[tuple[np.ndarray, str]]:
        return list(zip(self.embeddings, self.labels))

    def embed(self, images: Sequence[np.ndarray], shift: bool = False, log: bool = False) -> np.ndarray:
        feats = np.array([spectral_features(img, shift=shift, log=log) for img in images])
        return eigencity.project(self.model, feats)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        eigencity.save_model(self.model, directory / "model.ecpc")
        eigencity.save_embeddings(directory / "embeddings.csv", self.embeddings, self.labels, self.ids)

    @classmethod
    def load(cls, directory) -> "EigencityModel":
        directory = Path(directory)
        model = eigencity.load_model(directory / "model.ecpc")
        ids, labels, emb = eigencity.load_embeddings(directory / "embeddings.csv")
        return cls(model, emb, labels, ids)


def train_eigencity(dataset: SraDataset, k: int = 6, exclude: Sequence[str] = (OTHER,),
                    shift: bool = False, log: bool = False) -> EigencityModel:
    """Spectral features of every labelled item, standard scaling, top-``k`` PCA."""
    items = [it for it in dataset.items if it.label not in exclude]
    if len(items) < k + 1:
        raise eigencity.InsufficientDataError(f"{len(items)} samples cannot support k={k}")
    feats = np.array([spectral_features(dataset.image(it), shift=shift, log=log) for it in items])
    model = eigencity.fit_eigencities(feats, k)
    emb = eigencity.project(model, feats)
    return EigencityModel(model, emb, [it.label for it in items], [it.item_id for it in items])
