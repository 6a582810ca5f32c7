"""All-convolutional classifier: configuration, construction, forward/backward."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import layers as L

LAYER_KINDS = ("conv", "dense", "relu", "dropout", "flatten")
DEFAULT_CLASSES = ("Berlin", "Madrid", "Other", "Paris")


class ConstructionError(ValueError):
    def __init__(self, index: int, message: str):
        super().__init__(f"layer {index}: {message}")
        self.index = index


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    out: int = 0
    rate: float = 0.0

    @property
    def weighted(self) -> bool:
        return self.kind in ("conv", "dense")


def conv(kernel, stride, pad, out):
    return LayerSpec("conv", kernel=kernel, stride=stride, pad=pad, out=out)


def dense(out):
    return LayerSpec("dense", out=out)


RELU = LayerSpec("relu")
FLATTEN = LayerSpec("flatten")


@dataclass(frozen=True)
class NetConfig:
    layers: tuple[LayerSpec, ...]
    input_size: int = 224
    in_channels: int = 1
    classes: tuple[str, ...] = DEFAULT_CLASSES
    dropout_active: bool = True
    l2_lambda: float = 5e-4
    # inputs are standardised as (x - input_mean) / input_std before the first layer
    input_mean: float = 0.0
    input_std: float = 1.0

    @property
    def class_count(self) -> int:
        return len(self.classes)

    @classmethod
    def default(cls, input_size: int = 224, width_div: int = 1, classes=DEFAULT_CLASSES,
                dropout_rate: float = 0.4, **kw) -> "NetConfig":
        """Eight convolutions (pooling replaced by stride-2 convs), two dense layers, output.

        ``width_div`` divides every feature-map and hidden-unit count; the
        desk-scale network uses ``input_size=64, width_div=4``.
        """
        def m(n):
            return max(1, n // width_div)

        convs = [(7, 2, 3, 96), (3, 2, 1, 96), (5, 2, 2, 256), (3, 2, 1, 256),
                 (3, 1, 1, 384), (3, 1, 1, 384), (3, 1, 1, 256), (3, 2, 1, 256)]
        stack = []
        for k, s, p, f in convs:
            stack += [conv(k, s, p, m(f)), RELU]
        stack.append(FLATTEN)
        for _ in range(2):
            stack += [dense(m(256)), RELU, LayerSpec("dropout", rate=dropout_rate)]
        stack.append(dense(len(classes)))
        return cls(tuple(stack), input_size=input_size, classes=tuple(classes), **kw)

    def to_json(self) -> str:
        d = asdict(self)
        d["layers"] = [
            {k: v for k, v in asdict(spec).items() if k == "kind" or v != getattr(LayerSpec("x"), k)}
            for spec in self.layers
        ]
        return json.dumps(d, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "NetConfig":
        d = json.loads(text)
        d["layers"] = tuple(LayerSpec(**spec) for spec in d["layers"])
        d["classes"] = tuple(d["classes"])
        return cls(**d)


def layer_shapes(cfg: NetConfig) -> list[tuple[int, ...]]:
    """Per-layer output shape (without batch) for a single input image.

    Raises :class:`ConstructionError` naming the first inconsistent layer.
    """
    if not cfg.input_std > 0:
        raise ConstructionError(0, f"input_std must be positive, got {cfg.input_std}")
    shape: tuple[int, ...] = (cfg.in_channels, cfg.input_size, cfg.input_size)
    shapes = []
    for i, spec in enumerate(cfg.layers):
        if spec.kind not in LAYER_KINDS:
            raise ConstructionError(i, f"unknown kind {spec.kind!r}")
        if spec.kind == "conv":
            if len(shape) != 3:
                raise ConstructionError(i, "conv after flatten")
            if spec.kernel < 1 or spec.stride not in (1, 2) or spec.out < 1:
                raise ConstructionError(i, f"invalid conv spec {spec}")
            c, h, w = shape
            ho = L.conv_output_size(h, spec.kernel, spec.stride, spec.pad)
            wo = L.conv_output_size(w, spec.kernel, spec.stride, spec.pad)
            if ho < 1 or wo < 1:
                raise ConstructionError(i, f"kernel {spec.kernel} does not fit {h}x{w}")
            shape = (spec.out, ho, wo)
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif spec.kind == "dense":
            if len(shape) != 1:
                raise ConstructionError(i, "dense layer needs a flattened input")
            if spec.out < 1:
                raise ConstructionError(i, "dense layer needs at least one unit")
            shape = (spec.out,)
        elif spec.kind == "dropout" and not 0.0 <= spec.rate < 1.0:
            raise ConstructionError(i, f"dropout rate {spec.rate} outside [0, 1)")
        shapes.append(shape)
    if shapes[-1] != (cfg.class_count,):
        raise ConstructionError(len(cfg.layers) - 1, f"final output {shapes[-1]} != ({cfg.class_count},)")
    return shapes


def param_shapes(cfg: NetConfig) -> list[tuple[tuple[int, ...], tuple[int, ...]] | None]:
    shapes = layer_shapes(cfg)
    out = []
    prev: tuple[int, ...] = (cfg.in_channels, cfg.input_size, cfg.input_size)
    for spec, shape in zip(cfg.layers, shapes):
        if spec.kind == "conv":
            out.append(((spec.out, prev[0], spec.kernel, spec.kernel), (spec.out,)))
        elif spec.kind == "dense":
            out.append(((prev[0], spec.out), (spec.out,)))
        else:
            out.append(None)
        prev = shape
    return out


@dataclass
class Network:
    config: NetConfig
    params: list[dict[str, np.ndarray] | None]
    seed: int = 0

    @property
    def dtype(self):
        for p in self.params:
            if p is not None:
                return p["W"].dtype
        return np.float32

    def weighted_layers(self) -> list[int]:
        return [i for i, p in enumerate(self.params) if p is not None]

    def parameter_arrays(self) -> list[np.ndarray]:
        return [p[key] for p in self.params if p is not None for key in ("W", "b")]

    def astype(self, dtype) -> "Network":
        params = [None if p is None else {k: v.astype(dtype) for k, v in p.items()} for p in self.params]
        return Network(self.config, params, self.seed)

    def forward(self, x: np.ndarray, train: bool = False, seed: int = 0):
        """Return (logits, cache). Dropout fires only when ``train`` and the config enables it."""
        x = np.asarray(x, dtype=self.dtype)
        expected = (self.config.in_channels, self.config.input_size, self.config.input_size)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise L.ShapeError(f"expected batch x {expected}, got {x.shape}")
        if self.config.input_mean != 0.0 or self.config.input_std != 1.0:
            x = ((x - self.config.input_mean) / self.config.input_std).astype(self.dtype)
        cache = []
        for i, (spec, p) in enumerate(zip(self.config.layers, self.params)):
            entry = {"x": x}
            if spec.kind == "conv":
                x = L.conv2d_forward(x, p["W"], p["b"], spec.stride, spec.pad)
            elif spec.kind == "dense":
                x = L.dense_forward(x, p["W"], p["b"])
            elif spec.kind == "relu":
                x = L.relu_forward(x)
            elif spec.kind == "flatten":
                x = L.flatten_forward(x)
            elif spec.kind == "dropout":
                active = train and self.config.dropout_active
                x, entry["mask"] = L.dropout_forward(x, spec.rate, active, seed=[seed, i])
            cache.append(entry)
        return x, cache

    def backward(self, cache, grad_logits: np.ndarray) -> list[dict[str, np.ndarray] | None]:
        grads: list[dict[str, np.ndarray] | None] = [None] * len(self.params)
        g = grad_logits
        for i in reversed(range(len(self.config.layers))):
            spec, p, entry = self.config.layers[i], self.params[i], cache[i]
            x = entry["x"]
            if spec.kind == "conv":
                g, gw, gb = L.conv2d_backward(x, p["W"], g, spec.stride, spec.pad)
                grads[i] = {"W": gw, "b": gb}
            elif spec.kind == "dense":
                g, gw, gb = L.dense_backward(x, p["W"], g)
                grads[i] = {"W": gw, "b": gb}
            elif spec.kind == "relu":
                g = L.relu_backward(x, g)
            elif spec.kind == "flatten":
                g = L.flatten_backward(x.shape, g)
            elif spec.kind == "dropout":
                g = L.dropout_backward(entry.get("mask"), g)
        return grads

    def loss_and_grads(self, x, labels, l2_lambda: float | None = None, train: bool = True, seed: int = 0):
        """Cross-entropy plus L2 penalty; returns (total, data_loss, penalty, grads)."""
        lam = self.config.l2_lambda if l2_lambda is None else l2_lambda
        logits, cache = self.forward(x, train=train, seed=seed)
        data_loss, g = L.softmax_cross_entropy(logits, labels)
        grads = self.backward(cache, g.astype(logits.dtype))
        penalty, pgrads = l2_penalty(self, lam)
        for gr, pg in zip(grads, pgrads):
            if gr is not None:
                gr["W"] = gr["W"] + pg
        return data_loss + penalty, data_loss, penalty, grads

    def predict(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Eval-mode class probabilities, ``n x class_count`` in float64."""
        out = []
        for start in range(0, len(images), batch_size):
            logits, _ = self.forward(images[start:start + batch_size], train=False)
            out.append(L.softmax(logits.astype(np.float64)))
        if not out:
            return np.zeros((0, self.config.class_count))
        return np.concatenate(out)


def build_network(cfg: NetConfig, seed: int = 0, dtype=np.float32) -> Network:
    """He-normal weights (std ``sqrt(2 / fan_in)``), zero biases, deterministic from ``seed``."""
    rng = np.random.default_rng(seed)
    params = []
    for shapes in param_shapes(cfg):
        if shapes is None:
            params.append(None)
            continue
        w_shape, b_shape = shapes
        fan_in = int(np.prod(w_shape[1:])) if len(w_shape) == 4 else w_shape[0]
        w = rng.standard_normal(w_shape) * np.sqrt(2.0 / fan_in)
        params.append({"W": w.astype(dtype), "b": np.zeros(b_shape, dtype=dtype)})
    return Network(cfg, params, seed)


def l2_penalty(network: Network, lam: float):
    """``(lam / 2) * sum ||W||^2`` over conv/dense weights; biases are exempt."""
    if lam < 0:
        raise ValueError("l2 lambda must be non-negative")
    total = 0.0
    grads = []
    for p in network.params:
        if p is None:
            grads.append(None)
            continue
        w = p["W"]
        total += 0.5 * lam * float(np.sum(w.astype(np.float64) ** 2))
        grads.append(lam * w)
    return total, grads


def count_dense_connections(sizes) -> int:
    """Sum of products of adjacent sizes along a fully connected chain."""
    sizes = list(sizes)
    return sum(a * b for a, b in zip(sizes, sizes[1:]))
