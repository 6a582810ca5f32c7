from .layers import (
    ShapeError,
    conv2d_backward,
    conv2d_forward,
    conv_output_size,
    dense_backward,
    dense_forward,
    dropout_backward,
    dropout_forward,
    flatten_backward,
    flatten_forward,
    relu_backward,
    relu_forward,
    softmax,
    softmax_cross_entropy,
)
from .network import (
    DEFAULT_CLASSES,
    ConstructionError,
    LayerSpec,
    NetConfig,
    Network,
    build_network,
    count_dense_connections,
    l2_penalty,
    layer_shapes,
)
from .optim import AdamState, adam_step

__all__ = [
    "AdamState", "ConstructionError", "DEFAULT_CLASSES", "LayerSpec", "NetConfig", "Network",
    "ShapeError", "adam_step", "build_network", "conv2d_backward", "conv2d_forward",
    "conv_output_size", "count_dense_connections", "dense_backward", "dense_forward",
    "dropout_backward", "dropout_forward", "flatten_backward", "flatten_forward",
    "l2_penalty", "layer_shapes", "relu_backward", "relu_forward", "softmax",
    "softmax_cross_entropy",
]
