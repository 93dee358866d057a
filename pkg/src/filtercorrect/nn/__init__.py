from .graph import (
    INPUT,
    ForwardResult,
    GradientTape,
    GraphError,
    ModelGraph,
    Node,
    StateError,
    backward,
    forward,
    predict,
)
from .layers import (
    BatchNorm,
    ChannelScatter,
    ChannelSelect,
    Conv2D,
    Dense,
    ElementwiseAdd,
    GlobalAvgPool,
    MaxPool,
    ReLU,
    SeparableConv2D,
    ShapeError,
    ShortcutPad,
    SoftmaxCrossEntropy,
    conv2d,
    conv2d_backward,
    layer_from_config,
)
from .optim import SGD, ConfigError, sgd_step

__all__ = [
    "INPUT",
    "BatchNorm",
    "ChannelScatter",
    "ChannelSelect",
    "ConfigError",
    "Conv2D",
    "Dense",
    "ElementwiseAdd",
    "ForwardResult",
    "GlobalAvgPool",
    "GradientTape",
    "GraphError",
    "MaxPool",
    "ModelGraph",
    "Node",
    "ReLU",
    "SGD",
    "SeparableConv2D",
    "ShapeError",
    "ShortcutPad",
    "SoftmaxCrossEntropy",
    "StateError",
    "backward",
    "conv2d",
    "conv2d_backward",
    "forward",
    "layer_from_config",
    "predict",
    "sgd_step",
]
