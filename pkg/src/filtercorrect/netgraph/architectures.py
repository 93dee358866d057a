"""Desk-scale networks and the ImageNet-sized reference graphs used for accounting."""

from __future__ import annotations

import numpy as np

from ..nn.graph import GraphError, ModelGraph
from ..nn.layers import (
    BatchNorm,
    Conv2D,
    Dense,
    ElementwiseAdd,
    GlobalAvgPool,
    MaxPool,
    ReLU,
    ShortcutPad,
    SoftmaxCrossEntropy,
)

ARCHITECTURES = ("desknet-p", "desknet-r", "alexnet-ref", "resnet18-ref")


def build_desknet(variant="P", num_classes=10, seed=0, padding=0):
    """DeskNet for 32x32x3 inputs.

    ``P`` is the plain net (three convs, two dense layers); ``R`` is a small
    residual net. For ``P`` the convolutions use ``padding`` (0 = valid).
    Sites are the conv outputs for ``P`` and the stem/post-merge outputs for ``R``.
    """
    variant = str(variant).upper()
    if variant == "P":
        g = _desknet_p(num_classes, padding)
    elif variant == "R":
        g = _desknet_r(num_classes)
    else:
        raise GraphError(f"unknown DeskNet variant {variant!r}; expected 'P' or 'R'")
    g.validate()
    if seed is not None:
        g.init_params(seed)
    return g


def _desknet_p(num_classes, padding):
    g = ModelGraph((3, 32, 32), name="desknet-p")
    p5 = 2 if padding else 0
    p3 = 1 if padding else 0
    g.add("conv1", Conv2D(3, 32, 5, padding=p5))
    g.add("relu1", ReLU())
    g.add("pool1", MaxPool(2))
    g.add("conv2", Conv2D(32, 64, 5, padding=p5))
    g.add("relu2", ReLU())
    g.add("pool2", MaxPool(2))
    g.add("conv3", Conv2D(64, 128, 3, padding=p3))
    g.add("relu3", ReLU())
    flat = int(np.prod(g.shapes()["relu3"]))
    g.add("fc1", Dense(flat, 256))
    g.add("relu4", ReLU())
    g.add("fc2", Dense(256, num_classes))
    g.add("loss", SoftmaxCrossEntropy())
    g.sites = ["conv1", "conv2", "conv3"]
    g.meta["padding"] = int(padding)
    return g


def _basic_block(g, name, src, cin, cout, stride, kernel=3):
    """conv-BN-ReLU-conv-BN + shortcut, merged by an add and followed by ReLU."""
    pad = kernel // 2
    g.add(f"{name}.conv1", Conv2D(cin, cout, kernel, stride=stride, padding=pad, bias=False), src)
    g.add(f"{name}.bn1", BatchNorm(cout))
    g.add(f"{name}.relu1", ReLU())
    g.add(f"{name}.conv2", Conv2D(cout, cout, kernel, padding=pad, bias=False))
    g.add(f"{name}.bn2", BatchNorm(cout))
    short = src
    if stride != 1 or cin != cout:
        short = g.add(f"{name}.short", ShortcutPad(stride, cout), src)
    g.add(f"{name}.add", ElementwiseAdd(), [f"{name}.bn2", short])
    g.add(f"{name}.relu2", ReLU())
    return f"{name}.relu2", f"{name}.add"


def _desknet_r(num_classes):
    g = ModelGraph((3, 32, 32), name="desknet-r")
    g.add("stem.conv", Conv2D(3, 16, 3, padding=1, bias=False))
    g.add("stem.bn", BatchNorm(16))
    g.add("stem.relu", ReLU())
    sites = ["stem.bn"]
    src, cin = "stem.relu", 16
    for k, (cout, stride) in enumerate([(16, 1), (16, 1), (32, 2), (32, 1)], start=1):
        src, site = _basic_block(g, f"block{k}", src, cin, cout, stride)
        sites.append(site)
        cin = cout
    g.add("gap", GlobalAvgPool())
    g.add("fc", Dense(cin, num_classes))
    g.add("loss", SoftmaxCrossEntropy())
    g.sites = sites
    return g


# ---------------------------------------------------------------------------
# reference graphs (accounting only)
# ---------------------------------------------------------------------------

# pre-correction output sizes of the reference nets, pinned as assertions
ALEXNET_OUTPUT_SIZES = {"conv1": 55, "conv2": 27, "conv3": 13, "conv4": 13, "conv5": 13}
RESNET18_OUTPUT_SIZES = {
    "bn1": 112,
    "layer1.0.add": 56,
    "layer1.1.add": 56,
    "layer2.0.add": 28,
    "layer2.1.add": 28,
    "layer3.0.add": 14,
    "layer3.1.add": 14,
    "layer4.0.add": 7,
    "layer4.1.add": 7,
}


def _alexnet():
    g = ModelGraph((3, 227, 227), name="alexnet-ref")
    g.add("conv1", Conv2D(3, 96, 11, stride=4))
    g.add("relu1", ReLU())
    g.add("pool1", MaxPool(3, 2))
    g.add("conv2", Conv2D(96, 256, 5, padding=2, groups=2))
    g.add("relu2", ReLU())
    g.add("pool2", MaxPool(3, 2))
    g.add("conv3", Conv2D(256, 384, 3, padding=1))
    g.add("relu3", ReLU())
    g.add("conv4", Conv2D(384, 384, 3, padding=1, groups=2))
    g.add("relu4", ReLU())
    g.add("conv5", Conv2D(384, 256, 3, padding=1, groups=2))
    g.add("relu5", ReLU())
    g.add("pool5", MaxPool(3, 2))
    g.add("fc6", Dense(256 * 6 * 6, 4096))
    g.add("relu6", ReLU())
    g.add("fc7", Dense(4096, 4096))
    g.add("relu7", ReLU())
    g.add("fc8", Dense(4096, 1000))
    g.add("loss", SoftmaxCrossEntropy())
    g.sites = ["conv1", "conv2", "conv3", "conv4", "conv5"]
    g.meta["output_sizes"] = ALEXNET_OUTPUT_SIZES
    return g


def _resnet18():
    g = ModelGraph((3, 224, 224), name="resnet18-ref")
    g.add("conv1", Conv2D(3, 64, 7, stride=2, padding=3, bias=False))
    g.add("bn1", BatchNorm(64))
    g.add("relu", ReLU())
    g.add("maxpool", MaxPool(3, 2, padding=1))
    sites = ["bn1"]
    src, cin = "maxpool", 64
    for stage, cout in enumerate([64, 128, 256, 512], start=1):
        for b in range(2):
            stride = 2 if (stage > 1 and b == 0) else 1
            src, site = _basic_block(g, f"layer{stage}.{b}", src, cin, cout, stride)
            sites.append(site)
            cin = cout
    g.add("avgpool", GlobalAvgPool())
    g.add("fc", Dense(512, 1000))
    g.add("loss", SoftmaxCrossEntropy())
    g.sites = sites
    g.meta["output_sizes"] = RESNET18_OUTPUT_SIZES
    return g


def build_reference_graph(name, seed=None):
    """Topology of the ImageNet reference nets (``alexnet`` or ``resnet18``).

    Without ``seed`` the parameters are read-only zero views; these graphs
    exist for FLOP/parameter accounting and are never trained.
    """
    key = str(name).lower().removesuffix("-ref")
    if key == "alexnet":
        g = _alexnet()
    elif key == "resnet18":
        g = _resnet18()
    else:
        raise GraphError(f"unknown reference graph {name!r}; expected 'alexnet' or 'resnet18'")
    g.validate()
    shapes = g.shapes()
    for node_id, size in g.meta["output_sizes"].items():
        got = shapes[node_id][1:]
        if got != (size, size):
            raise GraphError(f"{g.name}: {node_id} output {got}, expected {size}x{size}")
    if seed is not None:
        g.init_params(seed)
    else:
        # read-only zero views: no memory, and shared by every copy of the graph
        for n in g.nodes:
            for k, v in n.layer.params.items():
                n.layer.params[k] = np.broadcast_to(np.zeros((), v.dtype), v.shape)
    return g


def build_architecture(name, num_classes=10, seed=0, **kw):
    """Dispatch on a CLI architecture name."""
    if name == "desknet-p":
        return build_desknet("P", num_classes, seed, **kw)
    if name == "desknet-r":
        return build_desknet("R", num_classes, seed)
    if name in ("alexnet-ref", "resnet18-ref"):
        return build_reference_graph(name, seed)
    raise GraphError(f"unknown architecture {name!r}; expected one of {ARCHITECTURES}")
