"""Input normalisation stored on the graph, so checkpoints are self-contained.

Distortions operate on 0-255 pixel arrays; the network sees per-channel
standardised float32 values.
"""

from __future__ import annotations

import numpy as np


def set_normalization(graph, mean, std):
    graph.meta["input_mean"] = [float(v) for v in np.asarray(mean).ravel()]
    graph.meta["input_std"] = [float(v) for v in np.asarray(std).ravel()]
    return graph


def prepare(graph, images, dtype=None):
    """Map 0-255 images (B, C, H, W) to network input using the graph's stored statistics."""
    dtype = graph.dtype if dtype is None else dtype
    x = np.asarray(images, dtype=np.float64)
    mean = graph.meta.get("input_mean")
    std = graph.meta.get("input_std")
    if mean is not None:
        x = (x - np.asarray(mean).reshape(1, -1, 1, 1)) / np.asarray(std).reshape(1, -1, 1, 1)
    return x.astype(dtype)
