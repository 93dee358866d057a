"""Independent oracles shared by the test modules."""

import numpy as np

from filtercorrect.nn import (
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
    ShortcutPad,
)
from filtercorrect.nn.graph import backward, forward


def brute_conv2d(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation (no im2col, no BLAS)."""
    B, C, H, W = x.shape
    N, _, kh, kw = w.shape
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad : pad + H, pad : pad + W] = x
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    y = np.zeros((B, N, Ho, Wo))
    for bi in range(B):
        for n in range(N):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0 if b is None else float(b[n])
                    for c in range(C):
                        for a in range(kh):
                            for e in range(kw):
                                acc += w[n, c, a, e] * xp[bi, c, i * stride + a, j * stride + e]
                    y[bi, n, i, j] = acc
    return y


def rel_err(a, b):
    """Norm-relative discrepancy ||a - b|| / max(||a||, ||b||)."""
    a, b = np.ravel(a), np.ravel(b)
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


def central_diff(f, arr, coords, h=1e-5):
    out = np.empty(len(coords))
    for k, c in enumerate(coords):
        old = arr[c]
        arr[c] = old + h
        fp = f()
        arr[c] = old - h
        fm = f()
        arr[c] = old
        out[k] = (fp - fm) / (2 * h)
    return out


def sample_coords(shape, rng, n):
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(n, size), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def layer_gradcheck(layer, xs, rng, train=False, n_coords=12, h=1e-5):
    """Max norm-relative error of a layer's backward against central differences.

    The scalar objective is ``sum(y * R)`` for a fixed random ``R``.
    """
    y, _ = layer.forward(xs, train=train, keep=True)
    R = rng.standard_normal(y.shape)

    def f():
        return float(np.sum(layer.forward(xs, train=train)[0] * R))

    # BatchNorm mutates its running buffers in train mode; snapshot them so every call sees the same layer
    bufs = {k: v.copy() for k, v in layer.buffers.items()}

    def f_pure():
        for k, v in bufs.items():
            layer.buffers[k] = v.copy()
        return f()

    for k, v in bufs.items():
        layer.buffers[k] = v.copy()
    y, cache = layer.forward(xs, train=train, keep=True)
    dxs, grads = layer.backward(R, cache, [True] * len(xs), bool(layer.params))
    worst = 0.0
    for x, dx in zip(xs, dxs):
        coords = sample_coords(x.shape, rng, n_coords)
        num = central_diff(f_pure, x, coords, h)
        worst = max(worst, rel_err(np.array([dx[c] for c in coords]), num))
    for name, p in layer.params.items():
        coords = sample_coords(p.shape, rng, n_coords)
        num = central_diff(f_pure, p, coords, h)
        worst = max(worst, rel_err(np.array([grads[name][c] for c in coords]), num))
    return worst


def graph_gradcheck(graph, x, labels, rng, n_coords=6, h=1e-5, mode="train"):
    """Max norm-relative error of graph backward vs central differences of the loss."""
    bn_state = {(n.id, k): v.copy() for n in graph.nodes for k, v in n.layer.buffers.items()}

    def restore():
        for (nid, k), v in bn_state.items():
            graph.node(nid).layer.buffers[k] = v.copy()

    def loss():
        restore()
        return forward(graph, x, mode, labels).loss

    restore()
    tape = backward(graph, forward(graph, x, mode, labels))
    worst = 0.0
    for node_id, name, p in graph.parameters(trainable_only=True):
        coords = sample_coords(p.shape, rng, n_coords)
        num = central_diff(loss, p, coords, h)
        ana = np.array([tape[(node_id, name)][c] for c in coords])
        worst = max(worst, rel_err(ana, num))
    restore()
    return worst


def layer_cases(rng):
    """(layer, inputs, train) triples covering every layer kind, in float64."""
    cases = []
    conv = Conv2D(3, 4, 3, stride=2, padding=1)
    conv.init_params(rng, np.float64)
    conv.params["bias"] = rng.standard_normal(4)
    cases.append(("Conv2D", conv, [rng.standard_normal((2, 3, 7, 7))], False))
    gconv = Conv2D(4, 6, 3, padding=1, groups=2, bias=False)
    gconv.init_params(rng, np.float64)
    cases.append(("Conv2D-grouped", gconv, [rng.standard_normal((2, 4, 5, 5))], False))
    sep = SeparableConv2D(3, 4, 2, 3, stride=2, padding=1)
    sep.init_params(rng, np.float64)
    sep.params["bias"] = rng.standard_normal(4)
    cases.append(("SeparableConv2D", sep, [rng.standard_normal((2, 3, 7, 6))], False))
    dense = Dense(12, 5)
    dense.init_params(rng, np.float64)
    cases.append(("Dense", dense, [rng.standard_normal((3, 3, 2, 2))], False))
    cases.append(("ReLU", ReLU(), [rng.standard_normal((2, 3, 4, 4))], False))
    cases.append(("MaxPool", MaxPool(2), [rng.standard_normal((2, 3, 6, 6))], False))
    cases.append(("MaxPool-padded", MaxPool(3, 2, padding=1), [rng.standard_normal((2, 2, 7, 7))], False))
    bn = BatchNorm(3)
    bn.params["gamma"] = rng.uniform(0.5, 1.5, 3)
    bn.params["beta"] = rng.standard_normal(3)
    bn.buffers["running_mean"] = rng.standard_normal(3)
    bn.buffers["running_var"] = rng.uniform(0.5, 2, 3)
    cases.append(("BatchNorm-train", bn, [rng.standard_normal((4, 3, 3, 3))], True))
    cases.append(("BatchNorm-eval", bn, [rng.standard_normal((4, 3, 3, 3))], False))
    cases.append(("ElementwiseAdd", ElementwiseAdd(), [rng.standard_normal((2, 3, 4, 4)) for _ in range(2)], False))
    cases.append(("GlobalAvgPool", GlobalAvgPool(), [rng.standard_normal((2, 3, 4, 5))], False))
    cases.append(("ChannelSelect", ChannelSelect([2, 0]), [rng.standard_normal((2, 3, 4, 4))], False))
    cases.append(
        (
            "ChannelScatter",
            ChannelScatter([1, 3]),
            [rng.standard_normal((2, 4, 3, 3)), rng.standard_normal((2, 2, 3, 3))],
            False,
        )
    )
    cases.append(("ShortcutPad", ShortcutPad(2, 5), [rng.standard_normal((2, 3, 6, 6))], False))
    return cases
