"""Layer kinds with explicit forward/backward passes.

Every layer works on batched arrays; shapes passed to ``out_shape`` and
``flops`` exclude the batch axis. ``backward`` receives the upstream gradient,
the cache produced by ``forward`` and a per-input mask saying which input
gradients are actually needed, and returns ``(input_grads, param_grads)``.
"""

from __future__ import annotations

import numpy as np

from .. import _kernels as K


class ShapeError(ValueError):
    """Raised when a tensor does not match the shape a layer expects."""


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def he_uniform(rng, shape, fan_in, dtype=np.float32):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# functional convolution
# ---------------------------------------------------------------------------


def conv2d(x, w, b=None, stride=1, padding=0, groups=1, keep_cols=False):
    """Cross-correlation of ``x`` (B, C, H, W) with ``w`` (N, C/groups, kh, kw).

    Returns ``(y, cols)``; ``cols`` is the list of per-group im2col matrices
    when ``keep_cols`` is set (needed for the weight gradient), else ``None``.
    """
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    B, C, H, W = x.shape
    N, Cg, kh, kw = w.shape
    if C != Cg * groups:
        raise ShapeError(f"conv expects {Cg * groups} input channels, got {C} (input shape {x.shape})")
    Ho, Wo = K.out_size(H, kh, sh, ph), K.out_size(W, kw, sw, pw)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv kernel {kh}x{kw} too large for input {H}x{W} with padding {ph},{pw}")
    Ng = N // groups
    pointwise = kh == kw == sh == sw == 1 and ph == pw == 0
    outs, kept = [], []
    for g in range(groups):
        xg = x if groups == 1 else x[:, g * Cg : (g + 1) * Cg]
        if pointwise:
            cols = np.ascontiguousarray(xg.transpose(1, 0, 2, 3)).reshape(Cg, -1)
        else:
            cols = K.im2col(np.ascontiguousarray(xg), kh, kw, sh, sw, ph, pw)
        wg = w[g * Ng : (g + 1) * Ng].reshape(Ng, -1)
        outs.append(wg @ cols)
        if keep_cols:
            kept.append(cols)
    out = outs[0] if groups == 1 else np.concatenate(outs, axis=0)
    y = out.reshape(N, B, Ho, Wo).transpose(1, 0, 2, 3)
    if b is not None:
        y = y + b.reshape(1, N, 1, 1)
    return np.ascontiguousarray(y), (kept if keep_cols else None)


def conv2d_backward(dy, x_shape, w, cols, stride=1, padding=0, groups=1, need_dx=True):
    """Gradients of :func:`conv2d`; returns ``(dx, dw, db)``."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    B, C, H, W = x_shape
    N, Cg, kh, kw = w.shape
    Ng = N // groups
    dymat = np.ascontiguousarray(dy.transpose(1, 0, 2, 3)).reshape(N, -1)
    dw = db = None
    if cols is not None:
        dw = np.empty_like(w)
        for g in range(groups):
            dw[g * Ng : (g + 1) * Ng] = (dymat[g * Ng : (g + 1) * Ng] @ cols[g].T).reshape(Ng, Cg, kh, kw)
        db = dymat.sum(axis=1)
    dx = None
    if need_dx:
        parts = []
        for g in range(groups):
            wg = w[g * Ng : (g + 1) * Ng].reshape(Ng, -1)
            dcols = wg.T @ dymat[g * Ng : (g + 1) * Ng]
            if kh == kw == sh == sw == 1 and ph == pw == 0:
                parts.append(dcols.reshape(Cg, B, H, W).transpose(1, 0, 2, 3))
            else:
                parts.append(K.col2im(dcols, (B, Cg, H, W), kh, kw, sh, sw, ph, pw))
        dx = parts[0] if groups == 1 else np.concatenate(parts, axis=1)
    return dx, dw, db


# ---------------------------------------------------------------------------
# layer classes
# ---------------------------------------------------------------------------


class Layer:
    kind = "Layer"
    n_inputs = 1

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.trainable = True

    def config(self) -> dict:
        return {}

    def out_shape(self, in_shapes):
        return in_shapes[0]

    def flops(self, in_shapes) -> int:
        return 0

    def init_params(self, rng, dtype=np.float32):
        pass

    def forward(self, xs, train=False, keep=False):
        raise NotImplementedError

    def backward(self, dy, cache, need_dx, need_dparams):
        raise NotImplementedError

    def __repr__(self):
        cfg = ", ".join(f"{k}={v}" for k, v in self.config().items())
        return f"{self.kind}({cfg})"


class Conv2D(Layer):
    kind = "Conv2D"

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0, bias=True, groups=1):
        super().__init__()
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = _pair(kernel)
        self.stride = int(stride)
        self.padding = int(padding)
        self.bias = bool(bias)
        self.groups = int(groups)
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError("channel counts must be divisible by groups")
        kh, kw = self.kernel
        self.params["weight"] = np.zeros((self.out_channels, self.in_channels // self.groups, kh, kw), np.float32)
        if self.bias:
            self.params["bias"] = np.zeros(self.out_channels, np.float32)

    def config(self):
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": list(self.kernel),
            "stride": self.stride,
            "padding": self.padding,
            "bias": self.bias,
            "groups": self.groups,
        }

    def init_params(self, rng, dtype=np.float32):
        w = self.params["weight"]
        fan_in = w.shape[1] * w.shape[2] * w.shape[3]
        self.params["weight"] = he_uniform(rng, w.shape, fan_in, dtype)
        if self.bias:
            self.params["bias"] = np.zeros(self.out_channels, dtype)

    def out_shape(self, in_shapes):
        C, H, W = in_shapes[0]
        if C != self.in_channels:
            raise ShapeError(f"{self!r} got {C} input channels")
        kh, kw = self.kernel
        return (
            self.out_channels,
            K.out_size(H, kh, self.stride, self.padding),
            K.out_size(W, kw, self.stride, self.padding),
        )

    def flops(self, in_shapes):
        N, Ho, Wo = self.out_shape(in_shapes)
        kh, kw = self.kernel
        return N * kh * kw * (self.in_channels // self.groups) * Ho * Wo

    def forward(self, xs, train=False, keep=False):
        x = xs[0]
        y, cols = conv2d(
            x, self.params["weight"], self.params.get("bias"), self.stride, self.padding, self.groups, keep_cols=keep
        )
        return y, (x.shape, cols)

    def backward(self, dy, cache, need_dx, need_dparams):
        x_shape, cols = cache
        dx, dw, db = conv2d_backward(
            dy,
            x_shape,
            self.params["weight"],
            cols if need_dparams else None,
            self.stride,
            self.padding,
            self.groups,
            need_dx=need_dx[0],
        )
        grads = {}
        if need_dparams:
            grads["weight"] = dw
            if self.bias:
                grads["bias"] = db
        return [dx], grads


class SeparableConv2D(Layer):
    """Vertical bank (P, C, k, 1) followed by horizontal bank (N, P, 1, k).

    The stride and padding of the full convolution being replaced are split:
    the vertical bank strides/pads along height, the horizontal one along width.
    The bias lives on the horizontal bank.
    """

    kind = "SeparableConv2D"

    def __init__(self, in_channels, out_channels, rank, k, stride=1, padding=0, bias=True):
        super().__init__()
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.rank = int(rank)
        self.k = int(k)
        self.stride = int(stride)
        self.padding = int(padding)
        self.bias = bool(bias)
        self.params["vertical"] = np.zeros((self.rank, self.in_channels, self.k, 1), np.float32)
        self.params["horizontal"] = np.zeros((self.out_channels, self.rank, 1, self.k), np.float32)
        if self.bias:
            self.params["bias"] = np.zeros(self.out_channels, np.float32)

    def config(self):
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "rank": self.rank,
            "k": self.k,
            "stride": self.stride,
            "padding": self.padding,
            "bias": self.bias,
        }

    def init_params(self, rng, dtype=np.float32):
        self.params["vertical"] = he_uniform(rng, self.params["vertical"].shape, self.in_channels * self.k, dtype)
        self.params["horizontal"] = he_uniform(rng, self.params["horizontal"].shape, self.rank * self.k, dtype)
        if self.bias:
            self.params["bias"] = np.zeros(self.out_channels, dtype)

    def _mid_shape(self, in_shape):
        C, H, W = in_shape
        return self.rank, K.out_size(H, self.k, self.stride, self.padding), W

    def out_shape(self, in_shapes):
        C, H, W = in_shapes[0]
        if C != self.in_channels:
            raise ShapeError(f"{self!r} got {C} input channels")
        return (
            self.out_channels,
            K.out_size(H, self.k, self.stride, self.padding),
            K.out_size(W, self.k, self.stride, self.padding),
        )

    def flops(self, in_shapes):
        P, Hm, Wm = self._mid_shape(in_shapes[0])
        N, Ho, Wo = self.out_shape(in_shapes)
        return P * self.k * self.in_channels * Hm * Wm + N * self.k * P * Ho * Wo

    def forward(self, xs, train=False, keep=False):
        x = xs[0]
        s, p = self.stride, self.padding
        mid, c1 = conv2d(x, self.params["vertical"], None, (s, 1), (p, 0), keep_cols=keep)
        y, c2 = conv2d(mid, self.params["horizontal"], self.params.get("bias"), (1, s), (0, p), keep_cols=keep)
        return y, (x.shape, mid.shape, c1, c2)

    def backward(self, dy, cache, need_dx, need_dparams):
        x_shape, mid_shape, c1, c2 = cache
        s, p = self.stride, self.padding
        dmid, dh, db = conv2d_backward(
            dy, mid_shape, self.params["horizontal"], c2 if need_dparams else None, (1, s), (0, p), need_dx=True
        )
        dx, dv, _ = conv2d_backward(
            dmid, x_shape, self.params["vertical"], c1 if need_dparams else None, (s, 1), (p, 0), need_dx=need_dx[0]
        )
        grads = {}
        if need_dparams:
            grads = {"vertical": dv, "horizontal": dh}
            if self.bias:
                grads["bias"] = db
        return [dx], grads


class Dense(Layer):
    """Fully connected layer; inputs of rank > 2 are flattened per sample."""

    kind = "Dense"

    def __init__(self, in_features, out_features):
        super().__init__()
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.params["weight"] = np.zeros((self.out_features, self.in_features), np.float32)
        self.params["bias"] = np.zeros(self.out_features, np.float32)

    def config(self):
        return {"in_features": self.in_features, "out_features": self.out_features}

    def init_params(self, rng, dtype=np.float32):
        self.params["weight"] = he_uniform(rng, (self.out_features, self.in_features), self.in_features, dtype)
        self.params["bias"] = np.zeros(self.out_features, dtype)

    def out_shape(self, in_shapes):
        n = int(np.prod(in_shapes[0]))
        if n != self.in_features:
            raise ShapeError(f"{self!r} got {n} input features (shape {in_shapes[0]})")
        return (self.out_features,)

    def flops(self, in_shapes):
        return self.in_features * self.out_features

    def forward(self, xs, train=False, keep=False):
        x = xs[0]
        x2 = x.reshape(x.shape[0], -1)
        if x2.shape[1] != self.in_features:
            raise ShapeError(f"{self!r} got input of shape {x.shape}")
        y = x2 @ self.params["weight"].T + self.params["bias"]
        return y, (x.shape, x2 if keep else None)

    def backward(self, dy, cache, need_dx, need_dparams):
        x_shape, x2 = cache
        grads = {}
        if need_dparams:
            grads = {"weight": dy.T @ x2, "bias": dy.sum(axis=0)}
        dx = (dy @ self.params["weight"]).reshape(x_shape) if need_dx[0] else None
        return [dx], grads


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, xs, train=False, keep=False):
        x = xs[0]
        y = np.maximum(x, 0)
        return y, x > 0

    def backward(self, dy, cache, need_dx, need_dparams):
        return [dy * cache], {}


class MaxPool(Layer):
    kind = "MaxPool"

    def __init__(self, k, stride=None, padding=0):
        super().__init__()
        self.k = int(k)
        self.stride = int(stride if stride is not None else k)
        self.padding = int(padding)

    def config(self):
        return {"k": self.k, "stride": self.stride, "padding": self.padding}

    def out_shape(self, in_shapes):
        C, H, W = in_shapes[0]
        return C, K.out_size(H, self.k, self.stride, self.padding), K.out_size(W, self.k, self.stride, self.padding)

    def forward(self, xs, train=False, keep=False):
        x = xs[0]
        p = self.padding
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf)
        y, arg = K.maxpool_forward(np.ascontiguousarray(x), self.k, self.stride)
        return y, (x.shape, arg)

    def backward(self, dy, cache, need_dx, need_dparams):
        x_shape, arg = cache
        dx = K.maxpool_backward(dy, arg, x_shape, self.k, self.stride)
        p = self.padding
        if p:
            dx = dx[:, :, p:-p, p:-p]
        return [dx], {}


class BatchNorm(Layer):
    """Per-channel batch normalisation over (B, H, W).

    Batch statistics are used only when training *and* the layer is trainable;
    a frozen BatchNorm always normalises with its running statistics.
    """

    kind = "BatchNorm"

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.channels = int(channels)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.params["gamma"] = np.ones(self.channels, np.float32)
        self.params["beta"] = np.zeros(self.channels, np.float32)
        self.buffers["running_mean"] = np.zeros(self.channels, np.float32)
        self.buffers["running_var"] = np.ones(self.channels, np.float32)

    def config(self):
        return {"channels": self.channels, "eps": self.eps, "momentum": self.momentum}

    def init_params(self, rng, dtype=np.float32):
        self.params["gamma"] = np.ones(self.channels, dtype)
        self.params["beta"] = np.zeros(self.channels, dtype)

    def out_shape(self, in_shapes):
        if in_shapes[0][0] != self.channels:
            raise ShapeError(f"{self!r} got {in_shapes[0][0]} channels")
        return in_shapes[0]

    def forward(self, xs, train=False, keep=False):
        x = xs[0]
        g = self.params["gamma"].reshape(1, -1, 1, 1)
        b = self.params["beta"].reshape(1, -1, 1, 1)
        if train and self.trainable:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = self.momentum
            n = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * (n / max(n - 1, 1))
            self.buffers["running_mean"] = ((1 - m) * self.buffers["running_mean"] + m * mean).astype(x.dtype)
            self.buffers["running_var"] = ((1 - m) * self.buffers["running_var"] + m * unbiased).astype(x.dtype)
            batch = True
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
            batch = False
        inv = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = (x - mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
        return xhat * g + b, (xhat, inv, batch)

    def backward(self, dy, cache, need_dx, need_dparams):
        xhat, inv, batch = cache
        grads = {}
        if need_dparams:
            grads = {"gamma": (dy * xhat).sum(axis=(0, 2, 3)), "beta": dy.sum(axis=(0, 2, 3))}
        dx = None
        if need_dx[0]:
            g = self.params["gamma"].reshape(1, -1, 1, 1)
            dxhat = dy * g
            if batch:
                n = dy.shape[0] * dy.shape[2] * dy.shape[3]
                dx = (
                    inv.reshape(1, -1, 1, 1)
                    / n
                    * (
                        n * dxhat
                        - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                    )
                )
            else:
                dx = dxhat * inv.reshape(1, -1, 1, 1)
        return [dx], grads


class ElementwiseAdd(Layer):
    kind = "ElementwiseAdd"
    n_inputs = 2

    def out_shape(self, in_shapes):
        if len(set(map(tuple, in_shapes))) != 1:
            raise ShapeError(f"ElementwiseAdd got mismatched shapes {in_shapes}")
        return in_shapes[0]

    def forward(self, xs, train=False, keep=False):
        y = xs[0]
        for x in xs[1:]:
            y = y + x
        return y, None

    def backward(self, dy, cache, need_dx, need_dparams):
        return [dy if n else None for n in need_dx], {}


class GlobalAvgPool(Layer):
    kind = "GlobalAvgPool"

    def out_shape(self, in_shapes):
        return (in_shapes[0][0],)

    def forward(self, xs, train=False, keep=False):
        x = xs[0]
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, dy, cache, need_dx, need_dparams):
        B, C, H, W = cache
        dx = np.broadcast_to((dy / (H * W))[:, :, None, None], cache).copy()
        return [dx], {}


class ChannelSelect(Layer):
    """Pick a fixed subset of channels (in the given order)."""

    kind = "ChannelSelect"

    def __init__(self, indices):
        super().__init__()
        self.indices = [int(i) for i in indices]
        self._idx = np.asarray(self.indices, dtype=np.intp)

    def config(self):
        return {"indices": self.indices}

    def out_shape(self, in_shapes):
        C = in_shapes[0][0]
        if not self.indices or max(self.indices) >= C or min(self.indices) < 0:
            raise ShapeError(f"channel indices out of range for {C} channels")
        return (len(self.indices),) + tuple(in_shapes[0][1:])

    def forward(self, xs, train=False, keep=False):
        x = xs[0]
        return x[:, self._idx], x.shape

    def backward(self, dy, cache, need_dx, need_dparams):
        dx = np.zeros(cache, dtype=dy.dtype)
        dx[:, self._idx] = dy
        return [dx], {}


class ChannelScatter(Layer):
    """Write ``xs[1]`` into channels ``indices`` of ``xs[0]``; other channels pass through."""

    kind = "ChannelScatter"
    n_inputs = 2

    def __init__(self, indices):
        super().__init__()
        self.indices = [int(i) for i in indices]
        self._idx = np.asarray(self.indices, dtype=np.intp)

    def config(self):
        return {"indices": self.indices}

    def out_shape(self, in_shapes):
        base, vals = in_shapes
        if vals[0] != len(self.indices) or tuple(vals[1:]) != tuple(base[1:]):
            raise ShapeError(f"ChannelScatter shapes {in_shapes} do not match {len(self.indices)} indices")
        return base

    def forward(self, xs, train=False, keep=False):
        y = xs[0].copy()
        y[:, self._idx] = xs[1]
        return y, None

    def backward(self, dy, cache, need_dx, need_dparams):
        dbase = dvals = None
        if need_dx[0]:
            dbase = dy.copy()
            dbase[:, self._idx] = 0
        if need_dx[1]:
            dvals = dy[:, self._idx]
        return [dbase, dvals], {}


class ShortcutPad(Layer):
    """Parameter-free shortcut: spatial subsampling by ``stride`` and zero channel padding."""

    kind = "ShortcutPad"

    def __init__(self, stride, out_channels):
        super().__init__()
        self.stride = int(stride)
        self.out_channels = int(out_channels)

    def config(self):
        return {"stride": self.stride, "out_channels": self.out_channels}

    def out_shape(self, in_shapes):
        C, H, W = in_shapes[0]
        s = self.stride
        return self.out_channels, (H + s - 1) // s, (W + s - 1) // s

    def forward(self, xs, train=False, keep=False):
        x = xs[0]
        s = self.stride
        sub = x[:, :, ::s, ::s]
        y = np.zeros((x.shape[0], self.out_channels) + sub.shape[2:], dtype=x.dtype)
        y[:, : x.shape[1]] = sub
        return y, x.shape

    def backward(self, dy, cache, need_dx, need_dparams):
        dx = np.zeros(cache, dtype=dy.dtype)
        s = self.stride
        dx[:, :, ::s, ::s] = dy[:, : cache[1]]
        return [dx], {}


class SoftmaxCrossEntropy(Layer):
    """Loss head: mean cross-entropy of logits against integer labels."""

    kind = "SoftmaxCrossEntropy"

    def out_shape(self, in_shapes):
        return ()

    def loss(self, logits, labels):
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        n = logits.shape[0]
        loss = -logp[np.arange(n), labels].mean()
        return loss, (np.exp(logp), labels)

    def backward(self, dy, cache, need_dx, need_dparams):
        p, labels = cache
        d = p.copy()
        d[np.arange(len(labels)), labels] -= 1
        return [d * (dy / len(labels))], {}


LAYER_KINDS = {
    cls.kind: cls
    for cls in (
        Conv2D,
        SeparableConv2D,
        Dense,
        ReLU,
        MaxPool,
        BatchNorm,
        ElementwiseAdd,
        GlobalAvgPool,
        ChannelSelect,
        ChannelScatter,
        ShortcutPad,
        SoftmaxCrossEntropy,
    )
}


def layer_from_config(kind: str, cfg: dict) -> Layer:
    try:
        cls = LAYER_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}") from None
    return cls(**cfg)
