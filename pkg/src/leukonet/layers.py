"""Layer forward/backward passes (NHWC).

Every layer follows one contract:

    forward(x, params, train=False, rng=None) -> (y, cache)
    backward(grad_y, cache, params) -> (grad_x, grads)

``grads`` mirrors the trainable entries of ``params``.  Caches are
single-use.  Per-sample shapes (no batch axis) drive ``output_shape``
so a model can be shape-checked before any parameter is allocated.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Rng, ShapeError

RELU6_CAP = 6.0


# ---------------------------------------------------------------------------
# convolution kernels


def conv_output_size(size: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Return (out_size, pad_before, pad_after) along one spatial axis."""
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return out, total // 2, total - total // 2
    if padding == "valid":
        if size < k:
            raise ShapeError(f"kernel {k} larger than input {size} with valid padding")
        return (size - k) // stride + 1, 0, 0
    raise ValueError(f"unknown padding {padding!r}")


def _pad(x, pads):
    (pt, pb), (pl, pr) = pads
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))


def _geometry(x, kh, kw, stride, padding):
    _, h, w, _ = x.shape
    ho, pt, pb = conv_output_size(h, kh, stride, padding)
    wo, pl, pr = conv_output_size(w, kw, stride, padding)
    return ho, wo, ((pt, pb), (pl, pr))


def _tap(xp, dy, dx, ho, wo, s):
    return xp[:, dy:dy + s * (ho - 1) + 1:s, dx:dx + s * (wo - 1) + 1:s, :]


def im2col(xp, kh, kw, ho, wo, stride):
    n, _, _, c = xp.shape
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :ho, :wo]
    # (N,Ho,Wo,C,kh,kw) -> (N,Ho,Wo,kh,kw,C) so columns follow the kernel's [kh,kw,Cin] order
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * c)


def conv2d_forward(x, w, b=None, stride=1, padding="same", method="im2col"):
    """2-D convolution; w has shape [kh, kw, Cin, Cout]."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input, got shape {x.shape}")
    kh, kw, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"channel mismatch: input has {x.shape[-1]}, kernel expects {cin}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n = x.shape[0]
    ho, wo, pads = _geometry(x, kh, kw, stride, padding)
    xp = _pad(x, pads)
    if kh == kw == 1 and stride == 1:
        cols = xp.reshape(-1, cin)
        out = cols @ w[0, 0]
    elif method == "im2col":
        cols = im2col(xp, kh, kw, ho, wo, stride)
        out = cols @ w.reshape(-1, cout)
    elif method == "direct":
        cols = None
        out = np.zeros((n * ho * wo, cout), dtype=np.result_type(x, w))
        for dy in range(kh):
            for dx in range(kw):
                out += _tap(xp, dy, dx, ho, wo, stride).reshape(-1, cin) @ w[dy, dx]
    else:
        raise ValueError(f"unknown conv method {method!r}")
    if b is not None and b.size:
        out += b
    out = out.reshape(n, ho, wo, cout)
    cache = (x.shape, xp, cols, pads, stride, ho, wo)
    return out, cache


def conv2d_backward(g, cache, w, has_bias=True):
    x_shape, xp, cols, pads, s, ho, wo = cache
    kh, kw, cin, cout = w.shape
    g2 = g.reshape(-1, cout)
    grads = {}
    if has_bias:
        grads["b"] = g2.sum(axis=0)
    if kh == kw == 1 and s == 1 and cols is not None:
        grads["w"] = (cols.T @ g2).reshape(w.shape)
        gxp = (g2 @ w[0, 0].T).reshape(xp.shape)
    else:
        gxp = np.zeros(xp.shape, dtype=np.result_type(g, w))
        if cols is not None:
            grads["w"] = (cols.T @ g2).reshape(w.shape)
            gcols = (g2 @ w.reshape(-1, cout).T).reshape(g.shape[:3] + (kh, kw, cin))
            for dy in range(kh):
                for dx in range(kw):
                    _tap(gxp, dy, dx, ho, wo, s)[...] += gcols[:, :, :, dy, dx, :]
        else:
            gw = np.empty_like(w)
            for dy in range(kh):
                for dx in range(kw):
                    patch = _tap(xp, dy, dx, ho, wo, s).reshape(-1, cin)
                    gw[dy, dx] = patch.T @ g2
                    _tap(gxp, dy, dx, ho, wo, s)[...] += (g2 @ w[dy, dx].T).reshape(g.shape[:3] + (cin,))
            grads["w"] = gw
    (pt, pb), (pl, pr) = pads
    gx = gxp[:, pt:gxp.shape[1] - pb, pl:gxp.shape[2] - pr, :]
    return np.ascontiguousarray(gx), grads


def depthwise_forward(x, k, b=None, stride=1, padding="same"):
    """Per-channel convolution; k has shape [kh, kw, C]."""
    kh, kw, c = k.shape
    if x.ndim != 4 or x.shape[-1] != c:
        raise ShapeError(f"channel mismatch: input {x.shape}, depthwise kernel channels {c}")
    ho, wo, pads = _geometry(x, kh, kw, stride, padding)
    xp = _pad(x, pads)
    out = np.zeros((x.shape[0], ho, wo, c), dtype=np.result_type(x, k))
    for dy in range(kh):
        for dx in range(kw):
            out += _tap(xp, dy, dx, ho, wo, stride) * k[dy, dx]
    if b is not None and b.size:
        out += b
    return out, (xp, pads, stride, ho, wo)


def depthwise_backward(g, cache, k, has_bias=False):
    xp, pads, s, ho, wo = cache
    kh, kw, _ = k.shape
    gk = np.empty_like(k)
    gxp = np.zeros(xp.shape, dtype=np.result_type(g, k))
    for dy in range(kh):
        for dx in range(kw):
            patch = _tap(xp, dy, dx, ho, wo, s)
            gk[dy, dx] = (g * patch).sum(axis=(0, 1, 2))
            _tap(gxp, dy, dx, ho, wo, s)[...] += g * k[dy, dx]
    grads = {"w": gk}
    if has_bias:
        grads["b"] = g.sum(axis=(0, 1, 2))
    (pt, pb), (pl, pr) = pads
    gx = gxp[:, pt:gxp.shape[1] - pb, pl:gxp.shape[2] - pr, :]
    return np.ascontiguousarray(gx), grads


# ---------------------------------------------------------------------------
# initializers


def he_normal(rng: Rng, shape, fan_in: int, dtype):
    return rng.normal(shape, std=math.sqrt(2.0 / fan_in), dtype=dtype)


def glorot_uniform(rng: Rng, shape, fan_in: int, fan_out: int, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape, dtype=dtype)


def _init_weight(init, rng, shape, fan_in, fan_out, dtype):
    if rng is None:
        return np.zeros(shape, dtype=dtype)
    if init == "he":
        return he_normal(rng, shape, fan_in, dtype)
    if init == "glorot":
        return glorot_uniform(rng, shape, fan_in, fan_out, dtype)
    if init == "zeros":
        return np.zeros(shape, dtype=dtype)
    raise ValueError(f"unknown initializer {init!r}")


# ---------------------------------------------------------------------------
# layers


class Layer:
    kind = "layer"
    trainable = ()  # names of trainable entries in the params dict
    state = ()  # non-trainable tensors (running statistics)

    def output_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def param_shapes(self, in_shape: tuple) -> dict:
        return {}

    def init(self, in_shape: tuple, rng: Rng | None, dtype=np.float32) -> dict:
        return {}

    def forward(self, x, p, train=False, rng=None):
        raise NotImplementedError

    def backward(self, g, cache, p):
        raise NotImplementedError

    def describe(self) -> str:
        return self.kind

    def __repr__(self):
        return f"{type(self).__name__}({self.describe()})"


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, filters, kernel=3, stride=1, padding="same", use_bias=True, init="he"):
        if kernel < 1 or stride < 1:
            raise ValueError("kernel and stride must be >= 1")
        self.filters = filters
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.use_bias = use_bias
        self.init_kind = init
        self.trainable = ("w", "b") if use_bias else ("w",)

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"conv2d needs an (H, W, C) input, got {in_shape}")
        h, w, _ = in_shape
        ho = conv_output_size(h, self.kernel, self.stride, self.padding)[0]
        wo = conv_output_size(w, self.kernel, self.stride, self.padding)[0]
        return (ho, wo, self.filters)

    def param_shapes(self, in_shape):
        shapes = {"w": (self.kernel, self.kernel, in_shape[-1], self.filters)}
        if self.use_bias:
            shapes["b"] = (self.filters,)
        return shapes

    def init(self, in_shape, rng, dtype=np.float32):
        shapes = self.param_shapes(in_shape)
        fan_in = self.kernel * self.kernel * in_shape[-1]
        fan_out = self.kernel * self.kernel * self.filters
        p = {"w": _init_weight(self.init_kind, rng, shapes["w"], fan_in, fan_out, dtype)}
        if self.use_bias:
            p["b"] = np.zeros(shapes["b"], dtype=dtype)
        return p

    def forward(self, x, p, train=False, rng=None):
        return conv2d_forward(x, p["w"], p.get("b"), self.stride, self.padding)

    def backward(self, g, cache, p):
        return conv2d_backward(g, cache, p["w"], self.use_bias)

    def describe(self):
        return f"{self.kernel}x{self.kernel}/{self.stride} {self.padding} -> {self.filters}"


class DepthwiseConv2D(Layer):
    kind = "depthwise_conv2d"

    def __init__(self, kernel=3, stride=1, padding="same", use_bias=False, init="he"):
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.use_bias = use_bias
        self.init_kind = init
        self.trainable = ("w", "b") if use_bias else ("w",)

    def output_shape(self, in_shape):
        h, w, c = in_shape
        ho = conv_output_size(h, self.kernel, self.stride, self.padding)[0]
        wo = conv_output_size(w, self.kernel, self.stride, self.padding)[0]
        return (ho, wo, c)

    def param_shapes(self, in_shape):
        shapes = {"w": (self.kernel, self.kernel, in_shape[-1])}
        if self.use_bias:
            shapes["b"] = (in_shape[-1],)
        return shapes

    def init(self, in_shape, rng, dtype=np.float32):
        shapes = self.param_shapes(in_shape)
        fan = self.kernel * self.kernel
        p = {"w": _init_weight(self.init_kind, rng, shapes["w"], fan, fan, dtype)}
        if self.use_bias:
            p["b"] = np.zeros(shapes["b"], dtype=dtype)
        return p

    def forward(self, x, p, train=False, rng=None):
        return depthwise_forward(x, p["w"], p.get("b"), self.stride, self.padding)

    def backward(self, g, cache, p):
        return depthwise_backward(g, cache, p["w"], self.use_bias)

    def describe(self):
        return f"{self.kernel}x{self.kernel}/{self.stride} {self.padding}"


class MaxPool2D(Layer):
    """2x2 max pooling, stride 2.  Ties resolve to the lowest flat index."""

    kind = "maxpool2d"

    def output_shape(self, in_shape):
        h, w, c = in_shape
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool2d needs even feature maps, got {h}x{w}")
        return (h // 2, w // 2, c)

    def forward(self, x, p=None, train=False, rng=None):
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool2d needs even feature maps, got {h}x{w}")
        win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
        # window slots are ordered (dy, dx), which is increasing flat index
        slot = win.argmax(axis=-1)
        out = np.take_along_axis(win, slot[..., None], axis=-1)[..., 0]
        ni, yi, xi, ci = np.indices(slot.shape, sparse=True)
        rows = 2 * yi + slot // 2
        cols = 2 * xi + slot % 2
        flat = ((ni * h + rows) * w + cols) * c + ci
        return out, (x.shape, flat)

    def backward(self, g, cache, p=None):
        shape, flat = cache
        gx = np.zeros(math.prod(shape), dtype=g.dtype)
        gx[flat.ravel()] = g.ravel()
        return gx.reshape(shape), {}

    def describe(self):
        return "2x2/2"


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"global_avg_pool needs (H, W, C), got {in_shape}")
        return (in_shape[-1],)

    def forward(self, x, p=None, train=False, rng=None):
        if x.ndim != 4:
            raise ShapeError(f"global_avg_pool expects NHWC input, got {x.shape}")
        return x.mean(axis=(1, 2), dtype=np.float64).astype(x.dtype), x.shape

    def backward(self, g, cache, p=None):
        n, h, w, c = cache
        gx = np.broadcast_to((g / (h * w))[:, None, None, :], cache)
        return np.ascontiguousarray(gx), {}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"flatten needs (H, W, C), got {in_shape}")
        return (math.prod(in_shape),)

    def forward(self, x, p=None, train=False, rng=None):
        if x.ndim != 4:
            raise ShapeError(f"flatten expects rank-4 input, got rank {x.ndim}")
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, g, cache, p=None):
        return g.reshape(cache), {}


class Dense(Layer):
    kind = "dense"

    def __init__(self, units, init="he"):
        self.units = units
        self.init_kind = init
        self.trainable = ("w", "b")

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"dense needs a flat input, got {in_shape}")
        return (self.units,)

    def param_shapes(self, in_shape):
        return {"w": (in_shape[0], self.units), "b": (self.units,)}

    def init(self, in_shape, rng, dtype=np.float32):
        din = in_shape[0]
        return {
            "w": _init_weight(self.init_kind, rng, (din, self.units), din, self.units, dtype),
            "b": np.zeros(self.units, dtype=dtype),
        }

    def forward(self, x, p, train=False, rng=None):
        if x.ndim != 2 or x.shape[1] != p["w"].shape[0]:
            raise ShapeError(f"dense expects (N, {p['w'].shape[0]}), got {x.shape}")
        return x @ p["w"] + p["b"], x

    def backward(self, g, cache, p):
        x = cache
        return g @ p["w"].T, {"w": x.T @ g, "b": g.sum(axis=0)}

    def describe(self):
        return f"-> {self.units}"


class BatchNorm(Layer):
    kind = "batchnorm"
    trainable = ("gamma", "beta")
    state = ("running_mean", "running_var")

    def __init__(self, momentum=0.9, eps=1e-5):
        self.momentum = momentum
        self.eps = eps

    def param_shapes(self, in_shape):
        c = in_shape[-1]
        return {k: (c,) for k in ("gamma", "beta", "running_mean", "running_var")}

    def init(self, in_shape, rng, dtype=np.float32):
        c = in_shape[-1]
        return {
            "gamma": np.ones(c, dtype=dtype),
            "beta": np.zeros(c, dtype=dtype),
            "running_mean": np.zeros(c, dtype=dtype),
            "running_var": np.ones(c, dtype=dtype),
        }

    def forward(self, x, p, train=False, rng=None):
        axes = tuple(range(x.ndim - 1))
        count = x.size // x.shape[-1]
        if train:
            if count < 2:
                raise ValueError("batchnorm in train mode needs at least 2 values per channel")
            mean = x.mean(axis=axes, dtype=np.float64)
            var = ((x - mean) ** 2).mean(axis=axes, dtype=np.float64)
            m = self.momentum
            p["running_mean"] = (m * p["running_mean"] + (1 - m) * mean).astype(p["running_mean"].dtype)
            p["running_var"] = (m * p["running_var"] + (1 - m) * var).astype(p["running_var"].dtype)
        else:
            mean = p["running_mean"].astype(np.float64)
            var = p["running_var"].astype(np.float64)
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = (x - mean.astype(x.dtype)) * inv_std
        out = p["gamma"] * xhat + p["beta"]
        return out, (xhat, inv_std, train, axes, count)

    def backward(self, g, cache, p):
        xhat, inv_std, train, axes, count = cache
        dbeta = g.sum(axis=axes, dtype=np.float64)
        dgamma = (g * xhat).sum(axis=axes, dtype=np.float64)
        scale = p["gamma"] * inv_std
        if train:
            gx = scale / count * (count * g - dbeta.astype(g.dtype) - xhat * dgamma.astype(g.dtype))
        else:
            gx = g * scale
        dt = p["gamma"].dtype
        return gx.astype(g.dtype), {"gamma": dgamma.astype(dt), "beta": dbeta.astype(dt)}

    def describe(self):
        return f"momentum={self.momentum} eps={self.eps}"


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by 1/(1-rate) during training."""

    kind = "dropout"

    def __init__(self, rate=0.5):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, p=None, train=False, rng=None, mask=None):
        if not train or self.rate == 0.0:
            return x, None
        if mask is None:
            if rng is None:
                raise ValueError("dropout in train mode needs an rng")
            keep = rng.uniform(0.0, 1.0, x.shape, dtype=np.float64) >= self.rate
            mask = keep.astype(x.dtype) / x.dtype.type(1.0 - self.rate)
        return x * mask, mask

    def backward(self, g, cache, p=None):
        if cache is None:
            return g, {}
        return g * cache, {}

    def describe(self):
        return f"rate={self.rate}"


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, p=None, train=False, rng=None):
        return np.maximum(x, 0), x > 0

    def backward(self, g, cache, p=None):
        return g * cache, {}


class ReLU6(Layer):
    kind = "relu6"

    def forward(self, x, p=None, train=False, rng=None):
        return np.clip(x, 0, RELU6_CAP), (x > 0) & (x < RELU6_CAP)

    def backward(self, g, cache, p=None):
        return g * cache, {}


class Softmax(Layer):
    kind = "softmax"

    def output_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] < 2:
            raise ShapeError(f"softmax needs at least 2 classes, got {in_shape}")
        return in_shape

    def forward(self, x, p=None, train=False, rng=None):
        y = softmax(x)
        return y, y

    def backward(self, g, cache, p=None):
        y = cache
        return y * (g - (g * y).sum(axis=1, keepdims=True)), {}


def softmax(x):
    assert not np.isnan(x).any(), "softmax input contains NaN"
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return (z / z.sum(axis=1, keepdims=True, dtype=np.float64)).astype(x.dtype)


def relu(x):
    return np.maximum(x, 0)


def relu6(x):
    return np.clip(x, 0, RELU6_CAP)


class InvertedResidual(Layer):
    """Expand (1x1) -> depthwise 3x3 -> linear 1x1 projection, with a
    shortcut when the stride is 1 and channels are preserved."""

    kind = "inverted_residual"

    def __init__(self, cin, expansion, cout, stride):
        if stride not in (1, 2):
            raise ValueError(f"inverted residual stride must be 1 or 2, got {stride}")
        if expansion < 1 or cin < 1:
            raise ValueError("expansion and input channels must be >= 1")
        self.cin = cin
        self.expansion = expansion
        self.cout = cout
        self.stride = stride
        self.residual = stride == 1 and cin == cout
        hidden = cin * expansion
        layers = []
        if expansion != 1:
            layers += [
                ("expand", Conv2D(hidden, 1, use_bias=False)),
                ("expand_bn", BatchNorm()),
                ("expand_relu6", ReLU6()),
            ]
        layers += [
            ("depthwise", DepthwiseConv2D(3, stride)),
            ("depthwise_bn", BatchNorm()),
            ("depthwise_relu6", ReLU6()),
            ("project", Conv2D(cout, 1, use_bias=False, init="glorot")),
            ("project_bn", BatchNorm()),
        ]
        self.layers = layers

    def output_shape(self, in_shape):
        if in_shape[-1] != self.cin:
            raise ShapeError(f"block expects {self.cin} channels, got {in_shape[-1]}")
        shape = in_shape
        for _, layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def sub_shapes(self, in_shape):
        shape = in_shape
        for name, layer in self.layers:
            yield name, layer, shape
            shape = layer.output_shape(shape)

    def param_shapes(self, in_shape):
        return {name: layer.param_shapes(s) for name, layer, s in self.sub_shapes(in_shape)
                if layer.param_shapes(s)}

    def init(self, in_shape, rng, dtype=np.float32):
        p = {name: layer.init(s, rng, dtype) for name, layer, s in self.sub_shapes(in_shape)
             if layer.param_shapes(s)}
        if self.residual and rng is not None:
            # residual branches start as zero so each block is the identity at init
            p["project_bn"]["gamma"][:] = 0
        return p

    def forward(self, x, p, train=False, rng=None):
        h = x
        caches = []
        for name, layer in self.layers:
            h, c = layer.forward(h, p.get(name), train, rng)
            caches.append(c)
        if self.residual:
            h = h + x
        return h, caches

    def backward(self, g, cache, p):
        grads = {}
        gx = g
        for (name, layer), c in zip(reversed(self.layers), reversed(cache)):
            gx, gp = layer.backward(gx, c, p.get(name))
            if gp:
                grads[name] = gp
        if self.residual:
            gx = gx + g
        return gx, grads

    def describe(self):
        res = " +residual" if self.residual else ""
        return f"t={self.expansion} {self.cin}->{self.cout} s={self.stride}{res}"
