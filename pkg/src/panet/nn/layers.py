"""Layers with explicit forward/backward passes.

Every layer exposes ``forward(x, train) -> (out, cache)`` and
``backward(dout, cache) -> dx``; parameter gradients land in ``layer.grads``
under the same keys as ``layer.params``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import activation_quant as aq
from .. import weight_quant as wq
from ..baselines import binarize_sign
from ..tensor import DTYPE, col2im, im2col

REAL = "real"
PA = "pa"
SIGN = "sign"
TERNARY = "ternary"
POLICIES = (REAL, PA, SIGN, TERNARY)


@dataclass
class LayerSpec:
    """Static description of one layer."""

    kind: str
    name: str = ""
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    pad: int = 0
    policy: str = REAL
    M: int = 0
    N: int = 0
    is_first_layer: bool = False
    is_last_layer: bool = False
    is_downsampling: bool = False


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.name = ""

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dout, cache):
        raise NotImplementedError

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def children(self):
        return []

    @property
    def spec(self) -> LayerSpec:
        return LayerSpec(kind=self.kind, name=self.name)


def _kaiming(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(DTYPE)


class _WeightQuantMixin:
    """Shared weight-quantization logic for conv and linear layers."""

    def _init_policy(self, policy, M, lambda_W):
        if policy not in POLICIES:
            raise ValueError(f"unknown quantization policy {policy!r}")
        self.policy = policy
        self.wconfig = wq.WeightQuantizerConfig(M=M, lambda_W=lambda_W) if policy == PA else None

    def quantized_weight(self):
        """Returns ``(W_used, info)`` where info feeds :meth:`_weight_grad`."""
        frozen = getattr(self, "frozen_weight", None)
        if frozen is not None:  # imported for inference only
            return frozen, None
        W = self.params["W"]
        if self.policy == PA:
            wp, _ = wq.fit_weight_piecewise(W, self.wconfig)
            return wq.quantize_weights_forward(W, wp), wp
        if self.policy == SIGN:
            scale = np.float32(np.abs(W).mean())
            return binarize_sign(W) * scale, None
        if self.policy == TERNARY:
            delta = 0.7 * float(np.abs(W).mean())
            from ..baselines import ternarize

            return ternarize(W, delta)[0], None
        return W, None

    def _weight_grad(self, dWq, info):
        if self.policy == PA:
            return wq.weight_backward(dWq, self.params["W"], info, self.wconfig.lambda_W)
        return dWq


class Conv2d(_WeightQuantMixin, Layer):
    kind = "conv"

    def __init__(self, cin, cout, kernel, stride=1, pad=0, policy=REAL, M=8, lambda_W=1.0,
                 rng=None, first=False, downsampling=False):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.cin, self.cout, self.k, self.stride, self.pad = cin, cout, kernel, stride, pad
        self.first, self.downsampling = first, downsampling
        self._init_policy(policy, M, lambda_W)
        self.params["W"] = _kaiming(rng, (cout, cin, kernel, kernel), cin * kernel * kernel)

    @property
    def spec(self):
        return LayerSpec("conv", self.name, self.cin, self.cout, self.k, self.stride, self.pad, self.policy,
                         self.wconfig.M if self.wconfig else 0, 0, self.first, False, self.downsampling)

    def forward(self, x, train=False):
        Wq, info = self.quantized_weight()
        cols = im2col(x, self.k, self.k, self.stride, self.pad)
        out = (cols @ Wq.reshape(self.cout, -1).T).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), (x.shape, cols, Wq, info)

    def backward(self, dout, cache):
        x_shape, cols, Wq, info = cache
        d2 = dout.transpose(0, 2, 3, 1).reshape(-1, self.cout)
        dWq = (d2.T @ cols.reshape(-1, cols.shape[-1])).reshape(Wq.shape)
        self.grads["W"] = self._weight_grad(dWq, info)
        if self.first:
            return None  # network input needs no gradient
        dcols = (d2 @ Wq.reshape(self.cout, -1)).reshape(cols.shape)
        return col2im(dcols, x_shape, self.k, self.k, self.stride, self.pad)


class Linear(_WeightQuantMixin, Layer):
    kind = "fc"

    def __init__(self, fin, fout, policy=REAL, M=8, lambda_W=1.0, bias=True, rng=None, last=False):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.fin, self.fout, self.last = fin, fout, last
        self._init_policy(policy, M, lambda_W)
        self.params["W"] = _kaiming(rng, (fout, fin), fin)
        if bias:
            self.params["b"] = np.zeros(fout, dtype=DTYPE)

    @property
    def spec(self):
        return LayerSpec("fc", self.name, self.fin, self.fout, 1, 1, 0, self.policy,
                         self.wconfig.M if self.wconfig else 0, 0, False, self.last, False)

    def forward(self, x, train=False):
        Wq, info = self.quantized_weight()
        out = x @ Wq.T
        if "b" in self.params:
            out = out + self.params["b"]
        return out.astype(DTYPE, copy=False), (x, Wq, info)

    def backward(self, dout, cache):
        x, Wq, info = cache
        self.grads["W"] = self._weight_grad(dout.T @ x, info)
        if "b" in self.params:
            self.grads["b"] = dout.sum(axis=0)
        return dout @ Wq


class BatchNorm(Layer):
    """Batch normalization over the channel axis of 2-D or 4-D inputs."""

    kind = "batch-norm"

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.params["gamma"] = np.ones(channels, dtype=DTYPE)
        self.params["beta"] = np.zeros(channels, dtype=DTYPE)
        self.buffers["running_mean"] = np.zeros(channels, dtype=DTYPE)
        self.buffers["running_var"] = np.ones(channels, dtype=DTYPE)

    @property
    def spec(self):
        return LayerSpec("batch-norm", self.name, self.channels, self.channels)

    @staticmethod
    def _axes(x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    def _bshape(self, x):
        return (1, -1) if x.ndim == 2 else (1, -1, 1, 1)

    def forward(self, x, train=False):
        axes, bs = self._axes(x), self._bshape(x)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            count = x.size // self.channels
            unbiased = var * count / max(count - 1, 1)
            self.buffers["running_mean"] = ((1 - m) * self.buffers["running_mean"] + m * mean).astype(DTYPE)
            self.buffers["running_var"] = ((1 - m) * self.buffers["running_var"] + m * unbiased).astype(DTYPE)
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv = (1.0 / np.sqrt(var + self.eps)).astype(DTYPE)
        xhat = (x - mean.reshape(bs)) * inv.reshape(bs)
        out = xhat * self.params["gamma"].reshape(bs) + self.params["beta"].reshape(bs)
        return out.astype(DTYPE, copy=False), (xhat, inv, train)

    def backward(self, dout, cache):
        xhat, inv, train = cache
        axes, bs = self._axes(dout), self._bshape(dout)
        self.grads["gamma"] = (dout * xhat).sum(axis=axes)
        self.grads["beta"] = dout.sum(axis=axes)
        dxhat = dout * self.params["gamma"].reshape(bs)
        if not train:
            return dxhat * inv.reshape(bs)
        m = dout.size // self.channels
        dx = (m * dxhat - dxhat.sum(axis=axes).reshape(bs)
              - xhat * (dxhat * xhat).sum(axis=axes).reshape(bs)) * (inv.reshape(bs) / m)
        return dx.astype(DTYPE, copy=False)


class PAActivation(Layer):
    """Trainable piecewise activation quantizer (replaces the ReLU)."""

    kind = "pa-activation"

    def __init__(self, N, lambda_A=1.0, lambda_delta=None):
        super().__init__()
        self.N, self.lambda_A, self.lambda_delta = N, lambda_A, lambda_delta
        self.state: aq.ActivationQuantizerState | None = None
        self.enabled = True

    @property
    def spec(self):
        return LayerSpec("pa-activation", self.name, policy=PA, N=self.N)

    def calibrate(self, x):
        self.set_state(aq.init_activation_state(x, self.N, self.lambda_A, self.lambda_delta))

    def set_state(self, state):
        self.state = state
        self.params["v"] = state.v
        self.params["beta"] = state.beta

    def sync(self):
        """Re-project endpoints after an in-place parameter update."""
        self.state.v[:] = aq.project_endpoints(self.state.v)

    def forward(self, x, train=False):
        if self.state is None:
            self.calibrate(x)
        return aq.quantize_activations_forward(x, self.state), x

    def backward(self, dout, cache):
        x = cache
        self.grads["beta"] = aq.grad_beta(dout, x, self.state)
        self.grads["v"] = aq.grad_v(dout, x, self.state)
        return aq.activation_backward_input(dout, x, self.state)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        mask = x > 0
        return x * mask, mask

    def backward(self, dout, cache):
        return dout * cache


class MaxPool2d(Layer):
    kind = "pool"

    def __init__(self, size=2):
        super().__init__()
        self.size = size

    def forward(self, x, train=False):
        n, c, h, w = x.shape
        s = self.size
        xr = x[:, :, :h - h % s, :w - w % s].reshape(n, c, h // s, s, w // s, s)
        out = xr.max(axis=(3, 5))
        mask = xr == out[:, :, :, None, :, None]
        # keep only the first maximum of each window
        flat = mask.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // s, w // s, s * s)
        first = np.zeros_like(flat)
        np.put_along_axis(first, flat.argmax(axis=-1)[..., None], True, axis=-1)
        return out, (x.shape, first)

    def backward(self, dout, cache):
        x_shape, first = cache
        n, c, h, w = x_shape
        s = self.size
        g = first * dout[..., None]
        g = g.reshape(n, c, h // s, w // s, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h - h % s, w - w % s)
        dx = np.zeros(x_shape, dtype=DTYPE)
        dx[:, :, :g.shape[2], :g.shape[3]] = g
        return dx


class GlobalAvgPool(Layer):
    kind = "pool"

    def forward(self, x, train=False):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, dout, cache):
        n, c, h, w = cache
        return np.broadcast_to(dout[:, :, None, None] / (h * w), cache).astype(DTYPE)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train=False):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, cache):
        return dout.reshape(cache)


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def children(self):
        return self.layers

    def forward(self, x, train=False):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x, train)
            caches.append(c)
        return x, caches

    def backward(self, dout, cache):
        for layer, c in zip(reversed(self.layers), reversed(cache)):
            dout = layer.backward(dout, c)
        return dout


class BasicBlock(Layer):
    """Two 3x3 convolutions plus an identity or 1x1-conv shortcut.

    ``main`` and ``shortcut`` both see the block input after ``pre`` (the
    activation quantizer), so a binarized 1x1 shortcut convolves the same
    quantized activations as the first 3x3 convolution.
    """

    kind = "residual-add"

    def __init__(self, pre: Layer, main: Sequential, shortcut: Sequential | None):
        super().__init__()
        self.pre, self.main, self.shortcut = pre, main, shortcut

    def children(self):
        return [c for c in (self.pre, self.main, self.shortcut) if c is not None]

    def forward(self, x, train=False):
        a, cpre = self.pre.forward(x, train)
        y, cmain = self.main.forward(a, train)
        if self.shortcut is None:
            return y + x, (cpre, cmain, None)
        s, csc = self.shortcut.forward(a, train)
        return y + s, (cpre, cmain, csc)

    def backward(self, dout, cache):
        cpre, cmain, csc = cache
        da = self.main.backward(dout, cmain)
        if self.shortcut is None:
            return self.pre.backward(da, cpre) + dout
        da = da + self.shortcut.backward(dout, csc)
        return self.pre.backward(da, cpre)


def walk(layer: Layer, prefix: str = ""):
    """Depth-first ``(qualified_name, layer)`` pairs for every leaf layer."""
    kids = layer.children()
    if not kids:
        yield prefix, layer
        return
    if isinstance(layer, BasicBlock):
        names = ["pre", "main", "shortcut"]
        pairs = [(n, c) for n, c in zip(names, [layer.pre, layer.main, layer.shortcut]) if c is not None]
    else:
        pairs = [(str(i), c) for i, c in enumerate(kids)]
    for n, c in pairs:
        yield from walk(c, f"{prefix}.{n}" if prefix else n)
