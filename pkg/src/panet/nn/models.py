"""Desk-scale reference networks and the forward/backward drivers."""

from __future__ import annotations

import numpy as np

from ..tensor import DTYPE, as_tensor
from .layers import (
    PA, REAL, BasicBlock, BatchNorm, Conv2d, Flatten, GlobalAvgPool, Layer, Linear, MaxPool2d,
    PAActivation, ReLU, Sequential, walk,
)


class Net:
    """A root layer plus the recipe that rebuilt it (``arch``)."""

    def __init__(self, root: Sequential, arch: dict, input_shape: tuple):
        self.root = root
        self.arch = dict(arch)
        self.input_shape = tuple(input_shape)
        for name, layer in walk(root):
            layer.name = name

    def leaves(self):
        return list(walk(self.root))

    def named_params(self):
        for name, layer in self.leaves():
            for key, arr in layer.params.items():
                yield f"{name}.{key}", layer, key, arr

    def pa_activations(self):
        return [l for _, l in self.leaves() if isinstance(l, PAActivation)]

    def weight_layers(self):
        return [l for _, l in self.leaves() if isinstance(l, (Conv2d, Linear))]


def forward_pass(net: Net, batch, train: bool = False):
    """Logits and the per-layer caches needed by :func:`backward_pass`."""
    x = as_tensor(batch)
    if x.shape[1:] != net.input_shape:
        raise ValueError(f"batch shape {x.shape[1:]} does not match network input {net.input_shape}")
    return net.root.forward(x, train)


def backward_pass(net: Net, caches, grad_logits) -> dict[str, np.ndarray]:
    """Populate and return all parameter gradients, keyed ``layer.param``."""
    for _, layer in net.leaves():
        layer.zero_grad()
    net.root.backward(as_tensor(grad_logits), caches)
    return {f"{name}.{k}": layer.grads[k] for name, layer in net.leaves() for k in layer.params}


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), (grad / n).astype(DTYPE)


def _act(quantized: bool, N: int, lambda_A: float, lambda_delta):
    return PAActivation(N, lambda_A, lambda_delta) if quantized else ReLU()


def lenet(M: int = 8, N: int = 7, quantized: bool = True, channels=(16, 32), hidden: int = 128,
          lambda_W: float = 1.0, lambda_A: float = 1.0, lambda_delta=None, seed: int = 0) -> Net:
    """2 conv + 2 FC network for 1x28x28 inputs.

    The first convolution and the last linear layer stay real-valued; with
    ``quantized`` the second convolution and the hidden linear layer are
    piecewise-binarized and PA activations replace the ReLUs feeding them.
    """
    rng = np.random.default_rng(seed)
    pol = PA if quantized else REAL
    c1, c2 = channels
    layers = [
        Conv2d(1, c1, 5, 1, 2, policy=REAL, rng=rng, first=True),
        BatchNorm(c1),
        MaxPool2d(2),
        _act(quantized, N, lambda_A, lambda_delta),
        Conv2d(c1, c2, 5, 1, 2, policy=pol, M=M, lambda_W=lambda_W, rng=rng),
        BatchNorm(c2),
        MaxPool2d(2),
        _act(quantized, N, lambda_A, lambda_delta),
        Flatten(),
        Linear(c2 * 7 * 7, hidden, policy=pol, M=M, lambda_W=lambda_W, bias=False, rng=rng),
        BatchNorm(hidden),
        ReLU(),
        Linear(hidden, 10, policy=REAL, rng=rng, last=True),
    ]
    arch = dict(id="lenet", M=M, N=N, quantized=quantized, channels=list(channels), hidden=hidden,
                lambda_W=lambda_W, lambda_A=lambda_A, lambda_delta=lambda_delta, seed=seed)
    return Net(Sequential(layers), arch, (1, 28, 28))


def resnet20(M: int = 4, N: int = 5, quantized: bool = True, width: int = 16, blocks_per_stage: int = 3,
             lambda_W: float = 1.0, lambda_A: float = 1.0, lambda_delta=None, seed: int = 0,
             num_classes: int = 10) -> Net:
    """CIFAR-style residual network: 3 stages of basic blocks.

    Downsampling shortcuts are 1x1 stride-2 convolutions, binarized together
    with the 3x3 convolutions when ``quantized``.
    """
    rng = np.random.default_rng(seed)
    pol = PA if quantized else REAL
    layers: list[Layer] = [Conv2d(3, width, 3, 1, 1, policy=REAL, rng=rng, first=True), BatchNorm(width)]
    cin = width
    for stage in range(3):
        cout = width * 2**stage
        for b in range(blocks_per_stage):
            stride = 2 if (stage > 0 and b == 0) else 1
            main = Sequential([
                Conv2d(cin, cout, 3, stride, 1, policy=pol, M=M, lambda_W=lambda_W, rng=rng),
                BatchNorm(cout),
                _act(quantized, N, lambda_A, lambda_delta),
                Conv2d(cout, cout, 3, 1, 1, policy=pol, M=M, lambda_W=lambda_W, rng=rng),
                BatchNorm(cout),
            ])
            shortcut = None
            if stride != 1 or cin != cout:
                shortcut = Sequential([
                    Conv2d(cin, cout, 1, stride, 0, policy=pol, M=M, lambda_W=lambda_W, rng=rng, downsampling=True),
                    BatchNorm(cout),
                ])
            layers.append(BasicBlock(_act(quantized, N, lambda_A, lambda_delta), main, shortcut))
            cin = cout
    layers += [ReLU(), GlobalAvgPool(), Linear(cin, num_classes, policy=REAL, rng=rng, last=True)]
    arch = dict(id="resnet20", M=M, N=N, quantized=quantized, width=width, blocks_per_stage=blocks_per_stage,
                lambda_W=lambda_W, lambda_A=lambda_A, lambda_delta=lambda_delta, seed=seed,
                num_classes=num_classes)
    return Net(Sequential(layers), arch, (3, 32, 32))


BUILDERS = {"lenet": lenet, "resnet20": resnet20}


def build(arch: dict) -> Net:
    kwargs = dict(arch)
    arch_id = kwargs.pop("id")
    if arch_id not in BUILDERS:
        raise ValueError(f"unknown architecture {arch_id!r}; known: {sorted(BUILDERS)}")
    if "channels" in kwargs:
        kwargs["channels"] = tuple(kwargs["channels"])
    return BUILDERS[arch_id](**kwargs)


def predict(net: Net, x, batch_size: int = 500) -> np.ndarray:
    out = []
    for s in range(0, len(x), batch_size):
        logits, _ = forward_pass(net, x[s:s + batch_size], train=False)
        out.append(logits)
    return np.concatenate(out) if out else np.zeros((0, 10), dtype=DTYPE)
