"""Train a full-precision LeNet and its multi-binary twin on MNIST and compare.

Needs the four IDX files; point PA_MNIST_DIR at them (default /root/data/mnist).
Run: python demos/mnist_training.py [epochs]
"""

import os
import sys

from panet.export import format_histograms, weight_histograms
from panet.nn import TrainConfig, lenet, train
from panet.nn.data import load_mnist

root = os.environ.get("PA_MNIST_DIR", "/root/data/mnist")
epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 3
tr, te = load_mnist(root, "train"), load_mnist(root, "test")

# the large lambdas make the surrogate slopes O(1) for weights with sigma ~ 0.05
recipe = dict(M=8, N=7, channels=(8, 16), lambda_W=160.0, lambda_A=5.0, seed=0)
results = {}
for quantized in (False, True):
    net = lenet(quantized=quantized, **recipe)
    hist = train(net, tr.x, tr.y, TrainConfig(epochs=epochs, seed=0), te.x, te.y)
    for h in hist:
        print(f"{'PA' if quantized else 'full'} epoch {h['epoch']}: loss {h['loss']:.4f} top1 {h['top1']:.4f}")
    results[quantized] = hist[-1]["top1"]
    if quantized:
        print(format_histograms(weight_histograms(net, bins=16)[:1]))

print(f"full {results[False]:.2%}  PA {results[True]:.2%}  gap {100 * (results[False] - results[True]):.2f} points")
