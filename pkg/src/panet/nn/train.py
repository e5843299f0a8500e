"""Optimizers and the quantization-aware training loop.

One step follows the usual recipe: forward with freshly fitted weight
quantizers, backward through the straight-through gradients, then update the
full-precision master weights together with the activation coefficients and
endpoints. The learning rate decays by ``decay`` after every epoch.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass

import numpy as np

from .models import Net, backward_pass, forward_pass, predict, softmax_cross_entropy

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.01
    decay: float = 0.95
    optimizer: str = "sgd-momentum"
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay factor must lie in (0, 1]")
        if self.optimizer not in ("sgd-momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


class Optimizer:
    """Keeps per-parameter state and applies in-place updates."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.lr = config.lr
        self.state: dict[str, dict] = {}
        self.t = 0

    def decay(self):
        self.lr *= self.config.decay

    def step(self, net: Net, grads: dict[str, np.ndarray]):
        update_step(net, grads, self)


def update_step(net: Net, grads: dict[str, np.ndarray], opt: Optimizer) -> Net:
    """Apply one optimizer update to every parameter, then re-sort activation endpoints."""
    cfg = opt.config
    opt.t += 1
    for name, layer, key, p in net.named_params():
        g = grads.get(name)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        st = opt.state.setdefault(name, {})
        if cfg.optimizer == "sgd-momentum":
            if cfg.momentum:
                buf = st.get("m")
                buf = g.copy() if buf is None else cfg.momentum * buf + g
                st["m"] = buf
                step = buf
            else:
                step = g
            p -= (opt.lr * step).astype(p.dtype)
        else:
            b1, b2 = cfg.betas
            m = st.get("m", np.zeros_like(g))
            v = st.get("v", np.zeros_like(g))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            st["m"], st["v"] = m, v
            mhat = m / (1 - b1**opt.t)
            vhat = v / (1 - b2**opt.t)
            p -= (opt.lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)).astype(p.dtype)
    for layer in net.pa_activations():
        if layer.state is not None:
            layer.sync()
    return net


def train_step(net: Net, x, y, opt: Optimizer) -> float:
    logits, caches = forward_pass(net, x, train=True)
    loss, dlogits = softmax_cross_entropy(logits, y)
    grads = backward_pass(net, caches, dlogits)
    update_step(net, grads, opt)
    return loss


def calibrate(net: Net, x):
    """Initialize every PA activation quantizer from one batch.

    Runs a forward pass in which each activation layer first fits its state
    to the values it receives, so later layers calibrate on quantized inputs.
    """
    for layer in net.pa_activations():
        layer.state = None
    # batch statistics, so the endpoints see normalized values; running
    # statistics are restored afterwards
    saved = {name: {k: b.copy() for k, b in layer.buffers.items()} for name, layer in net.leaves()}
    forward_pass(net, x, train=True)
    for name, layer in net.leaves():
        layer.buffers.update(saved[name])


def topk_accuracy(logits, labels, k: int = 1) -> float:
    if len(labels) == 0:
        return 0.0
    k = min(k, logits.shape[1])
    top = np.argpartition(-logits, k - 1, axis=1)[:, :k]
    return float(np.mean(np.any(top == np.asarray(labels)[:, None], axis=1)))


def evaluate(net: Net, x, y, batch_size: int = 500) -> dict:
    logits = predict(net, x, batch_size)
    return {"top1": topk_accuracy(logits, y, 1), "top5": topk_accuracy(logits, y, 5), "count": int(len(y))}


def batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def train(net: Net, x_train, y_train, config: TrainConfig, x_test=None, y_test=None,
          metrics_path=None, augment=None, start_epoch: int = 0, optimizer: Optimizer | None = None,
          on_epoch=None) -> list[dict]:
    """Run ``config.epochs`` epochs; returns (and optionally writes) per-epoch metrics.

    ``metrics_path`` receives one JSON object per epoch. ``augment`` is an
    optional ``(batch, rng) -> batch`` callable.
    """
    rng = np.random.default_rng(config.seed)
    opt = optimizer or Optimizer(config)
    if any(l.state is None for l in net.pa_activations()):
        calibrate(net, x_train[rng.permutation(len(x_train))[:config.batch_size * 4]])
    history = []
    out = open(metrics_path, "a" if start_epoch else "w") if metrics_path else None
    try:
        for epoch in range(start_epoch, config.epochs):
            erng = np.random.default_rng([config.seed, epoch])
            t0 = time.perf_counter()
            losses = []
            for idx in batches(len(x_train), config.batch_size, erng):
                xb = x_train[idx]
                if augment is not None:
                    xb = augment(xb, erng)
                losses.append(train_step(net, xb, y_train[idx], opt))
            row = {"epoch": epoch + 1, "loss": float(np.mean(losses)), "lr": opt.lr,
                   "seconds": round(time.perf_counter() - t0, 3)}
            if x_test is not None:
                m = evaluate(net, x_test, y_test)
                row["top1"], row["top5"] = m["top1"], m["top5"]
            opt.decay()
            history.append(row)
            log.info("epoch %d: %s", epoch + 1, row)
            if out:
                out.write(json.dumps(row) + "\n")
                out.flush()
            if on_epoch:
                on_epoch(epoch + 1, net, opt)
    finally:
        if out:
            out.close()
    return history


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["betas"] = list(d["betas"])
    return d
