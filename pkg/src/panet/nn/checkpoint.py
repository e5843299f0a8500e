"""Binary checkpoint container.

Layout (little-endian)::

    b"PACK"  u32 version  u32 entry_count
    entry*:  u16 name_len  name(utf-8)  u8 dtype  u8 ndim  u32 shape[ndim]
             u64 nbytes  payload

Tensors are keyed ``<layer>.<param>`` for parameters, ``<layer>.@<buffer>``
for buffers and ``opt/<param>/<slot>`` for optimizer state. The entry named
``__meta__`` (dtype code 255) holds a UTF-8 JSON object with the
architecture recipe, activation-quantizer settings and training progress.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .layers import PAActivation
from .models import Net, build

MAGIC = b"PACK"
VERSION = 1
META = "__meta__"
_JSON_CODE = 255
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("<u8"), 4: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def write_container(path, tensors: dict, meta: dict, magic: bytes = MAGIC, version: int = VERSION):
    body = [magic, struct.pack("<II", version, len(tensors) + 1)]

    def entry(name, code, shape, payload):
        nb = name.encode()
        body.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, len(shape)))
        body.append(struct.pack(f"<{len(shape)}I", *shape))
        body.append(struct.pack("<Q", len(payload)) + payload)

    entry(META, _JSON_CODE, (), json.dumps(meta, sort_keys=True).encode())
    for name, arr in tensors.items():
        a = np.asarray(arr)
        dt = a.dtype.newbyteorder("<") if a.dtype.byteorder == ">" else a.dtype
        if dt not in _CODES:
            raise CheckpointError(f"unsupported dtype {a.dtype} for {name}")
        entry(name, _CODES[dt], a.shape, np.ascontiguousarray(a, dtype=dt).tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(body))


def read_container(path, magic: bytes = MAGIC, version: int = VERSION) -> tuple[dict, dict]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != magic:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    pos = 4

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated while reading {what} at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    ver, count = struct.unpack("<II", take(8, "header"))
    if ver != version:
        raise CheckpointError(f"{path}: unsupported version {ver} (expected {version})")
    tensors, meta = {}, None
    for _ in range(count):
        (nl,) = struct.unpack("<H", take(2, "name length"))
        name = take(nl, "name").decode()
        code, ndim = struct.unpack("<BB", take(2, f"header of {name}"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"shape of {name}"))
        (nbytes,) = struct.unpack("<Q", take(8, f"size of {name}"))
        payload = take(nbytes, f"payload of {name}")
        if code == _JSON_CODE:
            meta = json.loads(payload.decode())
            continue
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
        dt = _DTYPES[code]
        if nbytes != dt.itemsize * int(np.prod(shape)):
            raise CheckpointError(f"{path}: {name} payload is {nbytes} bytes, shape {shape} needs "
                                  f"{dt.itemsize * int(np.prod(shape))}")
        tensors[name] = np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    if meta is None:
        raise CheckpointError(f"{path}: missing {META} entry")
    return tensors, meta


def state_dict(net: Net) -> dict:
    out = {}
    for name, layer in net.leaves():
        for k, v in layer.params.items():
            out[f"{name}.{k}"] = v
        for k, v in layer.buffers.items():
            out[f"{name}.@{k}"] = v
    return out


def save_checkpoint(path, net: Net, optimizer=None, epoch: int = 0, extra: dict | None = None):
    tensors = dict(state_dict(net))
    meta = {"arch": net.arch, "epoch": epoch, "activations": {}}
    for name, layer in net.leaves():
        if isinstance(layer, PAActivation) and layer.state is not None:
            meta["activations"][name] = {"lambda_A": layer.state.lambda_A, "lambda_delta": layer.state.lambda_delta}
    if optimizer is not None:
        meta["optimizer"] = {"lr": optimizer.lr, "t": optimizer.t}
        for pname, slots in optimizer.state.items():
            for slot, arr in slots.items():
                tensors[f"opt/{pname}/{slot}"] = np.asarray(arr, dtype=np.float64)
    if extra:
        meta.update(extra)
    write_container(path, tensors, meta)


def load_into(net: Net, tensors: dict, meta: dict, strict: bool = True):
    """Copy tensors into ``net``; mismatches are collected and reported together."""
    from .. import activation_quant as aq

    expected = state_dict(net)
    problems = []
    acts = meta.get("activations", {})
    for name, layer in net.leaves():
        if isinstance(layer, PAActivation) and name in acts:
            v, b = tensors.get(f"{name}.v"), tensors.get(f"{name}.beta")
            if v is None or b is None:
                problems.append(f"{name}: activation state incomplete")
                continue
            layer.set_state(aq.ActivationQuantizerState(v.copy(), b.copy(), **acts[name]))
            expected[f"{name}.v"], expected[f"{name}.beta"] = layer.params["v"], layer.params["beta"]
    for key, target in expected.items():
        src = tensors.get(key)
        if src is None:
            problems.append(f"{key}: missing")
        elif src.shape != target.shape:
            problems.append(f"{key}: shape {src.shape} != expected {target.shape}")
        else:
            target[...] = src
    if strict:
        known = set(expected)
        for key in tensors:
            if key not in known and not key.startswith("opt/"):
                problems.append(f"{key}: unexpected")
    if problems:
        raise CheckpointError("checkpoint does not fit the network:\n  " + "\n  ".join(problems))


def load_checkpoint(path) -> tuple[Net, dict, dict]:
    """Rebuild the network recorded in ``path``; returns ``(net, meta, optimizer_state)``."""
    tensors, meta = read_container(path)
    net = build(meta["arch"])
    load_into(net, tensors, meta)
    opt_state: dict = {}
    for key, arr in tensors.items():
        if key.startswith("opt/"):
            _, pname, slot = key.split("/", 2)
            opt_state.setdefault(pname, {})[slot] = arr
    return net, meta, opt_state


def load_pretrained(net: Net, path, calibration_batch=None):
    """Initialize ``net`` (possibly quantized) from a checkpoint of a real-valued twin.

    Weight and batch-norm tensors must match layer for layer; activation
    quantizers missing from the checkpoint are calibrated on ``calibration_batch``.
    """
    from .train import calibrate

    tensors, meta = read_container(path)
    src = {k: v for k, v in tensors.items() if not k.startswith("opt/")}
    expected = state_dict(net)
    problems = []
    for key, target in expected.items():
        if key not in src:
            continue
        if src[key].shape != target.shape:
            problems.append(f"{key}: shape {src[key].shape} != expected {target.shape}")
    weights = [k for k in expected if k.endswith(".W")]
    problems += [f"{k}: missing" for k in weights if k not in src]
    if problems:
        raise CheckpointError("pretrained checkpoint does not fit the network:\n  " + "\n  ".join(problems))
    for key, target in expected.items():
        if key in src:
            target[...] = src[key]
    if any(l.state is None for l in net.pa_activations()):
        if calibration_batch is None:
            raise CheckpointError("activation quantizers need a calibration batch")
        calibrate(net, calibration_batch)
    return net
