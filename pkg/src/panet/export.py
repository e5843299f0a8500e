"""Self-contained quantized export, dual-path verification and histograms.

An export uses the PACK container layout with magic ``b"PAQ1"``. For every
binarized layer it stores ``<layer>.u`` and ``<layer>.alpha`` (float32 x M)
and ``<layer>.T``, the M weight planes as little-endian uint64 words of shape
``(M, words)``; every activation quantizer stores ``<layer>.v`` and
``<layer>.beta``. Real-valued layers keep their float32 tensors. The JSON
meta entry carries the architecture recipe plus a per-layer record with
geometry and lambda values.
"""

from __future__ import annotations

import numpy as np

from . import activation_quant as aq
from . import weight_quant as wq
from .bitops import BitPlane, binary_conv2d, merge_coefficients, pack
from .nn.checkpoint import CheckpointError, read_container, write_container
from .nn.layers import PA, Conv2d, Linear, PAActivation
from .nn.models import Net, build, forward_pass
from .tensor import DTYPE

MAGIC = b"PAQ1"
VERSION = 1


class ExportError(ValueError):
    pass


def _binarized(layer) -> bool:
    return isinstance(layer, (Conv2d, Linear)) and layer.policy == PA


def export_model(net: Net, path) -> dict:
    """Write ``net`` in quantized form; returns the meta record."""
    if not any(_binarized(l) for _, l in net.leaves()):
        raise ExportError("network has no binarized layers; build it with a quantization scheme first")
    tensors, layers = {}, {}
    for name, layer in net.leaves():
        if _binarized(layer):
            W = layer.params["W"]
            wp, _ = wq.fit_weight_piecewise(W, layer.wconfig)
            planes = wq.decompose_weight_bases(W, wp.u)
            tensors[f"{name}.u"] = wp.u
            tensors[f"{name}.alpha"] = wp.alpha
            tensors[f"{name}.T"] = np.stack([p.words for p in planes])
            rec = {"kind": layer.kind, "shape": list(W.shape), "M": wp.M, "lambda_W": layer.wconfig.lambda_W}
            if isinstance(layer, Conv2d):
                rec.update(stride=layer.stride, pad=layer.pad)
            layers[name] = rec
            if "b" in layer.params:
                tensors[f"{name}.b"] = layer.params["b"]
        elif isinstance(layer, PAActivation):
            if layer.state is None:
                raise ExportError(f"activation quantizer {name} is not calibrated")
            st = layer.state
            tensors[f"{name}.v"], tensors[f"{name}.beta"] = st.v, st.beta
            layers[name] = {"kind": layer.kind, "N": st.N, "lambda_A": st.lambda_A, "lambda_delta": st.lambda_delta}
        else:
            for k, v in layer.params.items():
                tensors[f"{name}.{k}"] = v
        for k, v in layer.buffers.items():
            tensors[f"{name}.@{k}"] = v
    meta = {"arch": net.arch, "layers": layers}
    write_container(path, tensors, meta, magic=MAGIC, version=VERSION)
    return meta


def _planes_from_words(words: np.ndarray, shape) -> list[BitPlane]:
    n = int(np.prod(shape))
    return [BitPlane(n, w, tuple(shape)) for w in words]


def reconstruct_weights(alpha, planes) -> np.ndarray:
    """``sum_i alpha_i * T_i`` in float32 (exact: the planes are disjoint)."""
    out = np.zeros(planes[0].shape, dtype=DTYPE)
    for a, p in zip(alpha, planes):
        out += DTYPE(a) * p.to_array()
    return out


def import_model(path) -> Net:
    """Inference-only network rebuilt from an export."""
    try:
        tensors, meta = read_container(path, magic=MAGIC, version=VERSION)
    except CheckpointError as e:
        raise ExportError(str(e)) from None
    net = build(meta["arch"])
    recs = meta["layers"]
    for name, layer in net.leaves():
        rec = recs.get(name)
        if _binarized(layer):
            if rec is None:
                raise ExportError(f"{name}: missing binarized layer record")
            planes = _planes_from_words(tensors[f"{name}.T"], rec["shape"])
            layer.frozen_weight = reconstruct_weights(tensors[f"{name}.alpha"], planes)
            layer.frozen_planes = (tensors[f"{name}.u"], tensors[f"{name}.alpha"], planes)
            if "b" in layer.params:
                layer.params["b"][...] = tensors[f"{name}.b"]
        elif isinstance(layer, PAActivation):
            layer.set_state(aq.ActivationQuantizerState(tensors[f"{name}.v"], tensors[f"{name}.beta"],
                                                        rec["lambda_A"], rec["lambda_delta"]))
        else:
            for k in layer.params:
                layer.params[k][...] = tensors[f"{name}.{k}"]
        for k in layer.buffers:
            layer.buffers[k] = tensors[f"{name}.@{k}"].copy()
    return net


# ---------------------------------------------------------------- dual path

def _weight_planes(layer):
    frozen = getattr(layer, "frozen_planes", None)
    if frozen is not None:
        _, alpha, planes = frozen
        return alpha, planes
    W = layer.params["W"]
    wp, _ = wq.fit_weight_piecewise(W, layer.wconfig)
    return wp.alpha, wq.decompose_weight_bases(W, wp.u)


def bitops_forward(layer, x_pre, state) -> np.ndarray:
    """Output of a binarized layer through the AND+popcount kernel.

    ``x_pre`` is the input of the activation quantizer feeding ``layer``.
    """
    alpha, planes = _weight_planes(layer)
    idx = aq.activation_pieces(x_pre, state)
    if isinstance(layer, Linear):
        planes = [pack(p.to_array().reshape(layer.fout, layer.fin, 1, 1)) for p in planes]
        idx = idx.reshape(idx.shape[0], -1, 1, 1)
        stride, pad = 1, 0
    else:
        stride, pad = layer.stride, layer.pad
    V = [pack(idx == j) for j in range(state.N)]
    out = binary_conv2d(planes, V, merge_coefficients(alpha, state.beta), stride, pad)
    if isinstance(layer, Linear):
        out = out.reshape(out.shape[0], -1)
        if "b" in layer.params:
            out = out + layer.params["b"]
    return out


def verify_bitops(net: Net, batch, rtol: float = 1e-4) -> list[dict]:
    """Run ``batch`` through ``net`` and recompute every binarized layer with bitops.

    Returns one record per binarized layer with the maximum relative
    deviation (scaled by the dense output's largest magnitude) and whether it
    is within ``rtol``.
    """
    records, results = [], []
    patched = []
    for name, layer in net.leaves():
        if isinstance(layer, PAActivation):
            def act_hook(x, train=False, _layer=layer, _orig=layer.forward):
                out, cache = _orig(x, train)
                records.append((out, x, _layer.state))
                return out, cache

            layer.forward = act_hook
            patched.append(layer)
        elif _binarized(layer):
            def hook(x, train=False, _layer=layer, _name=name, _orig=layer.forward):
                out, cache = _orig(x, train)
                src = next((r for r in reversed(records) if np.shares_memory(r[0], x)), None)
                if src is None:
                    results.append({"layer": _name, "ok": False, "max_rel": float("inf"),
                                    "note": "input is not a quantized activation"})
                    return out, cache
                pre = src[1].reshape((x.shape[0],) + src[1].shape[1:])
                bit = bitops_forward(_layer, pre, src[2])
                scale = max(float(np.abs(out).max()), 1e-12)
                dev = float(np.abs(bit.astype(np.float64) - out).max() / scale)
                results.append({"layer": _name, "ok": dev <= rtol, "max_rel": dev})
                return out, cache

            layer.forward = hook
            patched.append(layer)
    try:
        forward_pass(net, batch, train=False)
    finally:
        for layer in patched:
            del layer.forward
    return results


# ---------------------------------------------------------------- histograms

def level_histogram(values, levels) -> dict[float, int]:
    """Count of elements equal to each level; values off every level raise."""
    v = np.asarray(values).ravel()
    lv = np.unique(np.concatenate([np.asarray(levels, dtype=v.dtype).ravel(), np.zeros(1, v.dtype)]))
    counts = {float(l): int(np.count_nonzero(v == l)) for l in lv}
    if sum(counts.values()) != v.size:
        raise ValueError("values fall outside the given levels")
    return counts


def weight_histograms(net: Net, bins: int = 32) -> list[dict]:
    """Per binarized layer: a dense histogram of W and the level counts of the quantized weights."""
    out = []
    for name, layer in net.leaves():
        if not _binarized(layer):
            continue
        W = layer.params["W"]
        wp, diag = wq.fit_weight_piecewise(W, layer.wconfig)
        Wq = wq.quantize_weights_forward(W, wp)
        counts, edges = np.histogram(W, bins=bins)
        out.append({"layer": name, "edges": edges.tolist(), "counts": counts.tolist(),
                    "levels": level_histogram(Wq, wp.alpha), "empty_pieces": list(diag.empty_pieces)})
    return out


def format_histograms(hists: list[dict], width: int = 40) -> str:
    lines = []
    for h in hists:
        lines.append(f"{h['layer']}: full-precision weights")
        peak = max(max(h["counts"]), 1)
        for lo, c in zip(h["edges"], h["counts"]):
            lines.append(f"  {lo:+.4f} {c:>8d} {'#' * round(width * c / peak)}")
        lines.append(f"{h['layer']}: quantized weights")
        peak = max(max(h["levels"].values()), 1)
        for lv, c in h["levels"].items():
            lines.append(f"  {lv:+.4f} {c:>8d} {'#' * round(width * c / peak)}")
    return "\n".join(lines) + "\n"


def histograms_csv(hists: list[dict]) -> str:
    rows = ["layer,series,value,count"]
    for h in hists:
        rows += [f"{h['layer']},full,{lo!r},{c}" for lo, c in zip(h["edges"], h["counts"])]
        rows += [f"{h['layer']},quantized,{lv!r},{c}" for lv, c in h["levels"].items()]
    return "\n".join(rows) + "\n"
