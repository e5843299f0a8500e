"""Analytic memory, Flops and latency models for binarized networks.

Conventions:

* memory is 32 bits per real-valued parameter plus 1 bit per binary value;
* Flops count real multiplications (one per multiply-accumulate in a
  real-valued layer), comparisons, and bitwise operations at 1/64, the
  word-level parallelism of a 64-bit CPU. A binarized layer pays N
  multiplications per output and N comparisons per input element;
* the first convolution and the last fully connected layer stay real-valued;
  1x1 downsampling convolutions are binarized unless the scheme says otherwise.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace

BITWISE_PARALLELISM = 64
REAL_BITS = 32

FULL = "full"
SINGLE = "single-binary"
MULTI = "multi-binary"


@dataclass(frozen=True)
class LayerGeom:
    """One convolution or fully connected layer; ``fc`` layers use k=1 on a 1x1 map."""

    name: str
    kind: str
    cin: int
    cout: int
    k: int
    stride: int
    in_hw: tuple
    out_hw: tuple
    bias: bool = False
    bn: bool = True
    first: bool = False
    last: bool = False
    downsample: bool = False

    @property
    def weights(self) -> int:
        return self.cin * self.cout * self.k * self.k

    @property
    def outputs(self) -> int:
        return self.cout * self.out_hw[0] * self.out_hw[1]

    @property
    def inputs(self) -> int:
        return self.cin * self.in_hw[0] * self.in_hw[1]

    @property
    def macs(self) -> int:
        return self.outputs * self.cin * self.k * self.k

    @property
    def fan_in(self) -> int:
        return self.cin * self.k * self.k


@dataclass(frozen=True)
class SchemeSpec:
    scheme: str = FULL
    M: int = 1
    N: int = 1
    first_last_real: bool = True
    downsampling_binarized: bool = True
    label: str = ""
    worst_case_reduction: bool = False

    def __post_init__(self):
        if self.scheme not in (FULL, SINGLE, MULTI):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.M < 1 or self.N < 1:
            raise ValueError("M and N must be >= 1")

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.scheme == MULTI:
            return f"multi-binary(M={self.M},N={self.N})"
        return self.scheme

    def binarized(self, layer: LayerGeom) -> bool:
        if self.scheme == FULL:
            return False
        if self.first_last_real and (layer.first or layer.last):
            return False
        if layer.downsample and not self.downsampling_binarized:
            return False
        return True

    @property
    def weight_bases(self) -> int:
        return self.M if self.scheme == MULTI else 1

    @property
    def activation_bases(self) -> int:
        return self.N if self.scheme == MULTI else 1


def full_precision() -> SchemeSpec:
    return SchemeSpec(FULL, label="full")


def bireal() -> SchemeSpec:
    """Single-binary network with real-valued downsampling shortcuts."""
    return SchemeSpec(SINGLE, downsampling_binarized=False, label="single-binary")


def abc(M: int = 5, N: int = 5) -> SchemeSpec:
    return SchemeSpec(MULTI, M, N, downsampling_binarized=False, label=f"abc(M={M},N={N})")


def pa(M: int = 4, N: int = 5) -> SchemeSpec:
    return SchemeSpec(MULTI, M, N, label=f"pa(M={M},N={N})")


# ---------------------------------------------------------------- architectures

def _out(hw, k, s, p):
    return tuple((x + 2 * p - k) // s + 1 for x in hw)


def resnet_imagenet(depth: int) -> list[LayerGeom]:
    """Standard ImageNet ResNet layer table (224x224 input, 1000 classes).

    ResNet-50 places the stride on the first 1x1 convolution of each
    downsampling bottleneck, as in the original Caffe release.
    """
    cfg = {18: ("basic", [2, 2, 2, 2]), 34: ("basic", [3, 4, 6, 3]), 50: ("bottleneck", [3, 4, 6, 3])}
    if depth not in cfg:
        raise ValueError(f"unsupported ResNet depth {depth}")
    block, counts = cfg[depth]
    layers = [LayerGeom("conv1", "conv", 3, 64, 7, 2, (224, 224), (112, 112), first=True)]
    hw = (56, 56)  # after 3x3/2 max-pool
    cin = 64
    for stage, n in enumerate(counts):
        width = 64 * 2**stage
        cout = width if block == "basic" else width * 4
        for b in range(n):
            stride = 2 if (stage > 0 and b == 0) else 1
            pre = f"layer{stage + 1}.{b}"
            ohw = _out(hw, 1, stride, 0)
            if block == "basic":
                layers.append(LayerGeom(f"{pre}.conv1", "conv", cin, width, 3, stride, hw, ohw))
                layers.append(LayerGeom(f"{pre}.conv2", "conv", width, width, 3, 1, ohw, ohw))
            else:
                layers.append(LayerGeom(f"{pre}.conv1", "conv", cin, width, 1, stride, hw, ohw))
                layers.append(LayerGeom(f"{pre}.conv2", "conv", width, width, 3, 1, ohw, ohw))
                layers.append(LayerGeom(f"{pre}.conv3", "conv", width, cout, 1, 1, ohw, ohw))
            if stride != 1 or cin != cout:
                layers.append(LayerGeom(f"{pre}.downsample", "conv", cin, cout, 1, stride, hw, ohw, downsample=True))
            cin, hw = cout, ohw
    layers.append(LayerGeom("fc", "fc", cin, 1000, 1, 1, (1, 1), (1, 1), bias=True, bn=False, last=True))
    return layers


def geometry_from_net(net) -> list[LayerGeom]:
    """Layer table of a :class:`panet.nn.Net`, traced with one dummy batch."""
    import numpy as np

    from .nn.layers import BatchNorm, Conv2d, Linear
    from .nn.models import forward_pass

    shapes = {}
    originals = {}
    states = {id(l): l.state for l in net.pa_activations()}
    for name, layer in net.leaves():
        if isinstance(layer, (Conv2d, Linear)):
            originals[name] = layer.forward

            def hook(x, train=False, _name=name, _orig=layer.forward):
                out, cache = _orig(x, train)
                shapes[_name] = (x.shape, out.shape)
                return out, cache

            layer.forward = hook
    try:
        forward_pass(net, np.zeros((1,) + net.input_shape, dtype=np.float32))
    finally:
        for name, layer in net.leaves():
            if name in originals:
                del layer.forward
        for l in net.pa_activations():
            if states[id(l)] is None:
                l.state = None
                l.params.clear()
    leaves = net.leaves()
    out = []
    for i, (name, layer) in enumerate(leaves):
        if name not in shapes:
            continue
        xs, ys = shapes[name]
        has_bn = i + 1 < len(leaves) and isinstance(leaves[i + 1][1], BatchNorm)
        if isinstance(layer, Conv2d):
            out.append(LayerGeom(name, "conv", layer.cin, layer.cout, layer.k, layer.stride, xs[2:], ys[2:],
                                 bn=has_bn, first=layer.first, downsample=layer.downsampling))
        else:
            out.append(LayerGeom(name, "fc", layer.fin, layer.fout, 1, 1, (1, 1), (1, 1), bias="b" in layer.params,
                                 bn=has_bn, last=layer.last))
    return out


def architectures() -> dict:
    return {"resnet18": lambda: resnet_imagenet(18), "resnet34": lambda: resnet_imagenet(34),
            "resnet50": lambda: resnet_imagenet(50), "lenet": _lenet_geom, "resnet20": _resnet20_geom}


def _lenet_geom():
    from .nn.models import lenet

    return geometry_from_net(lenet(quantized=False))


def _resnet20_geom():
    from .nn.models import resnet20

    return geometry_from_net(resnet20(quantized=False))


def get_architecture(arch_id: str) -> list[LayerGeom]:
    archs = architectures()
    if arch_id not in archs:
        raise ValueError(f"unknown architecture {arch_id!r}; known ids: {', '.join(sorted(archs))}")
    return archs[arch_id]()


# ---------------------------------------------------------------- accounting

@dataclass
class LayerCost:
    name: str
    binarized: bool
    params: int
    memory_bits: int
    flops: float
    bitwise_ops: int = 0
    real_mults: int = 0
    comparisons: int = 0
    latency_ps: float = 0.0


@dataclass
class ComplexityReport:
    arch: str
    scheme: str
    layers: list = field(default_factory=list)
    memory_bits: int = 0
    flops: float = 0.0
    latency_ps: float = 0.0
    memory_saving: float = 1.0
    speedup: float = 1.0

    @property
    def memory_mbit(self) -> float:
        return self.memory_bits / 1e6


def layer_cost(layer: LayerGeom, spec: SchemeSpec) -> LayerCost:
    bn_params = 2 * layer.cout if layer.bn else 0
    bias = layer.cout if layer.bias else 0
    real_side = REAL_BITS * (bn_params + bias)
    params = layer.weights + bn_params + bias
    if not spec.binarized(layer):
        return LayerCost(layer.name, False, params, REAL_BITS * layer.weights + real_side, float(layer.macs),
                         real_mults=layer.macs)
    M, N = spec.weight_bases, spec.activation_bases
    memory = M * layer.weights + real_side
    if spec.scheme == MULTI:
        memory += REAL_BITS * (M + 2 * N)  # alpha_i, and v_i / beta_i of the incoming activations
    bitwise = M * N * layer.macs
    # each output rescales its N alpha-merged popcount sums by beta_j; the
    # worst case instead scales all M*N terms separately
    mults = (M * N if spec.worst_case_reduction else N) * layer.outputs
    comps = N * layer.inputs
    flops = bitwise / BITWISE_PARALLELISM + mults + comps
    return LayerCost(layer.name, True, params, memory, flops, bitwise, mults, comps)


def memory_bits(arch: list[LayerGeom], spec: SchemeSpec) -> int:
    return sum(layer_cost(l, spec).memory_bits for l in arch)


def flops(arch: list[LayerGeom], spec: SchemeSpec) -> float:
    return sum(layer_cost(l, spec).flops for l in arch)


# ---------------------------------------------------------------- latency

@dataclass(frozen=True)
class GateTimings:
    """Gate and arithmetic delays (ps), areas (nm^2) and powers (nW).

    XNOR/AND values are the 7-nm two-input gate measurements. Arithmetic
    delays are placeholders meant to be overridden from a config file.
    ``t_pop`` of ``None`` derives a popcount delay from an adder tree of
    ``log2(n)`` levels, each costing ``t_pop_level``.
    """

    t_xnor: float = 10.87
    t_and: float = 9.62
    area_xnor: float = 2.90e3
    area_and: float = 1.45e3
    power_xnor: float = 1.23e3
    power_and: float = 6.24e2
    t_mul: float = 250.0
    t_add: float = 100.0
    t_com: float = 30.0
    t_pop: float | None = None
    t_pop_level: float = 21.74

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v is not None and not v > 0:
                raise ValueError(f"gate timing {k} must be positive, got {v}")

    def popcount_delay(self, n: int) -> float:
        if self.t_pop is not None:
            return self.t_pop
        return math.log2(max(n, 2)) * self.t_pop_level

    @classmethod
    def from_file(cls, path) -> "GateTimings":
        with open(path) as f:
            return cls(**json.load(f))


@dataclass
class LatencyEstimate:
    full: float
    single_binary: float
    pa_printed: float
    pa_general: float
    speedup_single: float
    speedup_pa: float


def latency_estimate(layer: LayerGeom, spec: SchemeSpec, gates: GateTimings = GateTimings()) -> LatencyEstimate:
    """Per-output latency of one convolution under the fully parallel model.

    ``pa_printed`` uses the published constant term (5 multiplies, 4 adds,
    1 comparison, stated for M=4, N=5); ``pa_general`` charges the worst case
    of M*N multiplies and M*N-1 adds for the coefficient reduction.
    """
    n = layer.fan_in
    tp = gates.popcount_delay(n)
    full = n * gates.t_mul + (n - 1) * gates.t_add
    single = n * (gates.t_xnor + tp) + gates.t_mul
    base = n * (gates.t_and + tp)
    printed = base + 5 * gates.t_mul + 4 * gates.t_add + gates.t_com
    mn = spec.weight_bases * spec.activation_bases
    general = base + mn * gates.t_mul + (mn - 1) * gates.t_add + gates.t_com
    return LatencyEstimate(
        full, single, printed, general,
        speedup_single=(gates.t_mul + gates.t_add) / (gates.t_xnor + tp),
        speedup_pa=(gates.t_mul + gates.t_add) / (gates.t_and + tp),
    )


def _layer_latency(layer: LayerGeom, spec: SchemeSpec, gates: GateTimings) -> float:
    est = latency_estimate(layer, spec, gates)
    if not spec.binarized(layer):
        return est.full
    if spec.scheme == SINGLE:
        return est.single_binary
    return est.pa_general


# ---------------------------------------------------------------- reports

def analyze(arch: list[LayerGeom], spec: SchemeSpec, arch_name: str = "", gates: GateTimings = GateTimings()) -> ComplexityReport:
    rows = []
    for l in arch:
        c = layer_cost(l, spec)
        c.latency_ps = _layer_latency(l, spec, gates)
        rows.append(c)
    rep = ComplexityReport(arch_name, spec.name, rows, sum(r.memory_bits for r in rows),
                           sum(r.flops for r in rows), sum(r.latency_ps for r in rows))
    full = [layer_cost(l, full_precision()) for l in arch]
    fm, ff = sum(r.memory_bits for r in full), sum(r.flops for r in full)
    rep.memory_saving = fm / rep.memory_bits if rep.memory_bits else 1.0
    rep.speedup = ff / rep.flops if rep.flops else 1.0
    return rep


def compare(arch: list[LayerGeom], arch_name: str = "", M: int = 4, N: int = 5,
            gates: GateTimings = GateTimings()) -> list[ComplexityReport]:
    return [analyze(arch, s, arch_name, gates) for s in (bireal(), abc(), pa(M, N), full_precision())]


LAYER_FIELDS = ["name", "binarized", "params", "memory_bits", "flops", "bitwise_ops", "real_mults",
                "comparisons", "latency_ps"]
CSV_FIELDS = ["arch", "scheme", "layer"] + LAYER_FIELDS[1:]


def report_dict(rep: ComplexityReport) -> dict:
    return {
        "arch": rep.arch,
        "scheme": rep.scheme,
        "totals": {"memory_bits": rep.memory_bits, "memory_mbit": rep.memory_mbit, "flops": rep.flops,
                   "latency_ps": rep.latency_ps},
        "ratios": {"memory_saving": rep.memory_saving, "speedup": rep.speedup},
        "layers": [{k: getattr(r, k) for k in LAYER_FIELDS} for r in rep.layers],
    }


def report_from_dict(d: dict) -> ComplexityReport:
    rows = [LayerCost(**r) for r in d["layers"]]
    t, r = d["totals"], d["ratios"]
    return ComplexityReport(d["arch"], d["scheme"], rows, t["memory_bits"], t["flops"], t["latency_ps"],
                            r["memory_saving"], r["speedup"])


def emit_report(reports, fmt: str = "text") -> str:
    """Serialize one report or a list of them as ``json``, ``csv`` or ``text``."""
    if isinstance(reports, ComplexityReport):
        reports = [reports]
    if fmt == "json":
        return json.dumps([report_dict(r) for r in reports], indent=2)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for rep in reports:
            for r in rep.layers:
                w.writerow([rep.arch, rep.scheme, r.name] + [getattr(r, k) for k in LAYER_FIELDS[1:]])
            w.writerow([rep.arch, rep.scheme, "TOTAL", "", sum(r.params for r in rep.layers), rep.memory_bits,
                        rep.flops, sum(r.bitwise_ops for r in rep.layers), sum(r.real_mults for r in rep.layers),
                        sum(r.comparisons for r in rep.layers), rep.latency_ps])
        return buf.getvalue()
    if fmt == "text":
        head = f"{'arch':<10} {'scheme':<24} {'memory':>12} {'saving':>8} {'flops':>11} {'speedup':>8}"
        lines = [head, "-" * len(head)]
        for rep in reports:
            lines.append(f"{rep.arch:<10} {rep.scheme:<24} {rep.memory_mbit:>8.1f}Mbit {rep.memory_saving:>7.2f}x "
                         f"{rep.flops:>11.3e} {rep.speedup:>7.2f}x")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def with_gates(gates: GateTimings, **overrides) -> GateTimings:
    return replace(gates, **overrides)
