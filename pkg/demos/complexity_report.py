"""Memory, Flops and latency of ImageNet ResNets under each binarization scheme.

Run: python demos/complexity_report.py
"""

from panet import complexity as cx

for depth in (18, 34, 50):
    arch = cx.resnet_imagenet(depth)
    reports = cx.compare(arch, f"resnet{depth}", M=4, N=5)
    print(cx.emit_report(reports, "text"))

# per-layer view for one conv under the critical-path model
layer = next(l for l in cx.resnet_imagenet(18) if l.kind == "conv" and not l.first)
est = cx.latency_estimate(layer, cx.pa(4, 5), cx.GateTimings())
print(layer.name, f"full {est.full:.3g} ps, PA {est.pa_general:.3g} ps, speedup {est.speedup_pa:.2f}x")
