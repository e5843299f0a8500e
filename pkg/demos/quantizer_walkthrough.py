"""Fit the weight and activation quantizers to random data and show what they produce.

Run: python demos/quantizer_walkthrough.py
"""

import numpy as np

from panet import activation_quant as aq
from panet import weight_quant as wq

rng = np.random.default_rng(0)
W = (rng.standard_normal((32, 16, 3, 3)) * 0.05).astype(np.float32)

wp, diag = wq.fit_weight_piecewise(W, wq.WeightQuantizerConfig(M=8))
print("sigma      ", round(float(wp.sigma), 5))
print("endpoints u", np.round(wp.u, 4))
print("alpha      ", np.round(wp.alpha, 4))
print("counts     ", diag.counts)

Wq = wq.quantize_weights_forward(W, wp)
print("levels used", np.unique(Wq).size, "| relative error", float(np.linalg.norm(W - Wq) / np.linalg.norm(W)))

# every weight is alpha_i times exactly one plane (or dead in the zero piece)
planes = wq.decompose_weight_bases(W, wp.u)
print("plane popcounts", [p.popcount() for p in planes])

# backward slopes differ per piece
print("STE slopes (lambda=1)", np.round(wq.weight_slopes(wp, 1.0), 4))

A = np.maximum(rng.standard_normal(4096), 0).astype(np.float32) * 2
st = aq.init_activation_state(A, N=5)
print("\nactivation v   ", np.round(st.v, 4))
print("activation beta", np.round(st.beta, 4))
print("window t       ", np.round(st.t, 4))
Aq = aq.quantize_activations_forward(A, st)
for level in np.unique(Aq):
    print(f"  level {level:+.4f}: {np.count_nonzero(Aq == level)}")
