"""Run a quantized convolution two ways: dense float math and AND+popcount over bit planes.

Run: python demos/bitwise_conv.py
"""

import time

import numpy as np

from panet import activation_quant as aq
from panet import weight_quant as wq
from panet.bitops import binary_conv2d, merge_coefficients
from panet.tensor import conv2d_reference

rng = np.random.default_rng(1)
W = rng.standard_normal((16, 8, 3, 3)).astype(np.float32)
A = rng.standard_normal((4, 8, 16, 16)).astype(np.float32)

wp, _ = wq.fit_weight_piecewise(W, wq.WeightQuantizerConfig(M=4))
st = aq.init_activation_state(A, N=3)

t = time.perf_counter()
dense = conv2d_reference(aq.quantize_activations_forward(A, st), wq.quantize_weights_forward(W, wp), 1, 1)
t_dense = time.perf_counter() - t

T = wq.decompose_weight_bases(W, wp.u)
V = aq.decompose_activation_bases(A, st)
t = time.perf_counter()
bitwise = binary_conv2d(T, V, merge_coefficients(wp.alpha, st.beta), 1, 1)
t_bit = time.perf_counter() - t

print("output", bitwise.shape)
print("max abs difference", float(np.abs(bitwise - dense).max()), "| scale", float(np.abs(dense).max()))
print(f"dense {t_dense * 1e3:.1f} ms, bitwise {t_bit * 1e3:.1f} ms ({len(T)}x{len(V)} plane pairs)")
