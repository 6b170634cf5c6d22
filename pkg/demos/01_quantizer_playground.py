"""A walk through the uniform k-bit quantizers and their STE gradients.

Run:  python demos/01_quantizer_playground.py
Writes quantizer_staircase.svg next to this script.
"""

import os

import numpy as np

from lowbit import Tensor, backward, quantize_activation, quantize_unit, quantize_weight
from lowbit import tensor as T

# --- the unit-interval grid ---------------------------------------------------
# k bits give 2^k levels {i / (2^k - 1)}; rounding is half away from zero.
for k in (1, 2, 3):
    xs = [0.0, 0.2, 0.5, 0.8, 1.0]
    print(f"k={k}:", [round(quantize_unit(x, k), 4) for x in xs])

# The worst-case error is half a grid step:
x = np.random.default_rng(0).random(10_000)
for k in (2, 4, 8):
    err = np.abs(quantize_unit(x, k) - x).max()
    print(f"k={k}: max error {err:.5f} <= bound {0.5 / (2**k - 1):.5f}")

# --- activations: clip to [0,1], snap to the grid, STE in backward -------------
a = Tensor(np.array([-0.3, 0.1, 0.5, 0.9, 1.4]), requires_grad=True)
q = quantize_activation(a, 2)
backward(T.total_sum(q))
print("activation in: ", a.data)
print("activation out:", q.data)          # on the 2-bit grid {0, 1/3, 2/3, 1}
print("STE gradient:  ", a.grad)          # passes only where 0 <= x <= 1

# --- weights: tanh-normalized symmetric grid ------------------------------------
w = Tensor(np.array([[-1.2, 0.0], [0.4, 2.0]]), requires_grad=True)
wq = quantize_weight(w, 2)
print("weights in: ", w.data.ravel())
print("weights out:", wq.data.ravel())    # symmetric grid {-1, -1/3, 1/3, 1}

# --- a picture of the staircase ---------------------------------------------------
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

xs = np.linspace(0, 1, 801)
fig, ax = plt.subplots(figsize=(5, 3.2))
for k in (1, 2, 3):
    ax.plot(xs, quantize_unit(xs, k), label=f"k={k}", lw=1.2)
ax.plot(xs, xs, "k--", lw=0.6, label="identity")
ax.set_xlabel("x")
ax.set_ylabel("q(x)")
ax.legend()
fig.tight_layout()
out = os.path.join(os.path.dirname(__file__), "quantizer_staircase.svg")
fig.savefig(out)
print("wrote", out)
