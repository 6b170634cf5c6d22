"""The reverse-mode core: graphs, fan-out, and finite-difference checking.

Run:  python demos/02_autograd_and_gradcheck.py
"""

import numpy as np

from lowbit import Tensor, backward
from lowbit import tensor as T
from lowbit.ops import batch_norm, conv2d, softmax_cross_entropy

# --- gradients accumulate across fan-out -------------------------------------
x = Tensor(np.array(1.5), requires_grad=True)
backward(x + x)
print("d(x + x)/dx =", x.grad, "(fan-out sums branch gradients)")

# --- a conv layer checked against central finite differences ------------------
rng = np.random.default_rng(0)
x0 = rng.normal(size=(1, 2, 5, 5))        # float64: the 64-bit evaluation mode
w0 = rng.normal(size=(3, 2, 3, 3))
cot = rng.normal(size=(1, 3, 5, 5))       # random cotangent fixes the scalar

wt = Tensor(w0.copy(), requires_grad=True)
out = conv2d(Tensor(x0), wt, stride=1, pad=1)
backward(T.total_sum(out * Tensor(cot)))

h = 1e-4
fd = np.zeros_like(w0)
flat, fdf = w0.reshape(-1), fd.reshape(-1)
for i in range(flat.size):
    old = flat[i]
    flat[i] = old + h
    up = (conv2d(Tensor(x0), Tensor(w0), 1, 1).data * cot).sum()
    flat[i] = old - h
    dn = (conv2d(Tensor(x0), Tensor(w0), 1, 1).data * cot).sum()
    flat[i] = old
    fdf[i] = (up - dn) / (2 * h)

rel = np.abs(wt.grad - fd).max() / np.abs(fd).max()
print(f"conv weight gradient vs finite differences: rel err {rel:.2e}")

# --- a full little network step ------------------------------------------------
imgs = Tensor(rng.normal(size=(4, 2, 5, 5)).astype(np.float32))
labels = np.array([0, 1, 2, 1])
w = Tensor(rng.normal(0, 0.3, size=(3, 2, 3, 3)).astype(np.float32), requires_grad=True)
gamma = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
beta = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
rm, rv = np.zeros(3, dtype=np.float32), np.ones(3, dtype=np.float32)

h1 = conv2d(imgs, w, 1, 1)
h2 = batch_norm(h1, gamma, beta, rm, rv, training=True)
h3 = T.clip01(h2)
logits = T.reshape(h3, (4, 75))
loss = softmax_cross_entropy(T.matmul(logits, Tensor(
    rng.normal(0, 0.1, size=(75, 3)).astype(np.float32))), labels)
backward(loss)
print("loss:", float(loss.data))
print("conv grad norm:", float(np.linalg.norm(w.grad)))
print("bn gamma grad: ", gamma.grad)
