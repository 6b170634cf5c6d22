"""Fast invariant suites runnable from the CLI (``lowbit selftest``).

These are smaller, quicker versions of the checks the test suite runs in
full; they exist so a fresh install can be sanity-checked without pytest.
"""

from __future__ import annotations

import numpy as np

from . import ops, quant
from . import strategies as S
from . import tensor as T
from .network import ModelSpec, build_model, uniform_mask, apply_precision
from .tensor import Tensor


def _check_quantizer_grid():
    rng = np.random.default_rng(0)
    for k in (1, 2, 3, 4, 8):
        x = rng.random(2000)
        q = quant.quantize_unit(x, k)
        n = 2 ** k - 1
        if not np.all(np.abs(q * n - np.round(q * n)) <= np.spacing(float(n))):
            return False, f"k={k}: off-grid value"
        if not np.array_equal(quant.quantize_unit(q, k), q):
            return False, f"k={k}: not idempotent"
        xs = np.sort(x)
        if np.any(np.diff(quant.quantize_unit(xs, k)) < 0):
            return False, f"k={k}: not monotone"
        if np.abs(q - x).max() > 0.5 / n + 1e-12:
            return False, f"k={k}: error bound violated"
    return True, "grid, idempotence, monotonicity, error bound (k in 1..8)"


def _check_ste():
    g = np.ones(5)
    x = np.array([-0.5, 0.0, 0.5, 1.0, 1.5])
    got = quant.ste_backward(g, x, "activation")
    want = np.array([0.0, 1.0, 1.0, 1.0, 0.0])
    if not np.array_equal(got, want):
        return False, f"clipped STE mask wrong: {got}"
    if not np.array_equal(quant.ste_backward(g, x, "weight_unit"), g):
        return False, "weight-unit STE is not identity"
    return True, "clipped and identity STE rules"


def _check_conv_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    out = ops.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data
    ref = ops.conv2d_reference(x, w, stride=2, pad=1)
    err = np.abs(out - ref).max()
    if err > 1e-4:
        return False, f"conv mismatch {err:.2e}"
    return True, f"im2col vs direct loop, max err {err:.1e}"


def _fd_scalar(fn, x, h=1e-4):
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn(x)
        flat[i] = old - h
        fm = fn(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def _check_gradients():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 5, 5)).astype(np.float64)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float64)
    cot = rng.normal(size=(2, 4, 5, 5)).astype(np.float64)

    def f(arr):
        return float((ops.conv2d(Tensor(arr), Tensor(w), 1, 1).data * cot).sum())

    xt = Tensor(x, requires_grad=True)
    out = ops.conv2d(xt, Tensor(w), 1, 1)
    T.backward(T.total_sum(out * Tensor(cot)))
    num = _fd_scalar(f, x.copy())
    err = np.abs(xt.grad - num).max() / max(np.abs(num).max(), 1e-9)
    if err > 1e-3:
        return False, f"conv input grad rel err {err:.2e}"
    return True, f"conv gradient vs finite differences, rel err {err:.1e}"


def _check_partition():
    rng = np.random.default_rng(3)
    for delta in (0.0, 0.5, 1.0):
        for _ in range(200):
            b = S.sample_indicator(8, delta, True, rng)
            from .network import PrecisionMask
            groups = PrecisionMask.from_indicator(b, 2, 2).subsets()
            all_idx = sorted(sum(groups.values(), []))
            if all_idx != list(range(8)):
                return False, f"delta={delta}: subsets do not partition"
    return True, "G_qwa/G_qw/G_qa/G_r disjoint cover, delta in {0, .5, 1}"


def _check_losses():
    p = Tensor(np.full((4, 10), 0.1))
    val = float(S.kl_divergence(p, p).data)
    if abs(val) > 1e-7:
        return False, f"KL(p,p) = {val}"
    t = [Tensor(np.array([[1.0, 0.0]]))]
    s = [Tensor(np.array([[0.0, 0.0]]))]
    r = float(S.hint_loss(t, s, 2).data)
    if abs(r - 0.5) > 1e-7:
        return False, f"hint loss {r} != 0.5"
    return True, "KL identity and hint-loss hand values"


def _check_bypass():
    spec = ModelSpec(architecture="plain_cnn", stage_widths=(4, 8),
                     blocks_per_stage=1, num_classes=4, in_channels=3)
    a = build_model(spec, 5)
    b = build_model(spec, 5)
    apply_precision(a, uniform_mask(a, 32, 32))
    b.quant_enabled = False
    x = np.random.default_rng(4).normal(size=(2, 3, 8, 8)).astype(np.float32)
    a.eval()
    b.eval()
    with T.no_grad():
        ya, _ = a.forward(Tensor(x))
        yb, _ = b.forward(Tensor(x))
    if not np.array_equal(ya.data, yb.data):
        return False, "32-bit mask differs from quantizer-free model"
    return True, "all-(32,32) mask is bit-identical to no quantizers"


CHECKS = [
    ("quantizer-exactness", _check_quantizer_grid),
    ("ste-rules", _check_ste),
    ("conv-oracle", _check_conv_oracle),
    ("gradient-check", _check_gradients),
    ("indicator-partition", _check_partition),
    ("distillation-losses", _check_losses),
    ("mask-bypass", _check_bypass),
]


def run_selftest(out=print):
    ok_all = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as e:  # a crash is a failure, not an abort
            ok, detail = False, f"{type(e).__name__}: {e}"
        ok_all &= ok
        out(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return ok_all
