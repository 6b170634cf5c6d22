"""Uniform k-bit fake quantizers with straight-through-estimator gradients.

Weights use the tanh-normalized symmetric scheme for k >= 2 and
sign-times-mean-magnitude at k = 1; activations round onto the unit-interval
grid after clipping to [0, 1]. 32 bits always means an exact bypass: the
input tensor is returned unchanged, forward and backward.

Rounding is half-away-from-zero everywhere, since grid parities make exact
ties reachable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DegenerateScaleError, InputError
from .tensor import Tensor, _result, accumulate_grad

BIT_CHOICES = (1, 2, 3, 4, 8, 16, 32)

# Count of actual (non-bypass) quantizer applications; lets tests assert that
# e.g. a teacher's logits path never quantizes anything.
_applied = 0


def applied_count():
    return _applied


def reset_applied_count():
    global _applied
    _applied = 0


def _bump():
    global _applied
    _applied += 1


def _check_bits(k):
    if k == 32:
        return
    if not isinstance(k, (int, np.integer)) or k < 1 or k > 16:
        raise InputError(f"bit-width must be an int in [1, 16] or 32, got {k!r}")


def round_half_away(v):
    """Round to nearest integer, ties away from zero (unlike numpy's round)."""
    return np.copysign(np.floor(np.abs(v) + 0.5), v)


def quantize_unit(x, k):
    """Snap values in [0, 1] onto the uniform grid {i / (2^k - 1)}.

    Clipping is the caller's job: out-of-range input is a bug, not data.
    """
    _check_bits(k)
    if k == 32:
        return x
    arr = np.asarray(x)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise InputError("quantize_unit: input outside [0, 1]; clip before quantizing")
    n = float(2 ** k - 1)
    out = round_half_away(arr * n) / n
    if np.isscalar(x):
        return float(out)
    return out.astype(arr.dtype)


def ste_backward(grad_out, saved_input, kind):
    """Straight-through gradients for the two quantizer families.

    ``activation``: pass-through where the pre-quantization input lies in
    [0, 1] (boundaries included), zero outside.
    ``weight_unit``: the rounding step is treated as identity; the
    surrounding tanh/scale chain is differentiated by ordinary autograd
    outside this function.
    """
    if kind == "activation":
        mask = (saved_input >= 0.0) & (saved_input <= 1.0)
        return grad_out * mask
    if kind == "weight_unit":
        return grad_out
    raise InputError(f"ste_backward: unknown kind {kind!r}")


def quantize_activation(x, k):
    """Element-wise quantize_unit(clip(x, 0, 1), k); k = 32 is a bypass."""
    _check_bits(k)
    if k == 32:
        return x
    saved = x.data
    n = float(2 ** k - 1)
    # clipped values are nonnegative, so half-away-from-zero == half-up
    out = np.floor(np.clip(saved, 0.0, 1.0) * n + 0.5) / n
    out = out.astype(saved.dtype, copy=False)
    _bump()

    def backward_fn(g):
        accumulate_grad(x, ste_backward(g, saved, "activation"))

    res = _result(out, (x,), backward_fn)
    res.from_quantizer = True
    return res


def _unit_round_ste(u, k):
    """Grid rounding on [0, 1] with identity backward (the weight-path STE)."""
    n = float(2 ** k - 1)
    out = (round_half_away(u.data * n) / n).astype(u.data.dtype)

    def backward_fn(g):
        accumulate_grad(u, ste_backward(g, u.data, "weight_unit"))

    return _result(out, (u,), backward_fn)


def quantize_weight(w, k):
    """Fake-quantize a weight tensor at k bits.

    k >= 2: w_q = 2 * quantize_unit(tanh(w) / (2 max|tanh(W)|) + 1/2, k) - 1,
    with the max taken over the whole tensor. The tanh/scale chain (max
    included) is differentiated exactly; only the rounding is straight-through.

    k = 1: w_q = sign(w) * mean|W| with the scale treated as a constant and an
    identity straight-through backward.

    k = 32 is a bypass.
    """
    _check_bits(k)
    if k == 32:
        return w
    if w.data.size == 0:
        raise InputError("quantize_weight: empty weight tensor")

    if k == 1:
        scale = float(np.abs(w.data).mean())
        out = np.where(w.data >= 0.0, scale, -scale).astype(w.data.dtype)
        _bump()

        def backward_fn(g):
            accumulate_grad(w, ste_backward(g, w.data, "weight_unit"))

        return _result(out, (w,), backward_fn)

    if float(np.abs(np.tanh(w.data)).max()) == 0.0:
        raise DegenerateScaleError(
            "quantize_weight: max|tanh(W)| is zero (all-zero weight tensor)")
    t = T.tanh(w)
    m2 = T.scale(T.reduce_max(T.absolute(t)), 2.0)
    u = T.add_const(T.div_by(t, m2), 0.5)
    q = _unit_round_ste(u, k)
    _bump()
    return T.add_const(T.scale(q, 2.0), -1.0)


@dataclass
class QuantSpec:
    """Bit-width assignment for one fragment or a whole model."""

    weight_bits: int = 32
    activation_bits: int = 32
    rounding: str = "half-away-from-zero"
    weight_scheme: str = "dorefa_tanh"
    activation_clip: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.weight_bits not in BIT_CHOICES:
            raise InputError(f"weight_bits must be one of {BIT_CHOICES}, got {self.weight_bits}")
        if self.activation_bits not in BIT_CHOICES:
            raise InputError(f"activation_bits must be one of {BIT_CHOICES}, got {self.activation_bits}")
        if self.rounding != "half-away-from-zero":
            raise InputError(f"unsupported rounding mode {self.rounding!r}")
        if self.weight_scheme not in ("dorefa_tanh", "sign_meanabs"):
            raise InputError(f"unknown weight scheme {self.weight_scheme!r}")
        if self.weight_scheme == "sign_meanabs" and self.weight_bits != 1:
            raise InputError("sign_meanabs is valid only at weight_bits = 1")
        if tuple(self.activation_clip) != (0.0, 1.0):
            raise InputError("activation_clip must be [0, 1] for the uniform quantizer")
