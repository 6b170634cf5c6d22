"""Model construction from a declarative spec, with per-fragment precision.

A *fragment* is the atomic unit that precision is assigned to: a residual
block at block granularity, a single conv/linear layer at layer granularity.
The structural forward chain (stem, blocks, head) is fixed; fragments only
decide which quantizers engage inside it.

The trunk nonlinearity is clip(x, 0, 1) everywhere, which is the bounded
activation the unit-interval quantizer needs; the activation quantizer sits
directly after it. In ``resnet_basic`` the residual add therefore consumes
quantized activations, while ``preresnet_basic`` keeps its identity path
quantizer-free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops, quant
from . import tensor as T
from .errors import ExclusionError, InputError, MaskError, SpecError, TapError
from .tensor import Tensor

ARCHITECTURES = ("plain_cnn", "resnet_basic", "preresnet_basic")
GRANULARITIES = ("layer", "block")


@dataclass
class ModelSpec:
    architecture: str = "preresnet_basic"
    stage_widths: tuple = (16, 32, 64)
    blocks_per_stage: int = 2
    num_classes: int = 10
    in_channels: int = 3
    quantize_first_last: bool = False
    input_bits: int = 0  # 0 -> derived: 8 for the "*" variant, else 32
    fragment_granularity: str = "block"

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise SpecError(f"unknown architecture {self.architecture!r}")
        if self.fragment_granularity not in GRANULARITIES:
            raise SpecError(f"unknown fragment granularity {self.fragment_granularity!r}")
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        if not self.stage_widths or any(w <= 0 for w in self.stage_widths):
            raise SpecError(f"stage widths must be positive, got {self.stage_widths}")
        if self.blocks_per_stage < 1:
            raise SpecError("blocks_per_stage must be >= 1")
        if self.num_classes < 2:
            raise SpecError("num_classes must be >= 2")
        if self.in_channels < 1:
            raise SpecError("in_channels must be >= 1")
        if self.input_bits == 0:
            self.input_bits = 8 if self.quantize_first_last else 32
        if not self.quantize_first_last and self.input_bits != 32:
            raise SpecError("input_bits != 32 requires quantize_first_last")
        if self.input_bits not in quant.BIT_CHOICES:
            raise SpecError(f"input_bits must be one of {quant.BIT_CHOICES}")

    def to_dict(self):
        return {
            "architecture": self.architecture,
            "stage_widths": list(self.stage_widths),
            "blocks_per_stage": self.blocks_per_stage,
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "quantize_first_last": self.quantize_first_last,
            "input_bits": self.input_bits,
            "fragment_granularity": self.fragment_granularity,
        }

    @staticmethod
    def from_dict(d):
        return ModelSpec(
            architecture=d["architecture"],
            stage_widths=tuple(d["stage_widths"]),
            blocks_per_stage=d["blocks_per_stage"],
            num_classes=d["num_classes"],
            in_channels=d["in_channels"],
            quantize_first_last=d["quantize_first_last"],
            input_bits=d["input_bits"],
            fragment_granularity=d["fragment_granularity"],
        )


@dataclass
class Fragment:
    """Precision-assignment unit; excluded fragments are pinned to 32/32."""

    name: str
    kind: str
    excluded: bool
    weight_bits: int = 32
    activation_bits: int = 32


@dataclass
class HintTap:
    """Fragment index at which a feature map is exported during forward."""

    position: int


@dataclass
class PrecisionMask:
    """Per-fragment (weight_bits, activation_bits), optionally derived from a
    binary indicator matrix B of shape N x 2."""

    entries: list
    source_indicator: np.ndarray | None = None

    @staticmethod
    def uniform(n, weight_bits, activation_bits, excluded=()):
        excluded = set(excluded)
        entries = [(32, 32) if i in excluded else (weight_bits, activation_bits)
                   for i in range(n)]
        return PrecisionMask(entries)

    @staticmethod
    def from_indicator(indicator, weight_bits, activation_bits, excluded=()):
        """Column 0 of B selects weight quantization, column 1 activations."""
        b = np.asarray(indicator)
        if b.ndim != 2 or b.shape[1] != 2:
            raise MaskError(f"indicator must be N x 2, got {b.shape}")
        excluded = set(excluded)
        entries = []
        for i in range(b.shape[0]):
            if i in excluded:
                entries.append((32, 32))
            else:
                entries.append((weight_bits if b[i, 0] else 32,
                                activation_bits if b[i, 1] else 32))
        return PrecisionMask(entries, source_indicator=b.copy())

    def indicator(self):
        if self.source_indicator is not None:
            return self.source_indicator
        return np.array([[int(wb < 32), int(ab < 32)] for wb, ab in self.entries])

    def subsets(self):
        """The G_qwa / G_qw / G_qa / G_r partition induced by the indicator."""
        b = self.indicator()
        groups = {"G_qwa": [], "G_qw": [], "G_qa": [], "G_r": []}
        for i, (bw, ba) in enumerate(b):
            if bw and ba:
                groups["G_qwa"].append(i)
            elif bw:
                groups["G_qw"].append(i)
            elif ba:
                groups["G_qa"].append(i)
            else:
                groups["G_r"].append(i)
        return groups


# -- layers -------------------------------------------------------------------

class Conv2d:
    def __init__(self, name, in_ch, out_ch, ksize, stride, pad, rng):
        self.name = name
        self.stride = stride
        self.pad = pad
        fan_in = in_ch * ksize * ksize
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, ksize, ksize))
        self.weight = Tensor(w.astype(np.float32), requires_grad=True)
        self.frag = None  # fragment index, assigned at build time

    def parameters(self):
        return {f"{self.name}.weight": self.weight}


class Linear:
    def __init__(self, name, in_f, out_f, rng):
        self.name = name
        w = rng.normal(0.0, np.sqrt(2.0 / in_f), size=(out_f, in_f))
        self.weight = Tensor(w.astype(np.float32), requires_grad=True)
        self.frag = None

    def parameters(self):
        return {f"{self.name}.weight": self.weight}


class BatchNorm2d:
    """Batch norm; parameters and statistics are never quantized."""

    def __init__(self, name, channels, momentum=0.1, eps=1e-5):
        self.name = name
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x, training):
        return ops.batch_norm(x, self.gamma, self.beta,
                              self.running_mean, self.running_var,
                              training, self.momentum, self.eps)

    def parameters(self):
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}


# -- structural units ----------------------------------------------------------

class Unit:
    """One link of the forward chain. ``net`` is attached by the builder."""

    net = None

    def _bits(self, frag_idx):
        f = self.net.fragments[frag_idx]
        return f.weight_bits, f.activation_bits

    def _conv(self, layer, x):
        w = layer.weight
        if self.net.quant_enabled:
            w = quant.quantize_weight(w, self.net.fragments[layer.frag].weight_bits)
        return ops.conv2d(x, w, layer.stride, layer.pad)

    def _fc(self, layer, x):
        w = layer.weight
        if self.net.quant_enabled:
            w = quant.quantize_weight(w, self.net.fragments[layer.frag].weight_bits)
        return ops.linear(x, w)

    def _act(self, h, frag_idx):
        h = T.clip01(h)
        if self.net.quant_enabled:
            h = quant.quantize_activation(h, self.net.fragments[frag_idx].activation_bits)
        return h

    def layers(self):
        return []

    def bn_layers(self):
        return []


class StemUnit(Unit):
    """First convolution; bare for pre-activation nets, conv-BN-act otherwise."""

    def __init__(self, name, in_ch, out_ch, rng, with_bn_act):
        self.name = name
        self.conv = Conv2d(f"{name}.conv", in_ch, out_ch, 3, 1, 1, rng)
        self.bn = BatchNorm2d(f"{name}.bn", out_ch) if with_bn_act else None

    def forward(self, x):
        h = self._conv(self.conv, x)
        if self.bn is not None:
            h = self.bn(h, self.net.training)
            h = self._act(h, self.conv.frag)
        return h

    def layers(self):
        return [self.conv]

    def bn_layers(self):
        return [self.bn] if self.bn is not None else []


class BasicBlockUnit(Unit):
    """Post-activation residual block; the skip path carries the (possibly
    quantized) block input into the add."""

    def __init__(self, name, in_ch, out_ch, stride, rng):
        self.name = name
        self.in_ch, self.out_ch, self.stride = in_ch, out_ch, stride
        self.conv1 = Conv2d(f"{name}.conv1", in_ch, out_ch, 3, stride, 1, rng)
        self.bn1 = BatchNorm2d(f"{name}.bn1", out_ch)
        self.conv2 = Conv2d(f"{name}.conv2", out_ch, out_ch, 3, 1, 1, rng)
        self.bn2 = BatchNorm2d(f"{name}.bn2", out_ch)
        self.last_shortcut_from_quantizer = None

    def forward(self, x):
        h = self._conv(self.conv1, x)
        h = self.bn1(h, self.net.training)
        h = self._act(h, self.conv1.frag)
        h = self._conv(self.conv2, h)
        h = self.bn2(h, self.net.training)
        if self.stride != 1 or self.in_ch != self.out_ch:
            s = ops.downsample_pad(x, self.out_ch, self.stride)
        else:
            s = x
        self.last_shortcut_from_quantizer = bool(s.from_quantizer)
        y = h + s
        return self._act(y, self.conv2.frag)

    def layers(self):
        return [self.conv1, self.conv2]

    def bn_layers(self):
        return [self.bn1, self.bn2]


class PreactBlockUnit(Unit):
    """Pre-activation residual block; the identity path never meets a
    quantizer or nonlinearity."""

    def __init__(self, name, in_ch, out_ch, stride, rng):
        self.name = name
        self.in_ch, self.out_ch, self.stride = in_ch, out_ch, stride
        self.bn1 = BatchNorm2d(f"{name}.bn1", in_ch)
        self.conv1 = Conv2d(f"{name}.conv1", in_ch, out_ch, 3, stride, 1, rng)
        self.bn2 = BatchNorm2d(f"{name}.bn2", out_ch)
        self.conv2 = Conv2d(f"{name}.conv2", out_ch, out_ch, 3, 1, 1, rng)
        self.last_shortcut_from_quantizer = None

    def forward(self, x):
        h = self.bn1(x, self.net.training)
        h = self._act(h, self.conv1.frag)
        h = self._conv(self.conv1, h)
        h = self.bn2(h, self.net.training)
        h = self._act(h, self.conv2.frag)
        h = self._conv(self.conv2, h)
        if self.stride != 1 or self.in_ch != self.out_ch:
            s = ops.downsample_pad(x, self.out_ch, self.stride)
        else:
            s = x
        self.last_shortcut_from_quantizer = bool(s.from_quantizer)
        return h + s

    def layers(self):
        return [self.conv1, self.conv2]

    def bn_layers(self):
        return [self.bn1, self.bn2]


class PlainConvUnit(Unit):
    def __init__(self, name, in_ch, out_ch, stride, rng):
        self.name = name
        self.conv = Conv2d(f"{name}.conv", in_ch, out_ch, 3, stride, 1, rng)
        self.bn = BatchNorm2d(f"{name}.bn", out_ch)

    def forward(self, x):
        h = self._conv(self.conv, x)
        h = self.bn(h, self.net.training)
        return self._act(h, self.conv.frag)

    def layers(self):
        return [self.conv]

    def bn_layers(self):
        return [self.bn]


class HeadUnit(Unit):
    """Global average pooling plus the classifier; pre-activation nets get a
    final BN + activation first."""

    def __init__(self, name, in_ch, num_classes, rng, with_final_bn):
        self.name = name
        self.bn = BatchNorm2d(f"{name}.bn", in_ch) if with_final_bn else None
        self.fc = Linear(f"{name}.fc", in_ch, num_classes, rng)

    def forward(self, x):
        h = x
        if self.bn is not None:
            h = self.bn(h, self.net.training)
            h = T.clip01(h)
        h = ops.global_avg_pool(h)
        if self.net.quant_enabled:
            h = quant.quantize_activation(h, self.net.fragments[self.fc.frag].activation_bits)
        return self._fc(self.fc, h)

    def layers(self):
        return [self.fc]

    def bn_layers(self):
        return [self.bn] if self.bn is not None else []


# -- the model ------------------------------------------------------------------

class Model:
    def __init__(self, spec, units, fragments, frag_to_unit):
        self.spec = spec
        self.units = units
        self.fragments = fragments
        self._frag_to_unit = frag_to_unit
        self.training = True
        self.quant_enabled = True
        for u in units:
            u.net = self

    @property
    def fragment_count(self):
        return len(self.fragments)

    def excluded_indices(self):
        return [i for i, f in enumerate(self.fragments) if f.excluded]

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def forward(self, x, taps=()):
        """Run the chain; returns (logits, hint feature maps).

        Hints are the outputs of the structural unit holding each tapped
        fragment, exported post-quantizer so a teacher-side consumer can pass
        them through Q(.) before comparison.
        """
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.data.ndim != 4 or x.data.shape[1] != self.spec.in_channels:
            raise InputError(
                f"forward: batch shape {x.data.shape} does not match spec "
                f"(in_channels={self.spec.in_channels})")
        positions = [t.position if isinstance(t, HintTap) else int(t) for t in taps]
        for p in positions:
            if not 0 <= p < len(self.fragments):
                raise TapError(f"tap position {p} outside fragment range "
                               f"[0, {len(self.fragments)})")
        wanted_units = {self._frag_to_unit[p] for p in positions}
        unit_out = {}
        h = x
        for ui, unit in enumerate(self.units):
            h = unit.forward(h)
            if ui in wanted_units:
                unit_out[ui] = h
        hints = [unit_out[self._frag_to_unit[p]] for p in positions]
        return h, hints

    def run_unit(self, idx, x):
        """Run one structural unit in isolation (compositional test oracle)."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        return self.units[idx].forward(x)

    def named_parameters(self):
        out = {}
        for u in self.units:
            for layer in u.layers():
                out.update(layer.parameters())
            for bn in u.bn_layers():
                out.update(bn.parameters())
        return out

    def named_buffers(self):
        out = {}
        for u in self.units:
            for bn in u.bn_layers():
                out.update(bn.buffers())
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def block_units(self):
        return [u for u in self.units if isinstance(u, (BasicBlockUnit, PreactBlockUnit))]


def _assign_fragments(spec, units):
    """Build the fragment list and point every conv/linear at its fragment."""
    fragments = []
    frag_to_unit = []
    by_block = spec.fragment_granularity == "block"
    for ui, unit in enumerate(units):
        layers = unit.layers()
        if isinstance(unit, StemUnit):
            kinds = ["stem"]
        elif isinstance(unit, HeadUnit):
            kinds = ["classifier"]
        elif isinstance(unit, (BasicBlockUnit, PreactBlockUnit)):
            kinds = ["block" if by_block else "conv"] * len(layers)
        else:
            kinds = ["conv"] * len(layers)
        excluded = isinstance(unit, (StemUnit, HeadUnit)) and not spec.quantize_first_last
        if by_block:
            idx = len(fragments)
            fragments.append(Fragment(unit.name, kinds[0], excluded))
            frag_to_unit.append(ui)
            for layer in layers:
                layer.frag = idx
        else:
            for layer, kind in zip(layers, kinds):
                idx = len(fragments)
                fragments.append(Fragment(layer.name, kind, excluded))
                frag_to_unit.append(ui)
                layer.frag = idx
    return fragments, frag_to_unit


def build_model(spec, seed):
    """Deterministically initialize a model: He fan-in conv/linear weights,
    gamma=1 / beta=0 batch norms. Two builds with the same seed are
    bit-identical."""
    rng = np.random.default_rng(seed)
    arch = spec.architecture
    units = []
    w0 = spec.stage_widths[0]
    units.append(StemUnit("stem", spec.in_channels, w0, rng,
                          with_bn_act=arch != "preresnet_basic"))
    in_ch = w0
    for si, width in enumerate(spec.stage_widths):
        for bi in range(spec.blocks_per_stage):
            stride = 2 if si > 0 and bi == 0 else 1
            name = f"s{si + 1}b{bi}"
            if arch == "resnet_basic":
                units.append(BasicBlockUnit(name, in_ch, width, stride, rng))
            elif arch == "preresnet_basic":
                units.append(PreactBlockUnit(name, in_ch, width, stride, rng))
            else:
                units.append(PlainConvUnit(name, in_ch, width, stride, rng))
            in_ch = width
    units.append(HeadUnit("head", in_ch, spec.num_classes, rng,
                          with_final_bn=arch == "preresnet_basic"))
    fragments, frag_to_unit = _assign_fragments(spec, units)
    return Model(spec, units, fragments, frag_to_unit)


def apply_precision(model, mask):
    """Install per-fragment bit-widths; master weights are untouched."""
    if len(mask.entries) != len(model.fragments):
        raise MaskError(f"mask has {len(mask.entries)} entries for "
                        f"{len(model.fragments)} fragments")
    for i, ((wb, ab), frag) in enumerate(zip(mask.entries, model.fragments)):
        if wb not in quant.BIT_CHOICES or ab not in quant.BIT_CHOICES:
            raise MaskError(f"fragment {i}: bits ({wb}, {ab}) outside {quant.BIT_CHOICES}")
        if frag.excluded and (wb != 32 or ab != 32):
            raise ExclusionError(
                f"fragment {i} ({frag.name}) is pinned to full precision; "
                f"cannot set ({wb}, {ab})")
    for (wb, ab), frag in zip(mask.entries, model.fragments):
        frag.weight_bits = wb
        frag.activation_bits = ab


def uniform_mask(model, weight_bits, activation_bits):
    """All-fragment mask honoring the model's exclusions."""
    return PrecisionMask.uniform(model.fragment_count, weight_bits,
                                 activation_bits, model.excluded_indices())
