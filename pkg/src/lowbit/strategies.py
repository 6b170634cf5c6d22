"""Training strategies: two-step, progressive precision, stochastic precision,
and joint full-precision/low-precision knowledge distillation.

All strategies update latent full-precision master weights through the
quantizer STEs. Stage handoffs continue on the same master weights, so the
parameters crossing a stage boundary are bit-identical by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops, quant
from . import tensor as T
from .errors import (DistributionError, HintError, InputError, PairingError,
                     ScheduleError)
from .network import PrecisionMask, apply_precision, uniform_mask
from .tensor import Tensor, _result, accumulate_grad

STRATEGIES = ("direct", "two_step", "progressive", "stochastic", "kd_joint",
              "ts_pp", "ts_pp_kd", "sp_kd")
KD_MODES = ("none", "hint", "posterior")


@dataclass
class StrategyConfig:
    strategy: str = "direct"
    weight_bits: int = 2
    activation_bits: int = 2
    bit_sequence: tuple = ()      # progressive schedules; () -> default
    epochs_per_stage: int = 0     # 0 -> split the epoch budget evenly
    delta0: float = 1.0
    mu: float = 0.0               # 0 -> derived from quantized_from
    quantized_from: float = 0.8   # fraction of steps after which delta == 0
    randomize_wa: bool = True     # B has two independent columns
    kd_mode: str = "none"
    lam: float = 0.1              # hint-loss weight
    beta: float = 0.5             # KL weight
    taps: tuple = ()              # hint tap fragment indices
    teacher_lr: float = 0.0       # 0 -> student lr / 5
    teacher_init: str = "pretrained"
    teacher_frozen: bool = False

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ScheduleError(f"unknown strategy {self.strategy!r}")
        if self.kd_mode not in KD_MODES:
            raise ScheduleError(f"unknown kd_mode {self.kd_mode!r}")
        for b in (self.weight_bits, self.activation_bits):
            if b not in quant.BIT_CHOICES:
                raise ScheduleError(f"target bits must be in {quant.BIT_CHOICES}, got {b}")
        if self.bit_sequence:
            validate_bit_sequence(self.bit_sequence)
        if not 0.0 <= self.delta0 <= 1.0:
            raise ScheduleError(f"delta0 must lie in [0, 1], got {self.delta0}")
        if not 0.0 < self.quantized_from <= 1.0:
            raise ScheduleError("quantized_from must lie in (0, 1]")
        if self.teacher_init not in ("pretrained", "scratch"):
            raise ScheduleError(f"unknown teacher_init {self.teacher_init!r}")
        if self.strategy in ("kd_joint", "ts_pp_kd", "sp_kd") and self.kd_mode == "none":
            raise ScheduleError(f"strategy {self.strategy} requires kd_mode hint or posterior")
        return self

    def effective_bit_sequence(self):
        """Configured sequence, or the 32 -> 8 -> 4 -> target default."""
        if self.bit_sequence:
            return tuple(self.bit_sequence)
        target = self.weight_bits
        seq = [b for b in (32, 8, 4) if b > target] + [target]
        return tuple(seq)


def validate_bit_sequence(seq):
    seq = tuple(int(b) for b in seq)
    if not seq:
        raise ScheduleError("empty bit sequence")
    for b in seq:
        if b not in quant.BIT_CHOICES:
            raise ScheduleError(f"bit sequence entry {b} not in {quant.BIT_CHOICES}")
    if any(b2 >= b1 for b1, b2 in zip(seq, seq[1:])):
        raise ScheduleError(f"bit sequence must be strictly decreasing, got {seq}")
    return seq


# -- stochastic precision primitives ------------------------------------------

def sample_indicator(n, delta, randomize_wa, rng, excluded=()):
    """Binary indicator matrix B (n x 2); entries are 1 with probability
    (1 - delta). Column 0 selects weight quantization, column 1 activations;
    with randomize_wa off the columns are identical. Excluded fragments are
    forced to (0, 0)."""
    if not 0.0 <= delta <= 1.0:
        raise InputError(f"delta must lie in [0, 1], got {delta}")
    if randomize_wa:
        b = (rng.random((n, 2)) < (1.0 - delta)).astype(np.int64)
    else:
        col = (rng.random((n, 1)) < (1.0 - delta)).astype(np.int64)
        b = np.repeat(col, 2, axis=1)
    for i in excluded:
        b[i] = 0
    return b


def sp_train_step(model, x, y, bits, delta_t, mu, rng, optimizer,
                  randomize_wa=True):
    """One stochastic-precision step: sample B, apply the induced mask, run a
    supervised update on the master weights, decay delta.

    With delta_t <= 0 no sampling happens at all: the mask is fully quantized
    at the target bits.
    """
    excluded = model.excluded_indices()
    if delta_t > 0.0:
        b = sample_indicator(model.fragment_count, delta_t, randomize_wa, rng,
                             excluded=excluded)
        mask = PrecisionMask.from_indicator(b, bits[0], bits[1], excluded=excluded)
    else:
        mask = PrecisionMask.uniform(model.fragment_count, bits[0], bits[1],
                                     excluded=excluded)
    apply_precision(model, mask)
    loss = supervised_step(model, x, y, optimizer)
    return loss, max(delta_t - mu, 0.0)


def supervised_step(model, x, y, optimizer):
    """Forward, cross-entropy, backward, optimizer step; returns the loss."""
    logits, _ = model.forward(Tensor(x))
    loss = ops.softmax_cross_entropy(logits, y)
    model.zero_grad()
    T.backward(loss)
    optimizer.step()
    return float(loss.data)


# -- distillation losses --------------------------------------------------------

def hint_loss(teacher_feats, student_feats, k):
    """Guidance loss between paired feature maps.

    The teacher maps pass through the activation quantizer at the student's
    bit-width k (with its straight-through backward, so a live teacher
    receives hint gradients); then half the squared Euclidean distance,
    summed over taps, averaged over the batch.
    """
    if len(teacher_feats) != len(student_feats) or not teacher_feats:
        raise HintError(f"need equal nonempty tap lists, got "
                        f"{len(teacher_feats)} and {len(student_feats)}")
    total = None
    batch = teacher_feats[0].data.shape[0]
    for tf, sf in zip(teacher_feats, student_feats):
        if tf.data.shape != sf.data.shape:
            raise HintError(f"hint shape mismatch: {tf.data.shape} vs {sf.data.shape}")
        if tf.data.ndim < 2:
            raise HintError("hint feature maps must be batch-major (ndim >= 2)")
        d = quant.quantize_activation(tf, k) - sf
        term = T.total_sum(d * d)
        total = term if total is None else total + term
    return T.scale(total, 0.5 / batch)


def kl_divergence(p, q, floor=1e-12, tol=1e-5):
    """Mean over the batch of sum_c p log(p / q), q floored for stability."""
    if p.data.shape != q.data.shape or p.data.ndim != 2:
        raise DistributionError(
            f"need matching 2-d probability batches, got {p.data.shape} and {q.data.shape}")
    for name, t in (("p", p), ("q", q)):
        if t.data.min() < 0.0:
            raise DistributionError(f"{name} has negative entries")
        sums = t.data.sum(axis=1)
        if np.abs(sums - 1.0).max() > tol:
            raise DistributionError(f"{name} rows do not sum to 1 within {tol}")
    pt = np.maximum(p.data, floor)
    qt = np.maximum(q.data, floor)
    logdiff = np.log(pt) - np.log(qt)
    n = p.data.shape[0]
    val = np.asarray((p.data * logdiff).sum() / n, dtype=p.data.dtype)

    def backward_fn(g):
        if p.requires_grad:
            accumulate_grad(p, (logdiff + (p.data > floor)) * (g / n))
        if q.requires_grad:
            accumulate_grad(q, -(p.data / qt) * (q.data > floor) * (g / n))

    return _result(val, (p, q), backward_fn)


# -- joint knowledge distillation -------------------------------------------------

@dataclass
class KDStepResult:
    teacher_loss: float | None
    student_loss: float
    teacher_ce: float | None
    student_ce: float
    teacher_distill: float
    student_distill: float


def kd_joint_step(teacher, student, x, y, cfg, teacher_opt, student_opt):
    """One joint step of Algorithm-style guided training.

    The student minimizes L2 = CE + lambda*R (hint) or CE + beta*KL(p_low|p_full)
    and the teacher, unless frozen, minimizes L1 = CE + lambda*R or
    CE + beta*KL(p_full|p_low). Each backward treats the other network's
    outputs as constants; the student side runs through the STEs, the teacher
    side is conventional backprop.
    """
    xt = x if isinstance(x, Tensor) else Tensor(x)
    taps = tuple(cfg.taps) if cfg.kd_mode == "hint" else ()
    student.train()
    if cfg.teacher_frozen:
        teacher.eval()
    else:
        teacher.train()
    t_logits, t_feats = teacher.forward(xt, taps)
    s_logits, s_feats = student.forward(xt, taps)
    if cfg.kd_mode == "posterior" and t_logits.data.shape[1] != s_logits.data.shape[1]:
        raise PairingError(
            f"posterior distillation needs matching class counts, got "
            f"{t_logits.data.shape[1]} and {s_logits.data.shape[1]}")
    k = cfg.activation_bits

    # Student update: the teacher's tensors enter as detached constants.
    ce_s = ops.softmax_cross_entropy(s_logits, y)
    s_distill = 0.0
    if cfg.kd_mode == "posterior" and cfg.beta != 0.0:
        d = kl_divergence(ops.softmax(s_logits), ops.softmax(t_logits).detach())
        loss_s = ce_s + T.scale(d, cfg.beta)
        s_distill = float(d.data)
    elif cfg.kd_mode == "hint" and cfg.lam != 0.0:
        d = hint_loss([f.detach() for f in t_feats], s_feats, k)
        loss_s = ce_s + T.scale(d, cfg.lam)
        s_distill = float(d.data)
    else:
        loss_s = ce_s
    student.zero_grad()
    T.backward(loss_s)
    student_opt.step()

    if cfg.teacher_frozen:
        return KDStepResult(None, float(loss_s.data), None, float(ce_s.data),
                            0.0, s_distill)

    # Teacher update, mirrored: student tensors detached.
    ce_t = ops.softmax_cross_entropy(t_logits, y)
    t_distill = 0.0
    if cfg.kd_mode == "posterior" and cfg.beta != 0.0:
        d = kl_divergence(ops.softmax(t_logits), ops.softmax(s_logits).detach())
        loss_t = ce_t + T.scale(d, cfg.beta)
        t_distill = float(d.data)
    elif cfg.kd_mode == "hint" and cfg.lam != 0.0:
        d = hint_loss(t_feats, [f.detach() for f in s_feats], k)
        loss_t = ce_t + T.scale(d, cfg.lam)
        t_distill = float(d.data)
    else:
        loss_t = ce_t
    teacher.zero_grad()
    T.backward(loss_t)
    teacher_opt.step()
    return KDStepResult(float(loss_t.data), float(loss_s.data),
                        float(ce_t.data), float(ce_s.data),
                        t_distill, s_distill)


# -- stage engine -----------------------------------------------------------------

@dataclass
class EpochHooks:
    before_epoch: object = None   # fn(global_epoch)
    after_epoch: object = None    # fn(EpochStats)
    after_stage: object = None    # fn(stage_idx, stage_name)


@dataclass
class EpochStats:
    epoch: int
    stage: int
    stage_name: str
    weight_bits: int
    activation_bits: int
    delta: float
    train_loss: float
    distill_loss: float = 0.0
    teacher_loss: float | None = None
    teacher_distill: float = 0.0


@dataclass
class SPState:
    bits: tuple
    delta: float
    mu: float
    randomize_wa: bool
    rng: np.random.Generator
    trace: list = field(default_factory=list)   # delta used at each step


@dataclass
class KDContext:
    teacher: object
    teacher_opt: object
    cfg: StrategyConfig


def _run_stage(model, bundle, optimizer, epochs, *, stage_idx, stage_name,
               weight_bits, activation_bits, rng, hooks, counter,
               sp=None, kd=None):
    if sp is None:
        apply_precision(model, uniform_mask(model, weight_bits, activation_bits))
    for _ in range(epochs):
        counter["epoch"] += 1
        if hooks and hooks.before_epoch:
            hooks.before_epoch(counter["epoch"])
        model.train()
        losses, distills, t_losses, t_distills = [], [], [], []
        for x, y in bundle.train_batches(rng):
            if sp is not None:
                sp.trace.append(sp.delta)
                if kd is not None:
                    b_delta = sp.delta
                    _apply_sp_mask(model, sp)
                    sp.delta = max(b_delta - sp.mu, 0.0)
                    res = kd_joint_step(kd.teacher, model, x, y, kd.cfg,
                                        kd.teacher_opt, optimizer)
                    losses.append(res.student_loss)
                    distills.append(res.student_distill)
                    if res.teacher_loss is not None:
                        t_losses.append(res.teacher_loss)
                        t_distills.append(res.teacher_distill)
                else:
                    loss, sp.delta = sp_train_step(
                        model, x, y, sp.bits, sp.delta, sp.mu, sp.rng,
                        optimizer, randomize_wa=sp.randomize_wa)
                    losses.append(loss)
            elif kd is not None:
                res = kd_joint_step(kd.teacher, model, x, y, kd.cfg,
                                    kd.teacher_opt, optimizer)
                losses.append(res.student_loss)
                distills.append(res.student_distill)
                if res.teacher_loss is not None:
                    t_losses.append(res.teacher_loss)
                    t_distills.append(res.teacher_distill)
            else:
                losses.append(supervised_step(model, x, y, optimizer))
        stats = EpochStats(
            epoch=counter["epoch"], stage=stage_idx, stage_name=stage_name,
            weight_bits=weight_bits, activation_bits=activation_bits,
            delta=sp.delta if sp is not None else 0.0,
            train_loss=float(np.mean(losses)) if losses else 0.0,
            distill_loss=float(np.mean(distills)) if distills else 0.0,
            teacher_loss=float(np.mean(t_losses)) if t_losses else None,
            teacher_distill=float(np.mean(t_distills)) if t_distills else 0.0,
        )
        if hooks and hooks.after_epoch:
            hooks.after_epoch(stats)
    if hooks and hooks.after_stage:
        hooks.after_stage(stage_idx, stage_name)


def _apply_sp_mask(model, sp):
    excluded = model.excluded_indices()
    if sp.delta > 0.0:
        b = sample_indicator(model.fragment_count, sp.delta, sp.randomize_wa,
                             sp.rng, excluded=excluded)
        mask = PrecisionMask.from_indicator(b, sp.bits[0], sp.bits[1],
                                            excluded=excluded)
    else:
        mask = PrecisionMask.uniform(model.fragment_count, sp.bits[0],
                                     sp.bits[1], excluded=excluded)
    apply_precision(model, mask)


# -- strategy drivers ---------------------------------------------------------------

def train_direct(model, bundle, optimizer, epochs, bits, *, rng, hooks=None,
                 counter=None, kd=None, stage_idx=1, stage_name="direct"):
    counter = counter if counter is not None else {"epoch": 0}
    _run_stage(model, bundle, optimizer, epochs, stage_idx=stage_idx,
               stage_name=stage_name, weight_bits=bits[0], activation_bits=bits[1],
               rng=rng, hooks=hooks, counter=counter, kd=kd)
    return model


def run_two_step(model, bundle, optimizer, k, epochs, *, K=32, rng, hooks=None,
                 counter=None, kd=None, stage_offset=0):
    """Stage 1 trains (weights=k, activations=K); stage 2 continues from the
    stage-1 master weights at (k, k). k == K degenerates to direct training."""
    if k > K:
        raise ScheduleError(f"two-step needs k <= K, got k={k}, K={K}")
    counter = counter if counter is not None else {"epoch": 0}
    if k == K:
        _run_stage(model, bundle, optimizer, epochs, stage_idx=stage_offset + 1,
                   stage_name=f"direct_w{k}a{k}", weight_bits=k, activation_bits=k,
                   rng=rng, hooks=hooks, counter=counter, kd=kd)
        return model
    _run_stage(model, bundle, optimizer, epochs, stage_idx=stage_offset + 1,
               stage_name=f"ts_w{k}a{K}", weight_bits=k, activation_bits=K,
               rng=rng, hooks=hooks, counter=counter, kd=kd)
    _run_stage(model, bundle, optimizer, epochs, stage_idx=stage_offset + 2,
               stage_name=f"ts_w{k}a{k}", weight_bits=k, activation_bits=k,
               rng=rng, hooks=hooks, counter=counter, kd=kd)
    return model


def run_progressive(model, bundle, optimizer, bit_sequence, epochs_per_stage, *,
                    rng, hooks=None, counter=None, kd=None):
    """Anneal the precision through a strictly decreasing bit sequence; each
    stage starts bit-exactly from the previous stage's master weights."""
    seq = validate_bit_sequence(bit_sequence)
    counter = counter if counter is not None else {"epoch": 0}
    for i, b in enumerate(seq):
        _run_stage(model, bundle, optimizer, epochs_per_stage, stage_idx=i + 1,
                   stage_name=f"pp_b{b}", weight_bits=b, activation_bits=b,
                   rng=rng, hooks=hooks, counter=counter, kd=kd)
    return model


def run_ts_pp(model, bundle, optimizer, bit_sequence, epochs_per_stage, *,
              rng, hooks=None, counter=None, kd=None):
    """Progressive precision with each drop internally two-step: weights go to
    the new bit-width first (activations held at the previous width), then
    activations follow."""
    seq = validate_bit_sequence(bit_sequence)
    counter = counter if counter is not None else {"epoch": 0}
    stage = 0
    prev = seq[0]
    stage += 1
    _run_stage(model, bundle, optimizer, epochs_per_stage, stage_idx=stage,
               stage_name=f"pp_b{prev}", weight_bits=prev, activation_bits=prev,
               rng=rng, hooks=hooks, counter=counter, kd=kd)
    for b in seq[1:]:
        stage += 1
        _run_stage(model, bundle, optimizer, epochs_per_stage, stage_idx=stage,
                   stage_name=f"ts_w{b}a{prev}", weight_bits=b, activation_bits=prev,
                   rng=rng, hooks=hooks, counter=counter, kd=kd)
        stage += 1
        _run_stage(model, bundle, optimizer, epochs_per_stage, stage_idx=stage,
                   stage_name=f"ts_w{b}a{b}", weight_bits=b, activation_bits=b,
                   rng=rng, hooks=hooks, counter=counter, kd=kd)
        prev = b
    return model


def derive_mu(delta0, total_steps, quantized_from):
    """Per-step decay that reaches delta = 0 at the configured fraction of
    training, guaranteeing a fully quantized network from then on."""
    if total_steps < 1:
        raise ScheduleError("stochastic precision needs at least one step")
    return delta0 / max(quantized_from * total_steps, 1.0)


def run_stochastic(model, bundle, optimizer, epochs, bits, *, rng, sp_rng,
                   delta0=1.0, mu=None, quantized_from=0.8, randomize_wa=True,
                   hooks=None, counter=None, kd=None):
    """Single-stage stochastic-precision training (returns the delta trace)."""
    total_steps = epochs * bundle.steps_per_epoch
    if mu is None or mu == 0.0:
        mu = derive_mu(delta0, total_steps, quantized_from)
    if delta0 - mu * total_steps > 1e-9:
        raise ScheduleError("mu too small: delta would not reach 0 by the last step")
    sp = SPState(bits=tuple(bits), delta=delta0, mu=mu,
                 randomize_wa=randomize_wa, rng=sp_rng)
    counter = counter if counter is not None else {"epoch": 0}
    _run_stage(model, bundle, optimizer, epochs, stage_idx=1, stage_name="sp",
               weight_bits=bits[0], activation_bits=bits[1], rng=rng,
               hooks=hooks, counter=counter, sp=sp, kd=kd)
    return model, sp.trace


def run_kd_joint(teacher, student, bundle, teacher_opt, student_opt, epochs,
                 cfg, *, rng, hooks=None, counter=None):
    """Guided training of the student alongside a (possibly frozen) teacher."""
    kd = KDContext(teacher=teacher, teacher_opt=teacher_opt, cfg=cfg)
    counter = counter if counter is not None else {"epoch": 0}
    _run_stage(student, bundle, student_opt, epochs, stage_idx=1,
               stage_name=f"kd_{cfg.kd_mode}",
               weight_bits=cfg.weight_bits, activation_bits=cfg.activation_bits,
               rng=rng, hooks=hooks, counter=counter, kd=kd)
    return student
