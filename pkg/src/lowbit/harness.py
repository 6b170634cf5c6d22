"""Experiment orchestration: config files, metrics CSV, checkpoints, eval.

Config files are flat ``key = value`` lines with dotted namespaces; unknown
keys are hard errors so hyperparameter typos cannot silently run. Given a
config and a seed, every emitted metrics byte is reproducible (wall-clock
timing is opt-in via ``metrics.wall_clock`` precisely to keep that true).
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from . import strategies as S
from . import tensor as T
from .data import DataBundle, load_cifar10, load_idx, synthetic_dataset
from .errors import ConfigError
from .network import (ModelSpec, PrecisionMask, apply_precision, build_model,
                      uniform_mask)
from .optim import make_optimizer
from .tensor import Tensor

DATA_ROOT_ENV = "LOWBIT_DATA_ROOT"

METRIC_COLUMNS = ("epoch", "stage", "weight_bits", "activation_bits", "delta",
                  "train_loss", "distill_loss", "test_top1", "test_top5",
                  "wall_seconds", "network")


@dataclass
class MetricsRecord:
    epoch: int
    stage: int
    weight_bits: int
    activation_bits: int
    delta: float
    train_loss: float
    distill_loss: float
    test_top1: float
    test_top5: float
    wall_seconds: float
    network: str = "student"

    def row(self):
        return [str(self.epoch), str(self.stage), str(self.weight_bits),
                str(self.activation_bits), repr(float(self.delta)),
                repr(float(self.train_loss)), repr(float(self.distill_loss)),
                repr(float(self.test_top1)), repr(float(self.test_top5)),
                repr(float(self.wall_seconds)), self.network]


class MetricsWriter:
    """Crash-safe CSV appender: one open/write/flush/close per row."""

    def __init__(self, path, wall_clock=False):
        self.path = path
        self.wall_clock = wall_clock
        self._t0 = time.monotonic()
        with open(path, "w") as fh:
            fh.write(",".join(METRIC_COLUMNS) + "\n")

    def elapsed(self):
        return time.monotonic() - self._t0 if self.wall_clock else 0.0

    def write(self, record):
        with open(self.path, "a") as fh:
            fh.write(",".join(record.row()) + "\n")
            fh.flush()


# -- config -----------------------------------------------------------------------

def _parse_bool(v):
    s = v.strip().lower()
    if s in ("true", "1", "yes"):
        return True
    if s in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _parse_int_list(v):
    v = v.strip()
    if not v:
        return ()
    return tuple(int(x) for x in v.split(","))


CONFIG_SCHEMA = {
    "model.architecture": str,
    "model.stage_widths": _parse_int_list,
    "model.blocks_per_stage": int,
    "model.num_classes": int,
    "model.in_channels": int,
    "model.quantize_first_last": _parse_bool,
    "model.input_bits": int,
    "model.fragment_granularity": str,
    "strategy.name": str,
    "strategy.weight_bits": int,
    "strategy.activation_bits": int,
    "strategy.bit_sequence": _parse_int_list,
    "strategy.epochs_per_stage": int,
    "strategy.delta0": float,
    "strategy.mu": float,
    "strategy.quantized_from": float,
    "strategy.randomize_wa": _parse_bool,
    "strategy.kd_mode": str,
    "strategy.lambda": float,
    "strategy.beta": float,
    "strategy.taps": _parse_int_list,
    "strategy.teacher_lr": float,
    "strategy.teacher_init": str,
    "strategy.teacher_frozen": _parse_bool,
    "strategy.teacher_checkpoint": str,
    "optimizer.kind": str,
    "optimizer.lr": float,
    "optimizer.momentum": float,
    "optimizer.weight_decay": float,
    "optimizer.adam_beta1": float,
    "optimizer.adam_beta2": float,
    "optimizer.adam_eps": float,
    "data.dataset": str,
    "data.path": str,
    "data.augment": _parse_bool,
    "data.synthetic_train": int,
    "data.synthetic_test": int,
    "data.synthetic_seed": int,
    "data.synthetic_noise": float,
    "train.epochs": int,
    "train.batch_size": int,
    "train.seed": int,
    "train.lr_milestones": _parse_int_list,
    "train.lr_decay": float,
    "train.init_checkpoint": str,
    "metrics.wall_clock": _parse_bool,
    "output.dir": str,
}


def parse_config_text(text, source="<config>"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = CONFIG_SCHEMA[key](val)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {e}") from e
    return values


@dataclass
class ExperimentConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    strategy: S.StrategyConfig = field(default_factory=S.StrategyConfig)
    optimizer_kind: str = "sgd_momentum"
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    dataset: str = "synthetic"
    data_path: str = ""
    augment: bool = True
    synthetic_train: int = 2000
    synthetic_test: int = 1000
    synthetic_seed: int = 7
    synthetic_noise: float = 0.25
    epochs: int = 4
    batch_size: int = 64
    seed: int = 1
    lr_milestones: tuple = ()
    lr_decay: float = 10.0
    init_checkpoint: str = ""
    teacher_checkpoint: str = ""
    wall_clock: bool = False
    output_dir: str = "runs/exp"

    def validate(self):
        self.strategy.validate()
        if self.optimizer_kind not in ("sgd_momentum", "adam"):
            raise ConfigError(f"unknown optimizer kind {self.optimizer_kind!r}")
        if self.dataset not in ("synthetic", "cifar10", "mnist"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("train.epochs must be >= 0 and batch_size >= 1")
        for path, what in ((self.init_checkpoint, "train.init_checkpoint"),
                           (self.teacher_checkpoint, "strategy.teacher_checkpoint")):
            if path and not os.path.exists(path):
                raise ConfigError(f"{what} does not exist: {path}")
        if self.dataset in ("cifar10", "mnist") and not os.path.isdir(self.data_path):
            raise ConfigError(f"data.path does not exist: {self.data_path}")
        return self

    @staticmethod
    def from_file(path):
        with open(path) as fh:
            values = parse_config_text(fh.read(), source=path)
        return ExperimentConfig.from_values(values)

    @staticmethod
    def from_values(v):
        model = ModelSpec(
            architecture=v.get("model.architecture", "preresnet_basic"),
            stage_widths=v.get("model.stage_widths", (16, 32, 64)),
            blocks_per_stage=v.get("model.blocks_per_stage", 2),
            num_classes=v.get("model.num_classes", 10),
            in_channels=v.get("model.in_channels", 3),
            quantize_first_last=v.get("model.quantize_first_last", False),
            input_bits=v.get("model.input_bits", 0),
            fragment_granularity=v.get("model.fragment_granularity", "block"),
        )
        strat = S.StrategyConfig(
            strategy=v.get("strategy.name", "direct"),
            weight_bits=v.get("strategy.weight_bits", 2),
            activation_bits=v.get("strategy.activation_bits", 2),
            bit_sequence=v.get("strategy.bit_sequence", ()),
            epochs_per_stage=v.get("strategy.epochs_per_stage", 0),
            delta0=v.get("strategy.delta0", 1.0),
            mu=v.get("strategy.mu", 0.0),
            quantized_from=v.get("strategy.quantized_from", 0.8),
            randomize_wa=v.get("strategy.randomize_wa", True),
            kd_mode=v.get("strategy.kd_mode", "none"),
            lam=v.get("strategy.lambda", 0.1),
            beta=v.get("strategy.beta", 0.5),
            taps=v.get("strategy.taps", ()),
            teacher_lr=v.get("strategy.teacher_lr", 0.0),
            teacher_init=v.get("strategy.teacher_init", "pretrained"),
            teacher_frozen=v.get("strategy.teacher_frozen", False),
        )
        cfg = ExperimentConfig(
            model=model,
            strategy=strat,
            optimizer_kind=v.get("optimizer.kind", "sgd_momentum"),
            lr=v.get("optimizer.lr", 0.05),
            momentum=v.get("optimizer.momentum", 0.9),
            weight_decay=v.get("optimizer.weight_decay", 1e-4),
            adam_betas=(v.get("optimizer.adam_beta1", 0.9),
                        v.get("optimizer.adam_beta2", 0.999)),
            adam_eps=v.get("optimizer.adam_eps", 1e-8),
            dataset=v.get("data.dataset", "synthetic"),
            data_path=v.get("data.path", os.environ.get(DATA_ROOT_ENV, "")),
            augment=v.get("data.augment", True),
            synthetic_train=v.get("data.synthetic_train", 2000),
            synthetic_test=v.get("data.synthetic_test", 1000),
            synthetic_seed=v.get("data.synthetic_seed", 7),
            synthetic_noise=v.get("data.synthetic_noise", 0.25),
            epochs=v.get("train.epochs", 4),
            batch_size=v.get("train.batch_size", 64),
            seed=v.get("train.seed", 1),
            lr_milestones=v.get("train.lr_milestones", ()),
            lr_decay=v.get("train.lr_decay", 10.0),
            init_checkpoint=v.get("train.init_checkpoint", ""),
            teacher_checkpoint=v.get("strategy.teacher_checkpoint", ""),
            wall_clock=v.get("metrics.wall_clock", False),
            output_dir=v.get("output.dir", "runs/exp"),
        )
        return cfg.validate()


def stream_rng(seed, stream):
    """Independent deterministic generator for one named stream of a run."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(stream,)))


# -- evaluation ---------------------------------------------------------------------

def evaluate_model(model, bundle, split="test"):
    """Deterministic eval-mode pass; top-k ties break toward the lower class
    index. Returns (top1, top5) percentages."""
    was_training = model.training
    model.eval()
    hits1 = hits5 = total = 0
    with T.no_grad():
        for x, y in bundle.eval_batches(split):
            logits, _ = model.forward(Tensor(x))
            order = np.argsort(-logits.data, axis=1, kind="stable")
            hits1 += int((order[:, 0] == y).sum())
            hits5 += int((order[:, :5] == y[:, None]).any(axis=1).sum())
            total += len(y)
    if was_training:
        model.train()
    return 100.0 * hits1 / total, 100.0 * hits5 / total


def load_dataset_pair(cfg):
    if cfg.dataset == "synthetic":
        return synthetic_dataset(cfg.synthetic_train, cfg.synthetic_test,
                                 num_classes=cfg.model.num_classes,
                                 channels=cfg.model.in_channels,
                                 seed=cfg.synthetic_seed, noise=cfg.synthetic_noise)
    if cfg.dataset == "cifar10":
        return (load_cifar10(cfg.data_path, "train"),
                load_cifar10(cfg.data_path, "test"))
    train = load_idx(os.path.join(cfg.data_path, "train-images-idx3-ubyte"),
                     os.path.join(cfg.data_path, "train-labels-idx1-ubyte"), "train")
    test = load_idx(os.path.join(cfg.data_path, "t10k-images-idx3-ubyte"),
                    os.path.join(cfg.data_path, "t10k-labels-idx1-ubyte"), "test")
    return train, test


def make_bundle(cfg, train, test):
    return DataBundle(train, test, batch_size=cfg.batch_size,
                      augment_train=cfg.augment, input_bits=cfg.model.input_bits)


# -- experiment driver -----------------------------------------------------------------

@dataclass
class ExperimentResult:
    metrics_path: str
    final_checkpoint: str
    stage_checkpoints: list
    best_top1: float
    final_top1: float
    final_top5: float


def _initial_bits(strat):
    """Bits in force before the first training epoch (the epoch-0 row)."""
    if strat.strategy in ("progressive", "ts_pp", "ts_pp_kd"):
        b = strat.effective_bit_sequence()[0]
        return b, b
    if strat.strategy == "two_step":
        return strat.weight_bits, 32
    return strat.weight_bits, strat.activation_bits


def run_experiment(config, output_dir=None):
    """Execute the configured strategy end to end; returns artifact paths."""
    cfg = ExperimentConfig.from_file(config) if isinstance(config, (str, os.PathLike)) else config
    cfg.validate()
    out = output_dir or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    strat = cfg.strategy

    train, test = load_dataset_pair(cfg)
    bundle = make_bundle(cfg, train, test)
    data_rng = stream_rng(cfg.seed, 0)
    sp_rng = stream_rng(cfg.seed, 1)

    model = build_model(cfg.model, cfg.seed)
    if cfg.init_checkpoint:
        meta, entries = ckpt.load_checkpoint(cfg.init_checkpoint)
        ckpt.restore_model(model, entries)
    optimizer = make_optimizer(cfg.optimizer_kind, model.parameters(), cfg.lr,
                               momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                               adam_betas=cfg.adam_betas, adam_eps=cfg.adam_eps)

    teacher = teacher_opt = None
    kd_ctx = None
    if strat.strategy in ("kd_joint", "ts_pp_kd", "sp_kd") and strat.kd_mode != "none":
        teacher = build_model(cfg.model, cfg.seed + 1)
        if strat.teacher_init == "pretrained":
            if not cfg.teacher_checkpoint:
                raise ConfigError("teacher_init=pretrained requires strategy.teacher_checkpoint")
            tmeta, tentries = ckpt.load_checkpoint(cfg.teacher_checkpoint)
            ckpt.restore_model(teacher, tentries)
        if not strat.teacher_frozen:
            t_lr = strat.teacher_lr if strat.teacher_lr > 0 else cfg.lr / 5.0
            teacher_opt = make_optimizer(cfg.optimizer_kind, teacher.parameters(), t_lr,
                                         momentum=cfg.momentum,
                                         weight_decay=cfg.weight_decay,
                                         adam_betas=cfg.adam_betas, adam_eps=cfg.adam_eps)
        kd_ctx = S.KDContext(teacher=teacher, teacher_opt=teacher_opt, cfg=strat)

    writer = MetricsWriter(os.path.join(out, "metrics.csv"), wall_clock=cfg.wall_clock)
    stage_ckpts = []
    best = {"top1": 0.0}
    last = {"top1": 0.0, "top5": 0.0}

    def write_eval_rows(stats):
        top1, top5 = evaluate_model(model, bundle)
        best["top1"] = max(best["top1"], top1)
        last["top1"], last["top5"] = top1, top5
        writer.write(MetricsRecord(
            epoch=stats.epoch, stage=stats.stage,
            weight_bits=stats.weight_bits, activation_bits=stats.activation_bits,
            delta=stats.delta, train_loss=stats.train_loss,
            distill_loss=stats.distill_loss, test_top1=top1, test_top5=top5,
            wall_seconds=writer.elapsed(), network="student"))
        if teacher is not None:
            t1, t5 = evaluate_model(teacher, bundle)
            writer.write(MetricsRecord(
                epoch=stats.epoch, stage=stats.stage, weight_bits=32,
                activation_bits=32, delta=stats.delta,
                train_loss=stats.teacher_loss if stats.teacher_loss is not None else 0.0,
                distill_loss=stats.teacher_distill, test_top1=t1, test_top5=t5,
                wall_seconds=writer.elapsed(), network="teacher"))

    def before_epoch(epoch):
        if epoch in cfg.lr_milestones:
            optimizer.lr /= cfg.lr_decay
            if teacher_opt is not None:
                teacher_opt.lr /= cfg.lr_decay

    def after_stage(stage_idx, stage_name):
        if strat.strategy in ("two_step", "progressive", "ts_pp", "ts_pp_kd"):
            path = os.path.join(out, f"stage{stage_idx:02d}_{stage_name}.ckpt")
            _save(path)
            stage_ckpts.append(path)

    def _save(path, delta=0.0):
        opts = [optimizer] + ([teacher_opt] if teacher_opt is not None else [])
        final_bits = [model.fragments[i].weight_bits for i in range(model.fragment_count)]
        final_abits = [model.fragments[i].activation_bits for i in range(model.fragment_count)]
        ckpt.save_checkpoint(path, model, optimizers=opts,
                             rngs={"data": data_rng, "sp": sp_rng},
                             extra={"target_bits": [strat.weight_bits, strat.activation_bits],
                                    "mask_weight_bits": final_bits,
                                    "mask_activation_bits": final_abits,
                                    "delta": delta})

    hooks = S.EpochHooks(before_epoch=before_epoch, after_epoch=write_eval_rows,
                         after_stage=after_stage)

    # Epoch-0 row: evaluate the initialization under the opening mask.
    wb0, ab0 = _initial_bits(strat)
    apply_precision(model, uniform_mask(model, wb0, ab0))
    write_eval_rows(S.EpochStats(epoch=0, stage=0, stage_name="init",
                                 weight_bits=wb0, activation_bits=ab0,
                                 delta=strat.delta0 if strat.strategy in ("stochastic", "sp_kd") else 0.0,
                                 train_loss=0.0))

    bits = (strat.weight_bits, strat.activation_bits)
    counter = {"epoch": 0}
    eps = cfg.epochs
    per_stage = strat.epochs_per_stage
    if strat.strategy == "direct":
        S.train_direct(model, bundle, optimizer, eps, bits, rng=data_rng,
                       hooks=hooks, counter=counter)
    elif strat.strategy == "two_step":
        S.run_two_step(model, bundle, optimizer, strat.weight_bits,
                       per_stage or max(eps // 2, 1), rng=data_rng,
                       hooks=hooks, counter=counter)
    elif strat.strategy == "progressive":
        seq = strat.effective_bit_sequence()
        S.run_progressive(model, bundle, optimizer, seq,
                          per_stage or max(eps // len(seq), 1),
                          rng=data_rng, hooks=hooks, counter=counter)
    elif strat.strategy == "ts_pp":
        seq = strat.effective_bit_sequence()
        S.run_ts_pp(model, bundle, optimizer, seq,
                    per_stage or max(eps // (2 * len(seq) - 1), 1),
                    rng=data_rng, hooks=hooks, counter=counter)
    elif strat.strategy == "stochastic":
        S.run_stochastic(model, bundle, optimizer, eps, bits, rng=data_rng,
                         sp_rng=sp_rng, delta0=strat.delta0,
                         mu=strat.mu or None, quantized_from=strat.quantized_from,
                         randomize_wa=strat.randomize_wa, hooks=hooks,
                         counter=counter)
    elif strat.strategy == "kd_joint":
        S.run_kd_joint(teacher, model, bundle, teacher_opt, optimizer, eps,
                       strat, rng=data_rng, hooks=hooks, counter=counter)
    elif strat.strategy == "ts_pp_kd":
        seq = strat.effective_bit_sequence()
        S.run_ts_pp(model, bundle, optimizer, seq,
                    per_stage or max(eps // (2 * len(seq) - 1), 1),
                    rng=data_rng, hooks=hooks, counter=counter, kd=kd_ctx)
    elif strat.strategy == "sp_kd":
        S.run_stochastic(model, bundle, optimizer, eps, bits, rng=data_rng,
                         sp_rng=sp_rng, delta0=strat.delta0,
                         mu=strat.mu or None, quantized_from=strat.quantized_from,
                         randomize_wa=strat.randomize_wa, hooks=hooks,
                         counter=counter, kd=kd_ctx)

    final_path = os.path.join(out, "final.ckpt")
    _save(final_path)
    return ExperimentResult(metrics_path=writer.path, final_checkpoint=final_path,
                            stage_checkpoints=stage_ckpts, best_top1=best["top1"],
                            final_top1=last["top1"], final_top5=last["top5"])


def evaluate(checkpoint_path, bundle, bits_override=None):
    """Rebuild the architecture recorded in a checkpoint, restore it, apply
    the recorded (or overridden) precision, and score a dataset."""
    meta, entries = ckpt.load_checkpoint(checkpoint_path)
    spec = ModelSpec.from_dict(meta["model_spec"])
    model = build_model(spec, 0)
    ckpt.restore_model(model, entries)
    if bits_override is not None:
        apply_precision(model, uniform_mask(model, bits_override[0], bits_override[1]))
    else:
        entries_bits = list(zip(meta["mask_weight_bits"], meta["mask_activation_bits"]))
        apply_precision(model, PrecisionMask(entries_bits))
    return evaluate_model(model, bundle)
