"""Stochastic precision: random per-fragment quantization with a decaying
keep-full-precision ratio delta.

Each step samples an N x 2 indicator matrix B (column 0: quantize weights,
column 1: quantize activations) with ones appearing with probability
(1 - delta). That splits the fragments into G_qwa / G_qw / G_qa / G_r.
delta decays linearly to 0, so the net is fully quantized from a configured
fraction of training onward.

Run:  python demos/04_stochastic_precision.py
"""

import numpy as np

from lowbit import ModelSpec, PrecisionMask, build_model, sample_indicator
from lowbit import strategies as S
from lowbit.data import AugmentPolicy, DataBundle, synthetic_dataset
from lowbit.harness import evaluate_model, stream_rng
from lowbit.optim import Adam

# --- the indicator matrix and the induced partition ----------------------------
rng = np.random.default_rng(0)
b = sample_indicator(6, delta=0.5, randomize_wa=True, rng=rng, excluded=(0, 5))
print("B =")
print(b)
mask = PrecisionMask.from_indicator(b, 2, 2, excluded=(0, 5))
for name, members in mask.subsets().items():
    print(f"  {name}: {members}")
print("mask entries:", mask.entries)

# --- a short SP run -------------------------------------------------------------
spec = ModelSpec(architecture="resnet_basic", stage_widths=(8, 16),
                 blocks_per_stage=1, num_classes=6, in_channels=3,
                 fragment_granularity="block")
train, test = synthetic_dataset(512, 256, num_classes=6, image_size=12,
                                channels=3, seed=3)
bundle = DataBundle(train, test, batch_size=64, augment_train=True,
                    policy=AugmentPolicy(pad=1))

model = build_model(spec, 1)
opt = Adam(model.parameters(), lr=2e-3)


def after(stats):
    top1, _ = evaluate_model(model, bundle)
    print(f"epoch {stats.epoch}: delta {stats.delta:.3f}  "
          f"loss {stats.train_loss:.3f}  top1 {top1:.1f}%")


_, trace = S.run_stochastic(model, bundle, opt, 6, (2, 2),
                            rng=stream_rng(1, 0), sp_rng=stream_rng(1, 1),
                            delta0=1.0, quantized_from=0.8,
                            hooks=S.EpochHooks(after_epoch=after))
steps = len(trace)
zero_from = next(i for i, d in enumerate(trace) if d == 0.0)
print(f"delta hit 0 at step {zero_from + 1}/{steps} "
      f"(fully quantized for the last {100 * (1 - zero_from / steps):.0f}% of training)")
