"""Two-step and progressive-precision schedules on a toy net.

Direct 2-bit training fights the quantizer from step one; the relaxed
schedules first solve an easier problem (full-precision activations, or a
higher bit-width) and carry those weights down. Equal epoch budgets.

Run:  python demos/03_progressive_and_two_step.py   (~1 minute on one core)
"""

import numpy as np

from lowbit import ModelSpec, build_model
from lowbit import strategies as S
from lowbit.data import AugmentPolicy, DataBundle, synthetic_dataset
from lowbit.harness import evaluate_model, stream_rng
from lowbit.optim import SGDMomentum

SPEC = ModelSpec(architecture="resnet_basic", stage_widths=(8, 16),
                 blocks_per_stage=1, num_classes=6, in_channels=3,
                 fragment_granularity="block")
EPOCHS = 6

train, test = synthetic_dataset(512, 256, num_classes=6, image_size=12,
                                channels=3, seed=3)
bundle = DataBundle(train, test, batch_size=64, augment_train=True,
                    policy=AugmentPolicy(pad=1))


def best_of(strategy):
    model = build_model(SPEC, 1)
    opt = SGDMomentum(model.parameters(), lr=0.1, weight_decay=1e-4)
    best = [0.0]

    def after(stats):
        top1, _ = evaluate_model(model, bundle)
        best[0] = max(best[0], top1)
        print(f"  epoch {stats.epoch} [{stats.stage_name:10s} "
              f"w{stats.weight_bits:>2} a{stats.activation_bits:>2}] "
              f"loss {stats.train_loss:.3f}  top1 {top1:.1f}%")

    hooks = S.EpochHooks(after_epoch=after)
    rng = stream_rng(1, 0)
    if strategy == "direct":
        S.train_direct(model, bundle, opt, EPOCHS, (2, 2), rng=rng, hooks=hooks)
    elif strategy == "two_step":
        S.run_two_step(model, bundle, opt, 2, EPOCHS // 2, rng=rng, hooks=hooks)
    elif strategy == "progressive":
        S.run_progressive(model, bundle, opt, (32, 4, 2), EPOCHS // 3,
                          rng=rng, hooks=hooks)
    return best[0]


scores = {}
for name in ("direct", "two_step", "progressive"):
    print(f"--- {name}")
    scores[name] = best_of(name)

print()
for name, score in scores.items():
    print(f"{name:12s} best top-1 {score:.1f}%")
