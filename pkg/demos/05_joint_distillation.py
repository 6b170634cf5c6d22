"""Joint knowledge distillation: a full-precision teacher and a low-precision
student trained side by side.

The student minimizes CE + beta * KL(p_low || p_full); the teacher (unless
frozen) minimizes CE + beta * KL(p_full || p_low) — note the asymmetry. In
hint mode the regularizer is instead half the squared distance between the
student's feature maps and the quantized teacher maps Q(mu(x)).

Run:  python demos/05_joint_distillation.py
"""

import numpy as np

from lowbit import (ModelSpec, Tensor, apply_precision, build_model, hint_loss,
                    kl_divergence, uniform_mask)
from lowbit import ops
from lowbit import strategies as S
from lowbit.data import AugmentPolicy, DataBundle, synthetic_dataset
from lowbit.harness import evaluate_model, stream_rng
from lowbit.optim import SGDMomentum

# --- the two KL directions differ --------------------------------------------
p = Tensor(np.array([[0.8, 0.15, 0.05]]))
q = Tensor(np.array([[0.4, 0.4, 0.2]]))
print(f"KL(p||q) = {float(kl_divergence(p, q).data):.4f}   "
      f"KL(q||p) = {float(kl_divergence(q, p).data):.4f}")

# --- the hint loss quantizes the teacher side ----------------------------------
t_feat = Tensor(np.array([[0.7, 0.2, 0.9]]))
s_feat = Tensor(np.array([[2 / 3, 1 / 3, 1.0]]))
print("hint loss at k=2:", float(hint_loss([t_feat], [s_feat], 2).data))

# --- a short joint run ----------------------------------------------------------
spec = ModelSpec(architecture="resnet_basic", stage_widths=(8, 16),
                 blocks_per_stage=1, num_classes=6, in_channels=3,
                 fragment_granularity="block")
train, test = synthetic_dataset(512, 256, num_classes=6, image_size=12,
                                channels=3, seed=3)
bundle = DataBundle(train, test, batch_size=64, augment_train=True,
                    policy=AugmentPolicy(pad=1))

teacher = build_model(spec, 7)
student = build_model(spec, 8)
apply_precision(student, uniform_mask(student, 2, 2))
t_opt = SGDMomentum(teacher.parameters(), lr=0.02, weight_decay=1e-4)
s_opt = SGDMomentum(student.parameters(), lr=0.1, weight_decay=1e-4)
cfg = S.StrategyConfig(strategy="kd_joint", weight_bits=2, activation_bits=2,
                       kd_mode="posterior", beta=0.5)


def after(stats):
    s1, _ = evaluate_model(student, bundle)
    t1, _ = evaluate_model(teacher, bundle)
    print(f"epoch {stats.epoch}: student loss {stats.train_loss:.3f} "
          f"(KL part {stats.distill_loss:.3f})  student {s1:.1f}%  teacher {t1:.1f}%")


S.run_kd_joint(teacher, student, bundle, t_opt, s_opt, 6, cfg,
               rng=stream_rng(2, 0), hooks=S.EpochHooks(after_epoch=after))
