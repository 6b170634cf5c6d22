"""lowbit: training CNNs with low-bitwidth weights and activations.

Relaxed-optimization training schedules (two-step, progressive precision,
stochastic precision, joint knowledge distillation) over a deterministic
numpy autograd core with DoReFa-style uniform fake quantizers.
"""

from . import errors
from .data import DataBundle, Dataset, augment, load_cifar10, load_idx, synthetic_dataset
from .harness import ExperimentConfig, evaluate, evaluate_model, run_experiment
from .network import (HintTap, ModelSpec, PrecisionMask, apply_precision,
                      build_model, uniform_mask)
from .optim import Adam, SGDMomentum, make_optimizer
from .quant import (QuantSpec, quantize_activation, quantize_unit,
                    quantize_weight, ste_backward)
from .strategies import (StrategyConfig, hint_loss, kd_joint_step,
                         kl_divergence, run_kd_joint, run_progressive,
                         run_stochastic, run_two_step, sample_indicator,
                         sp_train_step, train_direct)
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"
