import numpy as np
import pytest

from lowbit import quant
from lowbit import tensor as T
from lowbit.errors import (ExclusionError, InputError, MaskError, SpecError,
                           TapError)
from lowbit.network import (HintTap, ModelSpec, PrecisionMask, apply_precision,
                            build_model, uniform_mask)
from lowbit.ops import softmax_cross_entropy
from lowbit.tensor import Tensor, backward


def toy_spec(**kw):
    base = dict(architecture="plain_cnn", stage_widths=(4, 8), blocks_per_stage=1,
                num_classes=4, in_channels=3, fragment_granularity="layer")
    base.update(kw)
    return ModelSpec(**base)


class TestSpecAndCounting:
    def test_preresnet_block_granularity_count(self):
        spec = ModelSpec(architecture="preresnet_basic", stage_widths=(4, 8, 16),
                         blocks_per_stage=1, fragment_granularity="block")
        model = build_model(spec, 0)
        # 3 blocks + first conv + classifier
        assert model.fragment_count == 5

    def test_preresnet_layer_granularity_count(self):
        spec = ModelSpec(architecture="preresnet_basic", stage_widths=(4, 8, 16),
                         blocks_per_stage=1, fragment_granularity="layer")
        model = build_model(spec, 0)
        # every quantizable conv/linear layer: stem + 3 blocks x 2 convs + fc
        assert model.fragment_count == 8

    def test_resnet_counts(self):
        spec = ModelSpec(architecture="resnet_basic", stage_widths=(4, 8),
                         blocks_per_stage=2, fragment_granularity="block")
        assert build_model(spec, 0).fragment_count == 1 + 4 + 1
        spec_l = ModelSpec(architecture="resnet_basic", stage_widths=(4, 8),
                           blocks_per_stage=2, fragment_granularity="layer")
        assert build_model(spec_l, 0).fragment_count == 1 + 8 + 1

    def test_exclusions_cover_first_and_last(self):
        model = build_model(toy_spec(), 0)
        ex = model.excluded_indices()
        assert 0 in ex and model.fragment_count - 1 in ex
        star = build_model(toy_spec(quantize_first_last=True, input_bits=8), 0)
        assert star.excluded_indices() == []

    def test_same_seed_builds_bit_identical(self):
        a = build_model(toy_spec(), 42)
        b = build_model(toy_spec(), 42)
        for (na, pa), (nb, pb) in zip(a.named_parameters().items(),
                                      b.named_parameters().items()):
            assert na == nb
            assert np.array_equal(pa.data, pb.data)

    def test_invalid_specs(self):
        with pytest.raises(SpecError):
            ModelSpec(architecture="vgg")
        with pytest.raises(SpecError):
            ModelSpec(stage_widths=())
        with pytest.raises(SpecError):
            ModelSpec(input_bits=8)  # needs quantize_first_last
        with pytest.raises(SpecError):
            ModelSpec(fragment_granularity="channel")


class TestApplyPrecision:
    def test_mask_bypass_matches_quantizer_free_model(self, rng):
        spec = toy_spec()
        a = build_model(spec, 7)
        b = build_model(spec, 7)
        apply_precision(a, uniform_mask(a, 32, 32))
        b.quant_enabled = False
        x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
        y = rng.integers(0, 4, size=2)
        for m in (a, b):
            m.train()
        la, _ = a.forward(Tensor(x))
        lb, _ = b.forward(Tensor(x))
        assert np.array_equal(la.data, lb.data)
        for (model, logits) in ((a, la), (b, lb)):
            model.zero_grad()
            backward(softmax_cross_entropy(logits, y))
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert np.array_equal(pa.grad, pb.grad)

    def test_uniform_two_bit_respects_exclusions(self):
        model = build_model(toy_spec(), 0)
        apply_precision(model, uniform_mask(model, 2, 2))
        bits = [(f.weight_bits, f.activation_bits) for f in model.fragments]
        assert bits[0] == (32, 32) and bits[-1] == (32, 32)
        assert all(b == (2, 2) for b in bits[1:-1])

    def test_exclusion_violation_raises(self):
        model = build_model(toy_spec(), 0)
        full = [(2, 2)] * model.fragment_count
        with pytest.raises(ExclusionError):
            apply_precision(model, PrecisionMask(full))

    def test_length_mismatch(self):
        model = build_model(toy_spec(), 0)
        with pytest.raises(MaskError):
            apply_precision(model, PrecisionMask([(32, 32)] * 2))

    def test_bad_bits_rejected(self):
        model = build_model(toy_spec(quantize_first_last=True, input_bits=8), 0)
        mask = uniform_mask(model, 2, 2)
        mask.entries[1] = (5, 2)
        with pytest.raises(MaskError):
            apply_precision(model, mask)

    def test_mixed_mask_compositional_oracle(self, rng):
        """Each fragment behaves exactly like the same fragment in a net
        uniformly at that fragment's precision."""
        spec = toy_spec(quantize_first_last=True, input_bits=8)
        model = build_model(spec, 3)
        assert model.fragment_count == 4
        mixed = [(2, 32), (32, 2), (2, 2), (32, 32)]
        apply_precision(model, PrecisionMask(mixed))
        refs = []
        for wb, ab in mixed:
            ref = build_model(spec, 3)
            apply_precision(ref, uniform_mask(ref, wb, ab))
            ref.eval()
            refs.append(ref)
        model.eval()
        x = rng.random(size=(2, 3, 8, 8)).astype(np.float32)
        with T.no_grad():
            h_mixed = Tensor(x)
            h_ref = Tensor(x)
            for i in range(4):
                h_mixed = model.run_unit(i, h_mixed)
                h_ref = refs[i].run_unit(i, h_ref)
                assert np.array_equal(h_mixed.data, h_ref.data), f"fragment {i}"


class TestForward:
    def test_zero_input_finite_logits(self):
        for arch in ("plain_cnn", "resnet_basic", "preresnet_basic"):
            model = build_model(toy_spec(architecture=arch,
                                         fragment_granularity="block"), 0)
            logits, _ = model.forward(Tensor(np.zeros((2, 3, 8, 8))))
            assert logits.data.shape == (2, 4)
            assert np.all(np.isfinite(logits.data))

    def test_eval_mode_deterministic(self, rng):
        model = build_model(toy_spec(), 0)
        apply_precision(model, uniform_mask(model, 2, 2))
        model.eval()
        x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
        with T.no_grad():
            a, _ = model.forward(Tensor(x))
            b, _ = model.forward(Tensor(x))
        assert np.array_equal(a.data, b.data)

    def test_tap_matches_manual_unit_composition(self, rng):
        model = build_model(toy_spec(fragment_granularity="block"), 0)
        model.eval()
        x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
        with T.no_grad():
            _, hints = model.forward(Tensor(x), taps=[HintTap(0), HintTap(1)])
            h0 = model.run_unit(0, Tensor(x))
            h1 = model.run_unit(1, h0)
        assert np.array_equal(hints[0].data, h0.data)
        assert np.array_equal(hints[1].data, h1.data)

    def test_tap_out_of_range(self):
        model = build_model(toy_spec(), 0)
        with pytest.raises(TapError):
            model.forward(Tensor(np.zeros((1, 3, 8, 8))), taps=[HintTap(99)])

    def test_batch_shape_validated(self):
        model = build_model(toy_spec(), 0)
        with pytest.raises(InputError):
            model.forward(Tensor(np.zeros((1, 1, 8, 8))))


class TestSkipConnectionTyping:
    def _run(self, arch):
        spec = ModelSpec(architecture=arch, stage_widths=(4, 8),
                         blocks_per_stage=1, num_classes=4, in_channels=3,
                         fragment_granularity="block")
        model = build_model(spec, 0)
        apply_precision(model, uniform_mask(model, 2, 2))
        model.eval()
        with T.no_grad():
            model.forward(Tensor(np.random.default_rng(0)
                                 .random(size=(1, 3, 8, 8)).astype(np.float32)))
        return model.block_units()

    def test_resnet_residual_add_sees_quantized_activations(self):
        blocks = self._run("resnet_basic")
        # interior blocks receive the previous block's post-quantizer output
        assert blocks[1].last_shortcut_from_quantizer is True

    def test_preresnet_identity_path_never_quantized(self):
        blocks = self._run("preresnet_basic")
        assert all(b.last_shortcut_from_quantizer is False for b in blocks)


class TestPartitionProperty:
    def test_sampled_indicators_partition(self, rng):
        from lowbit.strategies import sample_indicator
        n = 9
        for delta in (0.0, 0.25, 0.5, 1.0):
            for _ in range(300):
                b = sample_indicator(n, delta, True, rng, excluded=(0, n - 1))
                groups = PrecisionMask.from_indicator(b, 2, 2, excluded=(0, n - 1)).subsets()
                flat = sorted(sum(groups.values(), []))
                assert flat == list(range(n))
                assert 0 in groups["G_r"] and n - 1 in groups["G_r"]


class TestTeacherPurity:
    def test_full_precision_forward_never_quantizes(self, rng):
        model = build_model(toy_spec(), 0)  # default mask is all 32
        quant.reset_applied_count()
        model.forward(Tensor(rng.random(size=(1, 3, 8, 8)).astype(np.float32)))
        assert quant.applied_count() == 0
