import math

import numpy as np
import pytest
import torch

from marsnet import model as M

from conftest import random_inputs, tiny_config
from oracles import (band_attention_ref, bru_ref, conv2d_ref, fusion_ref,
                     group_norm_ref, sru_ref)


class TestConfig:
    def test_defaults_and_pyramid(self):
        cfg = M.ModelConfig(input_bands={"sentinel2": 17})
        assert cfg.stage_widths == (64, 128, 256, 512)
        assert cfg.input_spatial == 64
        assert M.pyramid_shapes(cfg) == [(64, 64, 64), (128, 32, 32),
                                         (256, 16, 16), (512, 8, 8)]

    def test_modalities_canonical_order(self):
        cfg = M.ModelConfig(input_bands={"ancillary": 4, "sentinel2": 17})
        assert cfg.modalities == ("sentinel2", "ancillary")

    def test_validation(self):
        # configs validate on demand (and always when a model is built)
        with pytest.raises(ValueError, match="modalit"):
            M.ModelConfig(input_bands={}).validate()
        with pytest.raises(ValueError, match="modalit"):
            M.ModelConfig(input_bands={"hyperspectral": 3}).validate()
        with pytest.raises(ValueError, match="encoder_mode"):
            tiny_config(encoder_mode="mixed").validate()
        with pytest.raises(ValueError, match="spatial"):
            tiny_config(input_spatial=15).validate()   # one halving impossible
        with pytest.raises(ValueError, match="even"):
            tiny_config(stage_widths=(7, 14)).validate()
        with pytest.raises(ValueError, match="dropout"):
            tiny_config(dropout_rate=1.5).validate()
        with pytest.raises(ValueError, match="modalit"):
            M.MarsNet(M.ModelConfig(input_bands={}))

    def test_dict_roundtrip(self):
        cfg = tiny_config(encoder_mode="sar_shared", esbc_enabled=False, seed=99)
        assert M.ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_gn_groups_clamped_to_divisor(self):
        assert M.effective_gn_groups(64, 16) == 16
        assert M.effective_gn_groups(8, 16) == 8
        assert M.effective_gn_groups(12, 16) == 12
        assert M.effective_gn_groups(10, 16) == 10
        assert M.effective_gn_groups(6, 4) == 3

    def test_bru_width_check(self):
        M.check_bru_widths(16, 0.5, 2, 2)
        with pytest.raises(ValueError):
            M.check_bru_widths(6, 0.5, 4, 2)        # upper 3 not divisible by 4


class TestGroupNormOracle:
    def test_matches_reference(self):
        torch.manual_seed(0)
        layer = torch.nn.GroupNorm(4, 8).double()
        with torch.no_grad():
            layer.weight.copy_(torch.linspace(-1.0, 2.0, 8))
            layer.bias.copy_(torch.linspace(0.5, -0.5, 8))
        x = torch.randn(3, 8, 5, 5, dtype=torch.float64)
        want = group_norm_ref(x.numpy(), 4, layer.weight.detach().numpy(),
                              layer.bias.detach().numpy())
        got = layer(x).detach().numpy()
        np.testing.assert_allclose(got, want, atol=1e-9)


class TestSRU:
    def _unit(self, bands=8, seed=1, **kw):
        torch.manual_seed(seed)
        unit = M.SpatialReconstructionUnit(bands, **kw).double()
        with torch.no_grad():
            unit.norm.weight.copy_(torch.randn(bands, dtype=torch.float64))
            unit.norm.bias.copy_(torch.randn(bands, dtype=torch.float64) * 0.1)
        return unit

    def test_scalar_oracle(self):
        unit = self._unit(bands=4, gn_groups=2)
        x = torch.randn(2, 4, 2, 2, dtype=torch.float64)
        want = sru_ref(x.numpy(), unit.norm.weight.detach().numpy(),
                       unit.norm.bias.detach().numpy(), unit.norm.num_groups)
        got = unit(x).detach().numpy()
        np.testing.assert_allclose(got, want, atol=1e-9)

    def test_conservation_float64(self):
        rng = np.random.default_rng(0)
        unit = self._unit(bands=16)
        for _ in range(25):
            x = torch.tensor(rng.normal(size=(2, 16, 6, 6)))
            with torch.no_grad():
                y = unit(x)
            total_in = float(x.sum())
            total_out = float(y.sum())
            assert abs(total_out - total_in) <= 1e-6 * max(abs(total_in), 1e-12)

    def test_all_informative_gate_is_identity(self):
        unit = self._unit(bands=8)
        x = torch.randn(1, 8, 3, 3, dtype=torch.float64)
        unit.gate_override = torch.ones_like(x)
        np.testing.assert_allclose(unit(x).numpy(), x.numpy(), atol=1e-12)

    def test_zero_input_zero_output(self):
        unit = self._unit()
        x = torch.zeros(1, 8, 4, 4, dtype=torch.float64)
        with torch.no_grad():
            assert float(unit(x).abs().sum()) == 0.0

    def test_gate_capture_is_binary(self):
        unit = self._unit()
        unit.capture_gates = True
        unit(torch.randn(2, 8, 4, 4, dtype=torch.float64))
        gate = unit.captured_gate
        assert gate is not None
        assert set(np.unique(gate.numpy())) <= {0.0, 1.0}

    def test_hard_gate_blocks_gate_gradient(self):
        # the threshold comparison is constant in backward, so the GN affine
        # parameters feeding only the gate receive no gradient at all
        unit = self._unit()
        x = torch.randn(2, 8, 4, 4, dtype=torch.float64, requires_grad=True)
        unit(x).pow(2).sum().backward()
        grad = unit.norm.weight.grad
        assert grad is None or float(grad.abs().max()) == 0.0
        assert float(x.grad.abs().max()) > 0.0

    def test_straight_through_lets_gradient_flow(self):
        unit = self._unit(straight_through=True)
        unit(torch.randn(2, 8, 4, 4, dtype=torch.float64)).pow(2).sum().backward()
        assert float(unit.norm.weight.grad.abs().max()) > 0.0

    def test_odd_band_count_rejected(self):
        with pytest.raises(ValueError, match="even"):
            M.SpatialReconstructionUnit(7)


class TestBRU:
    # 8 bands: the narrowest width whose squeezed upper half still divides
    # into the default 2 convolution groups
    def _unit(self, bands=8, seed=3, **kw):
        torch.manual_seed(seed)
        unit = M.BandReconstructionUnit(bands, **kw).double()
        for p in unit.parameters():
            with torch.no_grad():
                p.copy_(torch.randn_like(p) * 0.5)
        return unit

    def test_scalar_oracle(self):
        unit = self._unit(bands=8, alpha=0.5, squeeze_ratio=2, groups=2)
        x = torch.randn(2, 8, 2, 2, dtype=torch.float64)
        np.testing.assert_allclose(unit(x).detach().numpy(), bru_ref(x.numpy(), unit),
                                   atol=1e-9)

    def test_weights_sum_to_one_exactly(self):
        unit = self._unit(bands=16).float()
        y1, y2 = unit.branches(torch.randn(3, 16, 5, 5))
        b1, b2 = unit.branch_weights(y1, y2)
        assert torch.equal(b1 + b2, torch.ones_like(b1))
        assert (b1 > 0).all() and (b1 < 1).all()

    def test_equal_branches_passthrough(self):
        unit = self._unit()
        x = torch.randn(1, 8, 3, 3, dtype=torch.float64)
        y1, _ = unit.branches(x)
        b1, b2 = unit.branch_weights(y1, y1)
        out = b1[:, :, None, None] * y1 + b2[:, :, None, None] * y1
        np.testing.assert_allclose(out.detach().numpy(), y1.detach().numpy(), atol=1e-12)

    def test_zero_input_zero_bias_zero_output(self):
        unit = self._unit()
        for name, p in unit.named_parameters():
            if name.endswith("bias"):
                with torch.no_grad():
                    p.zero_()
        out = unit(torch.zeros(1, 8, 3, 3, dtype=torch.float64))
        np.testing.assert_allclose(out.detach().numpy(), 0.0, atol=1e-12)

    def test_divisibility_validation(self):
        with pytest.raises(ValueError):
            M.BandReconstructionUnit(4, alpha=0.5, squeeze_ratio=4, groups=2)


class TestESBC:
    def test_disabled_is_plain_convolution(self):
        cfg = tiny_config(esbc_enabled=False)
        torch.manual_seed(2)
        unit = M.ESBCConv(3, 8, cfg).double()
        assert unit.spatial is None and unit.band is None
        x = torch.randn(2, 3, 6, 6, dtype=torch.float64)
        want = conv2d_ref(x.numpy(), unit.adjust.weight.detach().numpy(),
                          unit.adjust.bias.detach().numpy(), padding=1)
        np.testing.assert_allclose(unit(x).detach().numpy(), want, atol=1e-9)

    def test_enabled_wires_adjust_then_units(self):
        cfg = tiny_config()
        unit = M.ESBCConv(17, 8, cfg)
        assert unit.adjust.kernel_size == (1, 1)
        assert unit.adjust.in_channels == 17 and unit.adjust.out_channels == 8
        out = unit(torch.randn(2, 17, 8, 8))
        assert out.shape == (2, 8, 8, 8)

    def test_zero_input_zero_bias_zero_output(self):
        cfg = tiny_config()
        unit = M.ESBCConv(4, 8, cfg)
        for name, p in unit.named_parameters():
            if name.endswith("bias"):
                with torch.no_grad():
                    p.zero_()
        with torch.no_grad():
            out = unit(torch.zeros(1, 4, 4, 4))
        assert float(out.abs().sum()) == 0.0


class TestBandAttention:
    def test_matches_reference_and_bounds(self):
        torch.manual_seed(4)
        att = M.BandAttention(8).double()
        x = torch.randn(2, 8, 4, 4, dtype=torch.float64)
        want = band_attention_ref(
            x.numpy(), att.squeeze.weight.detach().numpy(),
            att.squeeze.bias.detach().numpy(), att.excite.weight.detach().numpy(),
            att.excite.bias.detach().numpy())
        np.testing.assert_allclose(att(x).detach().numpy(), want, atol=1e-9)
        assert (att(x).abs() <= x.abs() + 1e-12).all()   # per-band weight in (0,1)

    def test_bottleneck_width(self):
        assert M.BandAttention(64).squeeze.out_features == 16
        assert M.BandAttention(2).squeeze.out_features == 1


class TestConvBlock:
    def test_stage2_halves_spatial(self):
        cfg = tiny_config()
        block = M.ConvBlock(8, 16, cfg, pool=True)
        out = block(torch.randn(2, 8, 16, 16))
        assert out.shape == (2, 16, 8, 8)

    def test_relu_nonnegativity_before_attention(self):
        # attention multiplies by a sigmoid in (0, 1), so outputs stay >= 0
        cfg = tiny_config()
        block = M.ConvBlock(4, 8, cfg)
        out = block(torch.randn(2, 4, 8, 8))
        assert (out >= 0).all()

    def test_eval_forward_is_deterministic(self):
        cfg = tiny_config()
        block = M.ConvBlock(4, 8, cfg, dropout=0.25).eval()
        x = torch.randn(2, 4, 8, 8)
        with torch.no_grad():
            assert torch.equal(block(x), block(x))


class TestEncoder:
    def test_pyramid_shapes(self):
        cfg = tiny_config(stage_widths=(8, 16, 32), input_spatial=32)
        enc = M.Encoder(17, cfg)
        feats = enc(torch.randn(2, 17, 32, 32))
        assert [tuple(f.shape) for f in feats] == \
            [(2, 8, 32, 32), (2, 16, 16, 16), (2, 32, 8, 8)]

    def test_input_validation(self):
        cfg = tiny_config()
        enc = M.Encoder(9, cfg)
        with pytest.raises(ValueError, match="expects"):
            enc(torch.randn(2, 8, 16, 16))
        with pytest.raises(ValueError, match="16px"):
            enc(torch.randn(2, 9, 32, 32))

    def test_dropout_only_on_last_stage(self):
        cfg = tiny_config(stage_widths=(8, 16, 32), input_spatial=32, dropout_rate=0.25)
        enc = M.Encoder(4, cfg)
        flags = [block.dropout is not None for block in enc.blocks]
        assert flags == [False, False, True]
        assert enc.blocks[-1].dropout.p == 0.25

    def test_pooling_from_second_stage(self):
        cfg = tiny_config(stage_widths=(8, 16, 32), input_spatial=32)
        enc = M.Encoder(4, cfg)
        assert [block.pool is not None for block in enc.blocks] == [False, True, True]


class TestModalFusion:
    def test_scalar_oracle(self):
        torch.manual_seed(6)
        fusion = M.ModalFusion(2, 4).double()
        feats = [torch.randn(1, 4, 8, 8, dtype=torch.float64) for _ in range(2)]
        want = fusion_ref(
            [f.numpy() for f in feats],
            fusion.mix.weight.detach().numpy(), fusion.mix.bias.detach().numpy(),
            fusion.attend.weight.detach().numpy(), fusion.attend.bias.detach().numpy())
        np.testing.assert_allclose(fusion(feats).detach().numpy(), want, atol=1e-9)

    def test_single_modality_runs(self):
        fusion = M.ModalFusion(1, 8)
        out = fusion([torch.randn(2, 8, 4, 4)])
        assert out.shape == (2, 8, 4, 4)

    def test_attention_bounds_magnitude(self):
        torch.manual_seed(7)
        fusion = M.ModalFusion(2, 4)
        feats = [torch.relu(torch.randn(1, 4, 8, 8)) for _ in range(2)]
        out = fusion(feats)
        mixed = torch.relu(fusion.mix(torch.cat(feats, dim=1)))
        assert (out.abs() <= mixed.abs() + 1e-6).all()

    def test_wrong_count_rejected(self):
        fusion = M.ModalFusion(2, 4)
        with pytest.raises(ValueError, match="expects 2"):
            fusion([torch.randn(1, 4, 8, 8)])


class TestDecoder:
    def test_output_shape_and_skip_sensitivity(self):
        cfg = tiny_config()
        torch.manual_seed(8)
        dec = M.Decoder(cfg)
        pyramid = [torch.randn(2, 8, 16, 16), torch.randn(2, 16, 8, 8)]
        out = dec(pyramid)
        assert out.shape == (2, 1, 16, 16)
        zeroed = [torch.zeros_like(pyramid[0]), pyramid[1]]
        assert not torch.allclose(out, dec(zeroed))

    def test_head_is_single_band_1x1(self):
        dec = M.Decoder(tiny_config())
        assert dec.head.kernel_size == (1, 1)
        assert dec.head.out_channels == 1
        assert dec.head.in_channels == 8


class TestMarsNet:
    def test_forward_shape_and_finiteness(self):
        cfg = tiny_config()
        net = M.build_model(cfg)
        out = net(random_inputs(cfg))
        assert out.shape == (2, 1, 16, 16)
        assert torch.isfinite(out).all()

    def test_single_modality_config(self):
        cfg = tiny_config(input_bands={"sentinel2": 17})
        net = M.build_model(cfg)
        out = net(random_inputs(cfg))
        assert out.shape == (2, 1, 16, 16)

    def test_missing_and_extra_modalities_rejected(self):
        cfg = tiny_config()
        net = M.build_model(cfg)
        inputs = random_inputs(cfg)
        short = {k: v for k, v in inputs.items() if k != "palsar2"}
        with pytest.raises(ValueError, match="missing"):
            net(short)
        extra = dict(inputs, lidar=torch.randn(2, 1, 16, 16))
        with pytest.raises(ValueError, match="unexpected"):
            net(extra)

    def test_wrong_shape_rejected(self):
        cfg = tiny_config()
        net = M.build_model(cfg)
        inputs = random_inputs(cfg)
        inputs["sentinel1"] = torch.randn(2, 9, 8, 8)
        with pytest.raises(ValueError, match="sentinel1"):
            net(inputs)

    def test_eval_mode_repeatable(self):
        cfg = tiny_config()
        net = M.build_model(cfg).eval()
        inputs = random_inputs(cfg)
        with torch.no_grad():
            assert torch.equal(net(inputs), net(inputs))

    def test_train_mode_dropout_varies(self):
        cfg = tiny_config(dropout_rate=0.5)
        net = M.build_model(cfg).train()
        inputs = random_inputs(cfg)
        torch.manual_seed(0)
        a = net(inputs)
        b = net(inputs)
        assert not torch.equal(a, b)


class TestEncoderModes:
    def test_separate_has_one_encoder_per_modality(self):
        net = M.build_model(tiny_config(encoder_mode="separate"))
        assert set(net.encoders) == {"sentinel2", "sentinel1", "palsar2", "ancillary"}
        assert not net.adapters

    def test_shared_has_one_encoder_plus_adapters(self):
        net = M.build_model(tiny_config(encoder_mode="shared"))
        assert set(net.encoders) == {"shared"}
        assert set(net.adapters) == {"sentinel2", "sentinel1", "palsar2", "ancillary"}
        # widest modality adapter is square and identity-initialized
        w = net.adapters["sentinel2"].weight
        assert w.shape == (17, 17, 1, 1)
        assert torch.equal(w.squeeze(-1).squeeze(-1), torch.eye(17))

    def test_sar_shared_groups_c_and_l_band(self):
        net = M.build_model(tiny_config(encoder_mode="sar_shared"))
        assert set(net.encoders) == {"sentinel2", "ancillary", "sar"}
        assert set(net.adapters) == {"sentinel1", "palsar2"}
        assert net.route["sentinel1"] == net.route["palsar2"] == "sar"

    def test_single_modality_shared_equals_separate(self):
        kw = dict(input_bands={"sentinel2": 17}, seed=5)
        sep = M.build_model(tiny_config(**kw))
        shared = M.build_model(tiny_config(encoder_mode="shared", **kw))
        sep.eval()
        shared.eval()
        x = random_inputs(sep.config, batch=2, seed=3)
        with torch.no_grad():
            a, b = sep(x), shared(x)
        np.testing.assert_allclose(a.numpy(), b.numpy(), atol=1e-9)

    def test_separate_encoder_params_about_4x_shared(self):
        cfg = M.ModelConfig(
            input_bands={"sentinel2": 17, "sentinel1": 9, "palsar2": 4, "ancillary": 4},
            stage_widths=(64, 128, 256, 512), input_spatial=64, seed=0)
        separate = M.MarsNet(cfg)
        shared = M.MarsNet(M.ModelConfig(**{**cfg.to_dict(), "encoder_mode": "shared"}))
        ratio = M.encoder_parameter_count(separate) / M.encoder_parameter_count(shared)
        assert ratio == pytest.approx(4.0, rel=0.01)


class TestInitialization:
    def test_same_seed_bitwise_identical(self):
        a = M.build_model(tiny_config(seed=11))
        b = M.build_model(tiny_config(seed=11))
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_different_seed_differs(self):
        a = M.build_model(tiny_config(seed=11))
        b = M.build_model(tiny_config(seed=12))
        assert any(not torch.equal(pa, pb)
                   for pa, pb in zip(a.parameters(), b.parameters()))

    def test_all_finite_biases_zero_norms_one(self):
        net = M.build_model(tiny_config())
        for name, p in net.named_parameters():
            p = p.detach()
            assert torch.isfinite(p).all(), name
            if p.ndim == 1:
                if name.endswith("bias"):
                    assert float(p.abs().max()) == 0.0, name
                else:
                    assert torch.equal(p, torch.ones_like(p)), name

    def test_he_scaling(self):
        net = M.build_model(tiny_config(seed=3))
        conv = net.decoder.head.weight          # (1, 8, 1, 1) is too small; use a big one
        big = [p for p in net.parameters() if p.ndim == 4 and p.numel() > 2000][0]
        fan_in = big.shape[1] * big.shape[2] * big.shape[3]
        expected = math.sqrt(2.0 / fan_in)
        assert float(big.detach().std()) == pytest.approx(expected, rel=0.15)
        assert conv.ndim == 4

    def test_parameter_count_matches_manual_sum(self):
        net = M.build_model(tiny_config())
        assert M.parameter_count(net) == sum(p.numel() for p in net.parameters())

    def test_sru_modules_found_only_when_enabled(self):
        # 4 encoders x 2 stages + 1 decoder block
        assert len(M.sru_modules(M.build_model(tiny_config()))) == 9
        assert not M.sru_modules(M.build_model(tiny_config(esbc_enabled=False)))
