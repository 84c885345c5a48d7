"""Encoder/decoder contracts: frame arithmetic, causality, MRF equivalence."""

import numpy as np
import pytest
import torch

from streamcodec.config import DecoderConfig, EncoderConfig
from streamcodec.encoder import Encoder
from streamcodec.generator import Decoder, MRFBlock, ResidualBranch
from streamcodec.layers import init_conv_weights

torch.manual_seed(1)


@pytest.fixture(scope="module")
def hop300_encoder():
    torch.manual_seed(7)
    enc = Encoder(EncoderConfig(downsample_factors=(2, 2, 3, 5, 5), base_channels=4, num_blocks_per_stage=1))
    init_conv_weights(enc)
    enc.eval()
    return enc


class TestEncoder:
    def test_one_second_at_48k_gives_160_frames(self, hop300_encoder):
        with torch.no_grad():
            z = hop300_encoder(torch.randn(1, 1, 48000) * 0.1)
        assert z.shape[-1] == 160

    def test_single_hop_gives_one_frame(self, hop300_encoder):
        with torch.no_grad():
            z = hop300_encoder(torch.randn(1, 1, 300) * 0.1)
        assert z.shape[-1] == 1

    def test_non_aligned_input_rounds_up(self, hop300_encoder):
        with torch.no_grad():
            z = hop300_encoder(torch.randn(1, 1, 301) * 0.1)
        assert z.shape[-1] == 2

    def test_causality_future_perturbation(self, tiny_model):
        # frames whose receptive window ends before the perturbation are unchanged
        enc = tiny_model.encoder
        hop = tiny_model.hop
        rng = np.random.default_rng(3)
        x = torch.from_numpy(rng.normal(0, 0.2, (1, 1, 600)).astype(np.float32))
        with torch.no_grad():
            base = enc(x)
            for t in (37, 300, 599):
                pert = x.clone()
                pert[..., t:] += torch.from_numpy(
                    rng.normal(0, 1.0, (1, 1, 600 - t)).astype(np.float32)
                )
                changed = enc(pert)
                safe = -(-t // hop)  # frames f with f * hop < t
                assert torch.equal(base[..., :safe], changed[..., :safe])

    def test_deterministic(self, tiny_model):
        x = torch.randn(1, 1, 600)
        with torch.no_grad():
            assert torch.equal(tiny_model.encoder(x), tiny_model.encoder(x))


class TestDecoder:
    def test_output_length_is_frames_times_hop(self, tiny_model):
        with torch.no_grad():
            y = tiny_model.decoder(torch.randn(1, 8, 20) * 0.1)
        assert y.shape == (1, 1, 20 * 30)

    def test_causality_latent_perturbation(self, tiny_model):
        dec = tiny_model.decoder
        hop = tiny_model.hop
        z = torch.randn(1, 8, 20) * 0.1
        with torch.no_grad():
            base = dec(z)
            for k in (0, 7, 19):
                pert = z.clone()
                pert[..., k] += 1.0
                changed = dec(pert)
                assert torch.equal(base[..., : k * hop], changed[..., : k * hop])
                assert not torch.equal(base[..., k * hop :], changed[..., k * hop :])

    def test_pipeline_roundtrip_length(self, tiny_model):
        x = torch.randn(1, 1, 900) * 0.1  # hop-aligned
        with torch.no_grad():
            out = tiny_model(x)
        assert out.x_hat.shape == x.shape


def _mrf_config(variant, **overrides):
    defaults = dict(
        variant=variant,
        channels=12,
        upsample_factors=(5, 3, 2),
        branch_dilations=(1, 3),
        min_channels=4,
    )
    defaults.update(overrides)
    return DecoderConfig(**defaults)


class TestMRF:
    def test_zero_weights_residual_identity_v0(self):
        block = MRFBlock(6, _mrf_config("v0"))
        with torch.no_grad():
            for p in block.parameters():
                p.zero_()
        x = torch.randn(1, 6, 30)
        # residual identity up to the fusion mean's rounding
        assert torch.allclose(block(x), x, atol=1e-7)

    def test_zero_weights_residual_identity_grouped(self):
        block = MRFBlock(6, _mrf_config("v1"))
        with torch.no_grad():
            for p in block.parameters():
                p.zero_()
        x = torch.randn(1, 6, 30)
        assert torch.allclose(block(x), x, atol=1e-7)

    def test_degenerate_single_group_equals_plain_conv_branch(self):
        # one group, one conv step: the grouped machinery reduces to the
        # plain causal convolution inside a residual step
        cfg = _mrf_config("v2", num_groups=1, branch_dilations=(1,))
        block = MRFBlock(5, cfg)
        block.eval()
        x = torch.randn(1, 5, 40)
        conv = block.grouped.convs[0]
        act = block.grouped.acts[0]
        with torch.no_grad():
            expected = x + conv(act(x))
            assert torch.allclose(block(x), expected, atol=1e-7)

    def test_v1_grouped_equals_looped_branches(self):
        # oracle: run the three branches as independent plain convolutions
        cfg = _mrf_config("v1")
        block = MRFBlock(4, cfg)
        block.eval()
        x = torch.randn(2, 4, 50)
        with torch.no_grad():
            grouped_out = block(x)
            branch_outs = []
            for g in range(3):
                branch = ResidualBranch(4, cfg.resolved_group_kernel(), cfg.branch_dilations, cfg.activation, cfg.activation_params)
                for bc, gc in zip(branch.convs, block.grouped.convs):
                    bc.conv.weight.copy_(gc.conv.weight[g * 4 : (g + 1) * 4])
                    bc.conv.bias.copy_(gc.conv.bias[g * 4 : (g + 1) * 4])
                branch_outs.append(branch(x))
            fused = torch.stack(branch_outs).mean(dim=0)
        assert torch.allclose(grouped_out, fused, atol=1e-6)

    def test_v0_has_three_distinct_kernels(self):
        block = MRFBlock(4, _mrf_config("v0"))
        kernels = [b.convs[0].conv.kernel_size[0] for b in block.branches]
        assert kernels == [3, 7, 11]

    def test_v2_uses_kernel_3(self):
        block = MRFBlock(4, _mrf_config("v2"))
        assert block.grouped.convs[0].conv.kernel_size[0] == 3
        assert block.grouped.convs[0].conv.groups == 3

    def test_unknown_variant_rejected(self):
        from streamcodec.errors import ConfigError

        with pytest.raises(ConfigError):
            DecoderConfig(variant="v9", upsample_factors=(5, 3, 2)).validate()


class TestVariantArchitecture:
    @pytest.mark.parametrize("variant", ["sym", "v0", "v1", "v2"])
    def test_all_variants_upsample_correctly(self, variant):
        torch.manual_seed(2)
        dec = Decoder(_mrf_config(variant, channels=16), code_dim=6)
        init_conv_weights(dec)
        dec.eval()
        with torch.no_grad():
            y = dec(torch.randn(1, 6, 8) * 0.3)
        assert y.shape == (1, 1, 8 * 30)
        assert float(y.abs().max()) <= 1.0  # tanh output range

    def test_v1_has_grouped_conv_instead_of_branches(self):
        dec_v0 = Decoder(_mrf_config("v0", channels=16), code_dim=6)
        dec_v1 = Decoder(_mrf_config("v1", channels=16), code_dim=6)
        v0_block = dec_v0.blocks[0]
        v1_block = dec_v1.blocks[0]
        assert v0_block.branches is not None and len(v0_block.branches) == 3
        assert v1_block.grouped is not None and v1_block.branches is None
        # one grouped conv replaces three branch convs per conv step
        v0_convs = sum(len(b.convs) for b in v0_block.branches)
        v1_convs = len(v1_block.grouped.convs)
        assert v0_convs == 3 * v1_convs
