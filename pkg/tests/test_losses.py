"""Loss functions: closed-form cases, scalar-loop oracles, gradient contracts."""

import numpy as np
import pytest
import torch

from streamcodec.audio import LogMelSpectrogram, MelConfig
from streamcodec.config import LossWeights
from streamcodec.losses import (
    GeneratorLossParts,
    feature_matching_loss,
    generator_total_loss,
    hinge_d_loss,
    hinge_g_loss,
    lsgan_d_loss,
    lsgan_g_loss,
    mel_loss,
)

torch.manual_seed(0)

MEL = LogMelSpectrogram(
    MelConfig(fft_size=256, hop_length=60, win_length=120, num_mels=32, fmax=12000.0), 24000
)


class TestMelLoss:
    def test_identity_is_zero(self):
        x = torch.randn(1, 1200) * 0.3
        assert float(mel_loss(x, x.clone(), MEL)) == 0.0

    def test_silence_pair_is_zero(self):
        x = torch.zeros(1, 1200)
        assert float(mel_loss(x, x.clone(), MEL)) == 0.0

    def test_matches_direct_l1_oracle(self):
        # float64 end to end so the 1e-7 tolerance is meaningful
        rng = np.random.default_rng(1)
        mel64 = LogMelSpectrogram(MEL.cfg, 24000).double()
        a = torch.from_numpy(rng.normal(0, 0.3, (2, 1200)))
        b = torch.from_numpy(rng.normal(0, 0.3, (2, 1200)))
        got = float(mel_loss(a, b, mel64))
        with torch.no_grad():
            ma, mb = mel64(a).numpy(), mel64(b).numpy()
        expected = float(np.abs(ma - mb).mean())
        assert got == pytest.approx(expected, abs=1e-7)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            mel_loss(torch.zeros(1, 600), torch.zeros(1, 660), MEL)

    def test_positive_for_different_inputs(self):
        a = torch.randn(1, 1200) * 0.3
        b = a * 0.1
        assert float(mel_loss(a, b, MEL)) > 0


class TestAdversarialLosses:
    def test_hinge_d_perfect_discriminator(self):
        real = torch.ones(4, 10)
        fake = -torch.ones(4, 10)
        assert float(hinge_d_loss(real, fake)) == 0.0

    def test_hinge_d_zero_logits(self):
        z = torch.zeros(3, 5)
        assert float(hinge_d_loss(z, z)) == 2.0

    def test_hinge_g_cases(self):
        assert float(hinge_g_loss(torch.ones(2, 3))) == 0.0
        assert float(hinge_g_loss(torch.zeros(2, 3))) == 1.0

    def test_lsgan_d_optimum(self):
        assert float(lsgan_d_loss(torch.ones(2, 4), torch.zeros(2, 4))) == 0.0

    def test_lsgan_d_flipped(self):
        assert float(lsgan_d_loss(torch.zeros(2, 4), torch.ones(2, 4))) == 2.0

    def test_lsgan_g_cases(self):
        assert float(lsgan_g_loss(torch.ones(5))) == 0.0
        assert float(lsgan_g_loss(torch.zeros(5))) == 1.0

    @pytest.mark.parametrize(
        "fn,n_args",
        [(hinge_d_loss, 2), (hinge_g_loss, 1), (lsgan_d_loss, 2), (lsgan_g_loss, 1)],
    )
    def test_scalar_loop_oracle(self, fn, n_args):
        rng = np.random.default_rng(7)
        real = rng.normal(0, 2, 23)  # float64 so the 1e-7 tolerance is meaningful
        fake = rng.normal(0, 2, 23)

        def scalar(fn_name):
            if fn_name is hinge_d_loss:
                return np.mean([max(0.0, 1 - r) for r in real]) + np.mean(
                    [max(0.0, 1 + f) for f in fake]
                )
            if fn_name is hinge_g_loss:
                return np.mean([max(0.0, 1 - f) for f in fake])
            if fn_name is lsgan_d_loss:
                return np.mean([(1 - r) ** 2 for r in real]) + np.mean(
                    [f**2 for f in fake]
                )
            return np.mean([(1 - f) ** 2 for f in fake])

        args = (torch.from_numpy(real), torch.from_numpy(fake))[2 - n_args :]
        assert float(fn(*args)) == pytest.approx(scalar(fn), abs=1e-7)


class TestFeatureMatching:
    def test_identical_maps_zero(self):
        maps = [torch.randn(2, 3, 4) for _ in range(3)]
        assert float(feature_matching_loss(maps, [m.clone() for m in maps])) == 0.0

    def test_single_scalar_pair(self):
        a, b = torch.tensor([[2.5]]), torch.tensor([[4.0]])
        assert float(feature_matching_loss([a], [b])) == pytest.approx(1.5)

    def test_per_layer_loop_oracle(self):
        rng = np.random.default_rng(3)
        real = [rng.normal(0, 1, (2, 4, 8)).astype(np.float32) for _ in range(4)]
        fake = [rng.normal(0, 1, (2, 4, 8)).astype(np.float32) for _ in range(4)]
        got = float(
            feature_matching_loss(
                [torch.from_numpy(m) for m in real], [torch.from_numpy(m) for m in fake]
            )
        )
        expected = np.mean([np.abs(r - f).mean() for r, f in zip(real, fake)])
        assert got == pytest.approx(expected, abs=1e-7)

    def test_shape_incongruence_rejected(self):
        with pytest.raises(ValueError):
            feature_matching_loss([torch.zeros(1, 2)], [torch.zeros(1, 3)])

    def test_count_mismatch_rejected(self):
        with pytest.raises(ValueError):
            feature_matching_loss([torch.zeros(1)], [torch.zeros(1), torch.zeros(1)])


class TestGeneratorTotal:
    def test_all_zero_parts(self):
        parts = GeneratorLossParts(*[torch.tensor(0.0)] * 4)
        assert float(generator_total_loss(parts, LossWeights(1, 1, 1))) == 0.0

    def test_direct_substitution(self):
        parts = GeneratorLossParts(
            adv=torch.tensor(1.0), fm=torch.tensor(2.0), mel=torch.tensor(3.0), vq=torch.tensor(4.0)
        )
        weights = LossWeights(lambda_fm=1.0, lambda_mel=1.0, lambda_vq=1.0)
        assert float(generator_total_loss(parts, weights)) == 10.0

    def test_weighted_combination(self):
        parts = GeneratorLossParts(
            adv=torch.tensor(1.0), fm=torch.tensor(2.0), mel=torch.tensor(3.0), vq=torch.tensor(4.0)
        )
        weights = LossWeights(lambda_fm=2.0, lambda_mel=45.0, lambda_vq=1.0)
        assert float(generator_total_loss(parts, weights)) == 1 + 4 + 135 + 4

    def test_gradient_is_weighted_sum_by_finite_differences(self):
        # toy two-parameter generator: y = w1 * x + w2
        torch.manual_seed(5)
        x = torch.randn(8)
        target = torch.randn(8)
        weights = LossWeights(lambda_fm=2.0, lambda_mel=3.0, lambda_vq=0.5)

        def total(w1, w2):
            y = w1 * x + w2
            adv = (1 - y.mean()) ** 2
            fm = (y - target).abs().mean()
            mel_part = (y - target).pow(2).mean()
            vq = (y.pow(2)).mean()
            return generator_total_loss(
                GeneratorLossParts(adv=adv, fm=fm, mel=mel_part, vq=vq), weights
            )

        w1 = torch.tensor(0.7, requires_grad=True, dtype=torch.float64)
        w2 = torch.tensor(-0.2, requires_grad=True, dtype=torch.float64)
        x = x.double()
        target = target.double()
        total(w1, w2).backward()
        eps = 1e-6
        for p, analytic in ((w1, w1.grad), (w2, w2.grad)):
            with torch.no_grad():
                hi = total(w1 + (eps if p is w1 else 0), w2 + (eps if p is w2 else 0))
                lo = total(w1 - (eps if p is w1 else 0), w2 - (eps if p is w2 else 0))
            fd = float(hi - lo) / (2 * eps)
            assert float(analytic) == pytest.approx(fd, rel=1e-4)
