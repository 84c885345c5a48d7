"""Training objectives: mel reconstruction, adversarial pairs, feature matching.

Two GAN flavors exist and differ in nothing but the logit penalty:
``hinge`` for the from-scratch baseline, ``least_squares`` for stage-2
adversarial training. Multi-discriminator losses sum over discriminators;
expectations are means over batch elements and logit positions.
"""

from dataclasses import dataclass
from typing import List, Sequence

import torch
import torch.nn.functional as F

from .audio import LogMelSpectrogram
from .discriminators import DiscriminatorOutput

Tensor = torch.Tensor


def mel_loss(x: Tensor, x_hat: Tensor, mel: LogMelSpectrogram) -> Tensor:
    """Mean absolute log-mel difference between reference and reconstruction."""
    if x.shape != x_hat.shape:
        raise ValueError(f"length mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return (mel(x) - mel(x_hat)).abs().mean()


def hinge_d_loss(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    """E[max(0, 1 - D(x))] + E[max(0, 1 + D(G(x)))]."""
    return F.relu(1.0 - real_logits).mean() + F.relu(1.0 + fake_logits).mean()


def hinge_g_loss(fake_logits: Tensor) -> Tensor:
    """E[max(0, 1 - D(G(x)))]."""
    return F.relu(1.0 - fake_logits).mean()


def lsgan_d_loss(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    """E[(1 - D(x))^2 + D(G(x))^2]; the fake pass sees stop-gradiented codes."""
    return (1.0 - real_logits).pow(2).mean() + fake_logits.pow(2).mean()


def lsgan_g_loss(fake_logits: Tensor) -> Tensor:
    """E[(1 - D(G(x)))^2]."""
    return (1.0 - fake_logits).pow(2).mean()


_D_LOSSES = {"hinge": hinge_d_loss, "least_squares": lsgan_d_loss}
_G_LOSSES = {"hinge": hinge_g_loss, "least_squares": lsgan_g_loss}


def adversarial_d_loss(
    real: Sequence[DiscriminatorOutput],
    fake: Sequence[DiscriminatorOutput],
    flavor: str,
) -> Tensor:
    fn = _D_LOSSES[flavor]
    return sum(fn(r.logits, f.logits) for r, f in zip(real, fake))


def adversarial_g_loss(fake: Sequence[DiscriminatorOutput], flavor: str) -> Tensor:
    fn = _G_LOSSES[flavor]
    return sum(fn(f.logits) for f in fake)


def feature_matching_loss(real_maps: Sequence[Tensor], fake_maps: Sequence[Tensor]) -> Tensor:
    """Mean over corresponding maps of the element-mean L1 distance."""
    if len(real_maps) != len(fake_maps):
        raise ValueError(
            f"feature map count mismatch: {len(real_maps)} vs {len(fake_maps)}"
        )
    total = None
    for r, f in zip(real_maps, fake_maps):
        if r.shape != f.shape:
            raise ValueError(
                f"feature map shape mismatch: {tuple(r.shape)} vs {tuple(f.shape)}"
            )
        term = (r - f).abs().mean()
        total = term if total is None else total + term
    if total is None:
        raise ValueError("empty feature map lists")
    return total / len(real_maps)


def ensemble_feature_matching_loss(
    real: Sequence[DiscriminatorOutput], fake: Sequence[DiscriminatorOutput]
) -> Tensor:
    """Feature matching pooled over every map of every discriminator."""
    real_flat: List[Tensor] = [m for out in real for m in out.feature_maps]
    fake_flat: List[Tensor] = [m for out in fake for m in out.feature_maps]
    return feature_matching_loss(real_flat, fake_flat)


@dataclass
class GeneratorLossParts:
    adv: Tensor
    fm: Tensor
    mel: Tensor
    vq: Tensor


def generator_total_loss(parts: GeneratorLossParts, weights) -> Tensor:
    """adv + lambda_fm * fm + lambda_mel * mel + lambda_vq * vq."""
    return (
        parts.adv
        + weights.lambda_fm * parts.fm
        + weights.lambda_mel * parts.mel
        + weights.lambda_vq * parts.vq
    )
