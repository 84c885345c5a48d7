"""Discriminator ensembles: multi-period, multi-scale, and STFT-based.

The period discriminators view the waveform as a [T/p x p] grid so each
column tracks one phase of a candidate period. The scale discriminators
see the raw waveform and factor-2 average-pooled copies. The STFT
discriminator (complex spectrogram input) is kept only for the
hinge-loss baseline configuration and is absent from the default
ensemble.
"""

from typing import List, NamedTuple, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm, weight_norm

from .config import DiscriminatorConfig

Tensor = torch.Tensor


class DiscriminatorOutput(NamedTuple):
    logits: Tensor
    feature_maps: List[Tensor]


class PeriodDiscriminator(nn.Module):
    """2D conv stack over the waveform reshaped to [T/p x p]."""

    def __init__(self, period: int, cfg: DiscriminatorConfig):
        super().__init__()
        self.period = period
        self.leaky = cfg.leaky_slope
        convs = []
        in_ch = 1
        out_ch = cfg.mpd_channels
        for scale in cfg.mpd_downsample_scales:
            convs.append(
                weight_norm(
                    nn.Conv2d(
                        in_ch,
                        out_ch,
                        (cfg.mpd_kernel, 1),
                        stride=(scale, 1),
                        padding=((cfg.mpd_kernel - 1) // 2, 0),
                    )
                )
            )
            in_ch = out_ch
            out_ch = min(out_ch * 4, cfg.mpd_max_channels)
        self.convs = nn.ModuleList(convs)
        self.output_conv = weight_norm(nn.Conv2d(in_ch, 1, (3, 1), padding=(1, 0)))

    def reshape(self, x: Tensor) -> Tensor:
        """(B, 1, T) -> (B, 1, ceil(T/p), p), right-zero-padded."""
        b, c, t = x.shape
        if t % self.period:
            x = F.pad(x, (0, self.period - t % self.period))
            t = x.shape[-1]
        return x.view(b, c, t // self.period, self.period)

    def forward(self, x: Tensor) -> DiscriminatorOutput:
        h = self.reshape(x)
        fmaps = []
        for conv in self.convs:
            h = F.leaky_relu(conv(h), self.leaky)
            fmaps.append(h)
        logits = self.output_conv(h).flatten(1)
        return DiscriminatorOutput(logits, fmaps)


class ScaleDiscriminator(nn.Module):
    """1D conv stack over a (possibly pooled) waveform."""

    def __init__(self, cfg: DiscriminatorConfig, use_spectral_norm: bool):
        super().__init__()
        norm = spectral_norm if use_spectral_norm else weight_norm
        self.leaky = cfg.leaky_slope
        k0, k_down, k_mid, k_out = cfg.msd_kernels
        ch = cfg.msd_channels
        convs = [norm(nn.Conv1d(1, ch, k0, padding=(k0 - 1) // 2))]
        in_ch = ch
        groups = 1
        for scale in cfg.msd_downsample_scales:
            out_ch = min(in_ch * 2, cfg.msd_max_channels)
            convs.append(
                norm(
                    nn.Conv1d(
                        in_ch,
                        out_ch,
                        k_down,
                        stride=scale,
                        groups=groups,
                        padding=(k_down - 1) // 2,
                    )
                )
            )
            in_ch = out_ch
            groups = min(groups * 2, cfg.msd_groups)
        convs.append(norm(nn.Conv1d(in_ch, in_ch, k_mid, padding=(k_mid - 1) // 2)))
        self.convs = nn.ModuleList(convs)
        self.output_conv = norm(nn.Conv1d(in_ch, 1, k_out, padding=(k_out - 1) // 2))

    def forward(self, x: Tensor) -> DiscriminatorOutput:
        fmaps = []
        h = x
        for conv in self.convs:
            h = F.leaky_relu(conv(h), self.leaky)
            fmaps.append(h)
        logits = self.output_conv(h).flatten(1)
        return DiscriminatorOutput(logits, fmaps)


class MultiPeriodDiscriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.discriminators = nn.ModuleList(
            [PeriodDiscriminator(p, cfg) for p in cfg.periods]
        )

    def forward(self, x: Tensor) -> List[DiscriminatorOutput]:
        return [d(x) for d in self.discriminators]


class MultiScaleDiscriminator(nn.Module):
    """Scale k sees the input average-pooled k times by factor 2."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.discriminators = nn.ModuleList(
            [ScaleDiscriminator(cfg, use_spectral_norm=(i == 0)) for i in range(cfg.msd_scales)]
        )

    def forward(self, x: Tensor) -> List[DiscriminatorOutput]:
        outs = []
        h = x
        for i, d in enumerate(self.discriminators):
            if i > 0:
                if h.shape[-1] < 2:
                    raise ValueError("input too short for requested MSD scales")
                h = F.avg_pool1d(h, kernel_size=2, stride=2)
            outs.append(d(h))
        return outs


class STFTDiscriminator(nn.Module):
    """2D conv stack over the stacked real/imaginary STFT."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.fft_size = cfg.stftd_fft_size
        self.hop = cfg.stftd_hop
        self.leaky = cfg.leaky_slope
        self.register_buffer("window", torch.hann_window(cfg.stftd_fft_size))
        ch = cfg.stftd_channels
        self.convs = nn.ModuleList(
            [
                weight_norm(nn.Conv2d(2, ch, (3, 9), padding=(1, 4))),
                weight_norm(nn.Conv2d(ch, ch, (3, 9), stride=(1, 2), padding=(1, 4))),
                weight_norm(nn.Conv2d(ch, ch, (3, 9), stride=(1, 2), padding=(1, 4))),
                weight_norm(nn.Conv2d(ch, ch, (3, 3), padding=(1, 1))),
            ]
        )
        self.output_conv = weight_norm(nn.Conv2d(ch, 1, (3, 3), padding=(1, 1)))

    def forward(self, x: Tensor) -> DiscriminatorOutput:
        if x.shape[-1] < self.fft_size:
            raise ValueError("input shorter than one STFT frame")
        spec = torch.stft(
            x.squeeze(1),
            n_fft=self.fft_size,
            hop_length=self.hop,
            window=self.window,
            center=False,
            return_complex=True,
        )
        h = torch.stack([spec.real, spec.imag], dim=1)  # (B, 2, bins, frames)
        fmaps = []
        for conv in self.convs:
            h = F.leaky_relu(conv(h), self.leaky)
            fmaps.append(h)
        logits = self.output_conv(h).flatten(1)
        return DiscriminatorOutput(logits, fmaps)


class DiscriminatorEnsemble(nn.Module):
    """The configured set of discriminators, flattened to one output list."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        cfg.validate()
        self.kinds: Tuple[str, ...] = tuple(cfg.kinds)
        members = []
        for kind in self.kinds:
            if kind == "mpd":
                members.append(MultiPeriodDiscriminator(cfg))
            elif kind == "msd":
                members.append(MultiScaleDiscriminator(cfg))
            else:
                members.append(STFTDiscriminator(cfg))
        self.members = nn.ModuleList(members)

    def forward(self, x: Tensor) -> List[DiscriminatorOutput]:
        outs: List[DiscriminatorOutput] = []
        for member in self.members:
            result = member(x)
            if isinstance(result, DiscriminatorOutput):
                outs.append(result)
            else:
                outs.extend(result)
        return outs
