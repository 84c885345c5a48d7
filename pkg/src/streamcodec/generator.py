"""Upsampling decoders: the symmetric AE decoder and the vocoder variants.

All variants share the same skeleton (input conv, per-stage transposed
upsampling, per-stage block, output conv + tanh) and differ only in the
block: residual units for ``sym``, multi-receptive-field fusion for
``v0``/``v1``/``v2``. The v1/v2 blocks evaluate their three equal-kernel
branches as one grouped convolution over a channel-tiled input, which is
mathematically identical to looping over the branches.
"""

from typing import List, Tuple

import torch
import torch.nn as nn

from .config import DecoderConfig
from .layers import CausalConv1d, CausalConvTranspose1d, ResidualUnit, make_activation

Tensor = torch.Tensor


class ResidualBranch(nn.Module):
    """Stack of dilated causal convs with residual adds; one MRF branch.

    With ``groups > 1`` and channel-tiled input this computes ``groups``
    independent branches at once.
    """

    def __init__(
        self,
        channels: int,
        kernel_size: int,
        dilations: Tuple[int, ...],
        activation: str,
        activation_params: dict,
        groups: int = 1,
    ):
        super().__init__()
        self.acts = nn.ModuleList(
            [make_activation(activation, **activation_params) for _ in dilations]
        )
        self.convs = nn.ModuleList(
            [
                CausalConv1d(channels, channels, kernel_size, dilation=d, groups=groups)
                for d in dilations
            ]
        )

    def forward(self, x: Tensor) -> Tensor:
        for act, conv in zip(self.acts, self.convs):
            x = x + conv(act(x))
        return x

    def init_states(self, batch: int, device=None) -> List[Tensor]:
        return [conv.init_state(batch, device) for conv in self.convs]

    def step(self, x: Tensor, states: List[Tensor]) -> Tuple[Tensor, List[Tensor]]:
        new_states = []
        for act, conv, state in zip(self.acts, self.convs, states):
            h, s = conv.step(act(x), state)
            x = x + h
            new_states.append(s)
        return x, new_states


class MRFBlock(nn.Module):
    """Multi-receptive-field fusion: mean of parallel residual branches.

    variant v0 keeps distinct branch kernels; v1/v2 share one kernel and
    collapse the branch loop into a single grouped convolution.
    """

    def __init__(self, channels: int, cfg: DecoderConfig):
        super().__init__()
        self.variant = cfg.variant
        if cfg.variant == "v0":
            self.num_branches = len(cfg.branch_kernels)
            self.branches = nn.ModuleList(
                [
                    ResidualBranch(
                        channels,
                        k,
                        cfg.branch_dilations,
                        cfg.activation,
                        cfg.activation_params,
                    )
                    for k in cfg.branch_kernels
                ]
            )
            self.grouped = None
        else:
            self.num_branches = cfg.num_groups
            self.branches = None
            self.grouped = ResidualBranch(
                channels * cfg.num_groups,
                cfg.resolved_group_kernel(),
                cfg.branch_dilations,
                cfg.activation,
                cfg.activation_params,
                groups=cfg.num_groups,
            )
        self.channels = channels

    @property
    def num_states(self) -> int:
        if self.branches is not None:
            return sum(len(b.convs) for b in self.branches)
        return len(self.grouped.convs)

    def _fuse(self, tiled: Tensor) -> Tensor:
        b, _, t = tiled.shape
        return tiled.view(b, self.num_branches, self.channels, t).mean(dim=1)

    def forward(self, x: Tensor) -> Tensor:
        if self.branches is not None:
            out = self.branches[0](x)
            for branch in self.branches[1:]:
                out = out + branch(x)
            return out / self.num_branches
        tiled = x.repeat(1, self.num_branches, 1)
        return self._fuse(self.grouped(tiled))

    def init_states(self, batch: int, device=None) -> List[Tensor]:
        if self.branches is not None:
            states: List[Tensor] = []
            for branch in self.branches:
                states.extend(branch.init_states(batch, device))
            return states
        return self.grouped.init_states(batch, device)

    def step(self, x: Tensor, states: List[Tensor]) -> Tuple[Tensor, List[Tensor]]:
        if self.branches is not None:
            new_states: List[Tensor] = []
            out = None
            i = 0
            for branch in self.branches:
                n = len(branch.convs)
                y, updated = branch.step(x, states[i : i + n])
                new_states.extend(updated)
                i += n
                out = y if out is None else out + y
            return out / self.num_branches, new_states
        tiled = x.repeat(1, self.num_branches, 1)
        y, new_states = self.grouped.step(tiled, states)
        return self._fuse(y), new_states


class Decoder(nn.Module):
    """Latent frames -> waveform at frame_count * hop samples, tanh output."""

    def __init__(self, cfg: DecoderConfig, code_dim: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.hop = cfg.hop
        ch = cfg.channels
        self.input_conv = CausalConv1d(code_dim, ch, cfg.input_kernel)
        ups = []
        blocks = []
        acts = []
        for factor in cfg.upsample_factors:
            out_ch = max(ch // 2, cfg.min_channels)
            acts.append(make_activation(cfg.activation, **cfg.activation_params))
            ups.append(CausalConvTranspose1d(ch, out_ch, kernel_size=2 * factor, stride=factor))
            if cfg.variant == "sym":
                blocks.append(
                    nn.ModuleList(
                        [
                            ResidualUnit(
                                out_ch,
                                cfg.residual_kernel,
                                dilation=3 ** (j % 3),
                                activation=cfg.activation,
                                activation_params=cfg.activation_params,
                            )
                            for j in range(cfg.num_blocks_per_stage)
                        ]
                    )
                )
            else:
                blocks.append(MRFBlock(out_ch, cfg))
            ch = out_ch
        self.ups = nn.ModuleList(ups)
        self.stage_acts = nn.ModuleList(acts)
        self.blocks = nn.ModuleList(blocks)
        self.output_act = make_activation(cfg.activation, **cfg.activation_params)
        self.output_conv = CausalConv1d(ch, 1, cfg.output_kernel)

    def _run_block(self, block, h: Tensor) -> Tensor:
        if isinstance(block, MRFBlock):
            return block(h)
        for unit in block:
            h = unit(h)
        return h

    def forward(self, z: Tensor) -> Tensor:
        """z: (B, code_dim, F) -> (B, 1, F * hop)."""
        h = self.input_conv(z)
        for act, up, block in zip(self.stage_acts, self.ups, self.blocks):
            h = up(act(h))
            h = self._run_block(block, h)
        return torch.tanh(self.output_conv(self.output_act(h)))

    def init_states(self, batch: int, device=None) -> List[Tensor]:
        states = [self.input_conv.init_state(batch, device)]
        for up, block in zip(self.ups, self.blocks):
            states.append(up.init_state(batch, device))
            if isinstance(block, MRFBlock):
                states.extend(block.init_states(batch, device))
            else:
                for unit in block:
                    states.extend(unit.init_states(batch, device))
        states.append(self.output_conv.init_state(batch, device))
        return states

    def step(self, z: Tensor, states: List[Tensor]) -> Tuple[Tensor, List[Tensor]]:
        new_states: List[Tensor] = []
        h, s = self.input_conv.step(z, states[0])
        new_states.append(s)
        i = 1
        for act, up, block in zip(self.stage_acts, self.ups, self.blocks):
            h, s = up.step(act(h), states[i])
            new_states.append(s)
            i += 1
            if isinstance(block, MRFBlock):
                n = block.num_states
                h, updated = block.step(h, states[i : i + n])
                new_states.extend(updated)
                i += n
            else:
                for unit in block:
                    h, pair = unit.step(h, states[i : i + 2])
                    new_states.extend(pair)
                    i += 2
        h, s = self.output_conv.step(self.output_act(h), states[i])
        new_states.append(s)
        return torch.tanh(h), new_states
