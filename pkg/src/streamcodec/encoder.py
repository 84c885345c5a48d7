"""Causal downsampling encoder: waveform -> latent frames at 1/hop rate."""

from typing import List, Tuple

import torch
import torch.nn as nn

from .config import EncoderConfig
from .layers import CausalConv1d, ResidualUnit

Tensor = torch.Tensor


class Encoder(nn.Module):
    """Strided causal conv stack.

    Each stage runs ``num_blocks_per_stage`` residual units (dilations
    cycling 1, 3, 9) followed by a stride-f conv doubling the channel
    count. Latent frame t depends only on samples <= t * hop.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.hop = cfg.hop
        ch = cfg.base_channels
        self.input_conv = CausalConv1d(1, ch, cfg.input_kernel)
        blocks = []
        downs = []
        for factor in cfg.downsample_factors:
            blocks.append(
                nn.ModuleList(
                    [
                        ResidualUnit(
                            ch,
                            cfg.residual_kernel,
                            dilation=3 ** (j % 3),
                            activation=cfg.activation,
                            activation_params=cfg.activation_params,
                        )
                        for j in range(cfg.num_blocks_per_stage)
                    ]
                )
            )
            downs.append(CausalConv1d(ch, ch * 2, kernel_size=2 * factor, stride=factor))
            ch *= 2
        self.blocks = nn.ModuleList(blocks)
        self.downs = nn.ModuleList(downs)
        self.out_channels = ch

    def forward(self, x: Tensor) -> Tensor:
        """x: (B, 1, T) -> (B, C, ceil(T / hop)); pads T up to a hop multiple."""
        remainder = x.shape[-1] % self.hop
        if remainder:
            x = torch.nn.functional.pad(x, (0, self.hop - remainder))
        h = self.input_conv(x)
        for units, down in zip(self.blocks, self.downs):
            for unit in units:
                h = unit(h)
            h = down(h)
        return h

    def init_states(self, batch: int, device=None) -> List[Tensor]:
        states = [self.input_conv.init_state(batch, device)]
        for units, down in zip(self.blocks, self.downs):
            for unit in units:
                states.extend(unit.init_states(batch, device))
            states.append(down.init_state(batch, device))
        return states

    def step(self, x: Tensor, states: List[Tensor]) -> Tuple[Tensor, List[Tensor]]:
        """Chunked forward; chunk length must be a multiple of the hop."""
        if x.shape[-1] % self.hop != 0:
            raise ValueError("streaming encoder chunks must be hop-aligned")
        new_states: List[Tensor] = []
        h, s = self.input_conv.step(x, states[0])
        new_states.append(s)
        i = 1
        for units, down in zip(self.blocks, self.downs):
            for unit in units:
                h, pair = unit.step(h, states[i : i + 2])
                new_states.extend(pair)
                i += 2
            h, s = down.step(h, states[i])
            new_states.append(s)
            i += 1
        return h, new_states
