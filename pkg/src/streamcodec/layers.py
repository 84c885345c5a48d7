"""Causal convolution primitives shared by the encoder, decoders, and stream runtime.

Every layer here obeys one-side (left) padding: an output at time t depends
only on inputs at times <= t. Each layer also provides an explicit streaming
step that threads a history tensor and computes exactly the sums of the
batch forward (equal up to float accumulation order).
"""

import contextlib
from typing import List, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

Tensor = torch.Tensor


@contextlib.contextmanager
def length_stable_kernels():
    """Minimize input-length-dependent float variation in conv kernels.

    oneDNN picks different blocking per input length, so the same output
    position can differ at ~1e-6 between a chunked and a batch pass; the
    fallback kernels keep that variation at the last-bit level (~1e-7).
    Code indices are unaffected either way because codebook decision
    margins are orders of magnitude wider. All inference paths run inside
    this context; training does not need it.
    """
    prev = torch.backends.mkldnn.enabled
    torch.backends.mkldnn.enabled = False
    try:
        yield
    finally:
        torch.backends.mkldnn.enabled = prev


class CausalConv1d(nn.Module):
    """Conv1d with left-only zero padding.

    Output length is ceil(T / stride); out[t] never reads inputs after
    t * stride. ``step`` consumes chunks whose length is a multiple of
    the stride and carries the (kernel - 1) * dilation rightmost inputs.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        dilation: int = 1,
        groups: int = 1,
        bias: bool = True,
    ):
        super().__init__()
        self.conv = nn.Conv1d(
            in_channels,
            out_channels,
            kernel_size,
            stride=stride,
            dilation=dilation,
            groups=groups,
            bias=bias,
        )
        self.left_pad = (kernel_size - 1) * dilation

    @property
    def stride(self) -> int:
        return self.conv.stride[0]

    @property
    def in_channels(self) -> int:
        return self.conv.in_channels

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(F.pad(x, (self.left_pad, 0)))

    def init_state(self, batch: int, device=None) -> Tensor:
        return torch.zeros(batch, self.conv.in_channels, self.left_pad, device=device)

    def step(self, x: Tensor, state: Tensor) -> Tuple[Tensor, Tensor]:
        if x.shape[-1] % self.stride != 0:
            raise ValueError(
                f"streaming chunk length {x.shape[-1]} not divisible by stride {self.stride}"
            )
        buf = torch.cat([state, x], dim=-1)
        y = self.conv(buf)
        new_state = buf[..., buf.shape[-1] - self.left_pad :]
        return y, new_state


class CausalConvTranspose1d(nn.Module):
    """Transposed conv emitting exactly stride * T samples.

    The right tail (kernel - stride samples) is trimmed so output t
    depends only on input frames <= floor(t / stride): zero algorithmic
    lookahead. ``step`` carries the trimmed tail and overlap-adds it into
    the next chunk, which reproduces the batch output exactly.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int):
        super().__init__()
        if kernel_size < stride:
            raise ValueError("kernel_size must be >= stride for gap-free upsampling")
        self.conv = nn.ConvTranspose1d(
            in_channels, out_channels, kernel_size, stride=stride, bias=False
        )
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.kernel_size = kernel_size
        self.out_channels = out_channels

    @property
    def stride(self) -> int:
        return self.conv.stride[0]

    @property
    def tail_len(self) -> int:
        return self.kernel_size - self.stride

    def forward(self, x: Tensor) -> Tensor:
        n = x.shape[-1] * self.stride
        y = self.conv(x)[..., :n]
        return y + self.bias.view(1, -1, 1)

    def init_state(self, batch: int, device=None) -> Tensor:
        return torch.zeros(batch, self.out_channels, self.tail_len, device=device)

    def step(self, x: Tensor, state: Tensor) -> Tuple[Tensor, Tensor]:
        n = x.shape[-1] * self.stride
        y = self.conv(x)  # (T - 1) * stride + kernel samples
        if self.tail_len > 0:
            y[..., : self.tail_len] += state
            new_state = y[..., n:].clone()
        else:
            new_state = state
        out = y[..., :n] + self.bias.view(1, -1, 1)
        return out, new_state


def make_activation(name: str, **params) -> nn.Module:
    """Instantiate an activation by torch.nn class name (e.g. 'LeakyReLU')."""
    return getattr(nn, name)(**params)


class ResidualUnit(nn.Module):
    """Dilated causal residual unit: act -> conv(k, d) -> act -> conv(1x1), + skip."""

    def __init__(
        self,
        channels: int,
        kernel_size: int = 7,
        dilation: int = 1,
        activation: str = "ELU",
        activation_params: dict = None,
    ):
        super().__init__()
        params = activation_params or {}
        self.act1 = make_activation(activation, **params)
        self.conv1 = CausalConv1d(channels, channels, kernel_size, dilation=dilation)
        self.act2 = make_activation(activation, **params)
        self.conv2 = CausalConv1d(channels, channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(self.act2(self.conv1(self.act1(x))))

    def init_states(self, batch: int, device=None) -> List[Tensor]:
        return [self.conv1.init_state(batch, device), self.conv2.init_state(batch, device)]

    def step(self, x: Tensor, states: List[Tensor]) -> Tuple[Tensor, List[Tensor]]:
        h, s1 = self.conv1.step(self.act1(x), states[0])
        h, s2 = self.conv2.step(self.act2(h), states[1])
        return x + h, [s1, s2]


def init_conv_weights(module: nn.Module, leaky_slope: float = 0.2) -> None:
    """Fan-in-scaled normal init for conv kernels, zero biases.

    A fixed absolute std collapses activations through narrow layers (the
    first conv has fan-in 7), flooring the log-mel loss and zeroing its
    gradient; scaling by fan-in keeps signal magnitude stable at any
    width. Deterministic under the run seed.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv1d, nn.ConvTranspose1d, nn.Conv2d)):
            nn.init.kaiming_normal_(m.weight, a=leaky_slope, nonlinearity="leaky_relu")
            m.weight.data.mul_(0.5)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
