"""Neural building blocks for the encoders and decoder.

Feature maps are tensors shaped (..., channels, time); every statistic here
is taken over the trailing time axis only, so the same code serves batched
and unbatched maps. Convolutions pad circularly (via modular indexing), so
a time-constant shift in the input stays exactly time-constant at the
output and instance normalization can remove it completely.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import NumericError, SizeError

DEFAULT_EPS = 1e-5
LEAKY_SLOPE = 0.2


def activation(x: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(x, LEAKY_SLOPE)


def instance_norm(m: torch.Tensor, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """Per-channel normalization over time: (m - mean) / sqrt(var + eps).

    Variance is the population variance (divide by W). Channel statistics
    (any per-channel shift and positive scale) are removed up to the eps
    term.
    """
    if m.shape[-1] < 1:
        raise SizeError("instance_norm needs at least one time step")
    if not torch.isfinite(m).all():
        raise NumericError("instance_norm input contains non-finite values")
    mu = m.mean(dim=-1, keepdim=True)
    var = m.var(dim=-1, unbiased=False, keepdim=True)
    return (m - mu) / torch.sqrt(var + eps)


def adaptive_instance_norm(m: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor,
                           eps: float = DEFAULT_EPS) -> torch.Tensor:
    """Instance norm followed by a per-channel affine supplied by the caller.

    gamma/beta are shaped (..., C) matching m's (..., C, W) channels.
    """
    if gamma.shape[-1] != m.shape[-2] or beta.shape[-1] != m.shape[-2]:
        raise SizeError(
            f"affine channels {tuple(gamma.shape)} do not match feature map "
            f"{tuple(m.shape)}")
    return gamma.unsqueeze(-1) * instance_norm(m, eps) + beta.unsqueeze(-1)


def avg_pool_over_time(m: torch.Tensor) -> torch.Tensor:
    """Mean over the time axis: (..., C, W) -> (..., C)."""
    if m.shape[-1] < 1:
        raise SizeError("avg_pool_over_time needs at least one time step")
    return m.mean(dim=-1)


def pixel_shuffle_1d(m: torch.Tensor, r: int) -> torch.Tensor:
    """Rearrange channel groups into time: (..., C, W) -> (..., C/r, W*r).

    out[..., c, w*r + k] = m[..., c*r + k, w]; a bijection on the values.
    """
    c, w = m.shape[-2], m.shape[-1]
    if c % r != 0:
        raise SizeError(f"channels {c} not divisible by shuffle factor {r}")
    lead = m.shape[:-2]
    out = m.reshape(*lead, c // r, r, w).transpose(-1, -2)
    return out.reshape(*lead, c // r, w * r)


def pixel_unshuffle_1d(m: torch.Tensor, r: int) -> torch.Tensor:
    """Inverse of pixel_shuffle_1d."""
    c, w = m.shape[-2], m.shape[-1]
    if w % r != 0:
        raise SizeError(f"time {w} not divisible by shuffle factor {r}")
    lead = m.shape[:-2]
    out = m.reshape(*lead, c, w // r, r).transpose(-1, -2)
    return out.reshape(*lead, c * r, w // r)


def dropout(m: torch.Tensor, rate: float, rng: torch.Generator | None,
            train_mode: bool) -> torch.Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not train_mode or rate == 0.0:
        return m
    if rng is None:
        raise ValueError("dropout in train mode needs a caller-supplied generator")
    keep = (torch.rand(m.shape, generator=rng, device=m.device) >= rate).to(m.dtype)
    return m * keep / (1.0 - rate)


def dense(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise SizeError(f"dense input {x.shape[-1]} does not match weight {tuple(weight.shape)}")
    return F.linear(x, weight, bias)


class Conv1d(nn.Module):
    """1-D convolution with circular "same" padding and optional stride.

    Padding uses modular time indices, so it works for any kernel size and
    any input length >= 1; output time is ceil(W / stride).
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, bias: bool = True):
        super().__init__()
        self.stride = stride
        self.kernel_size = kernel_size
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel_size))
        # A bias whose only path forward is linear ops into an instance norm
        # is cancelled exactly; callers drop it there (bias=False).
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        bound = math.sqrt(1.0 / (in_channels * kernel_size))
        nn.init.uniform_(self.weight, -bound, bound)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] < 1:
            raise SizeError("convolution input has no time steps")
        w = x.shape[-1]
        pad_left = (self.kernel_size - 1) // 2
        pad_right = self.kernel_size // 2
        idx = torch.arange(-pad_left, w + pad_right, device=x.device) % w
        return F.conv1d(x.index_select(-1, idx), self.weight, self.bias,
                        stride=self.stride)


class ConvBank(nn.Module):
    """Parallel convolutions with kernel sizes 1..K concatenated over channels.

    Captures multi-scale temporal context; output has K * branch_channels
    channels and the input's time length. The activation is applied after
    concatenation ("linear" skips it so a normalization can sit in between).
    """

    def __init__(self, in_channels: int, branch_channels: int, max_kernel: int,
                 act: str = "leaky", bias: bool = True):
        super().__init__()
        self.convs = nn.ModuleList(
            [Conv1d(in_channels, branch_channels, k, bias=bias)
             for k in range(1, max_kernel + 1)])
        self.act = act

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = torch.cat([conv(x) for conv in self.convs], dim=-2)
        return activation(out) if self.act == "leaky" else out


class ConvBlock(nn.Module):
    """conv -> (instance norm) -> activation -> dropout."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, use_in: bool = False, dropout_rate: float = 0.0,
                 eps: float = DEFAULT_EPS):
        super().__init__()
        self.conv = Conv1d(in_channels, out_channels, kernel_size, stride,
                           bias=not use_in)
        self.use_in = use_in
        self.dropout_rate = dropout_rate
        self.eps = eps

    def forward(self, x: torch.Tensor, rng: torch.Generator | None = None,
                taps: dict | None = None, tap_key: str = "") -> torch.Tensor:
        h = self.conv(x)
        if self.use_in:
            h = instance_norm(h, self.eps)
            if taps is not None:
                taps[tap_key] = h
        h = activation(h)
        return dropout(h, self.dropout_rate, rng, self.training)


class ResidualDense(nn.Module):
    """x + W2 act(W1 x), with dropout after the activation."""

    def __init__(self, dim: int, dropout_rate: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)
        self.dropout_rate = dropout_rate

    def forward(self, x: torch.Tensor, rng: torch.Generator | None = None) -> torch.Tensor:
        h = activation(self.fc1(x))
        h = dropout(h, self.dropout_rate, rng, self.training)
        return x + self.fc2(h)
