"""Building blocks shared by the prior and posterior encoders."""
import math

import torch
import torch.nn.functional as F
from torch import nn


def sequence_mask(lengths: torch.Tensor, max_len: int | None = None) -> torch.Tensor:
    if max_len is None:
        max_len = int(lengths.max())
    return torch.arange(max_len, device=lengths.device)[None] < lengths[:, None]


def sinusoidal_positions(length: int, channels: int, device=None, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, device=device, dtype=torch.float32)[:, None]
    div = torch.exp(torch.arange(0, channels, 2, device=device, dtype=torch.float32) * (-math.log(10000.0) / channels))
    pe = torch.zeros(length, channels, device=device)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : channels // 2]
    return pe.to(dtype)


class ConvFFN(nn.Module):
    def __init__(self, channels, filter_channels, kernel_size=3, dropout=0.0):
        super().__init__()
        self.conv_1 = nn.Conv1d(channels, filter_channels, kernel_size, padding=kernel_size // 2)
        self.conv_2 = nn.Conv1d(filter_channels, channels, kernel_size, padding=kernel_size // 2)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask):
        # x: (B, T, C), mask: (B, T)
        m = mask.unsqueeze(1).to(x.dtype)
        h = self.conv_1(x.transpose(1, 2) * m)
        h = self.drop(torch.relu(h))
        h = self.conv_2(h * m)
        return (h * m).transpose(1, 2)


class FFTBlock(nn.Module):
    """Feed-forward Transformer block: masked self-attention + conv FFN, post-norm."""

    def __init__(self, channels, filter_channels, n_heads=2, kernel_size=3, dropout=0.1):
        super().__init__()
        self.attn = nn.MultiheadAttention(channels, n_heads, dropout=dropout, batch_first=True)
        self.norm_1 = nn.LayerNorm(channels)
        self.ffn = ConvFFN(channels, filter_channels, kernel_size, dropout)
        self.norm_2 = nn.LayerNorm(channels)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask):
        y, _ = self.attn(x, x, x, key_padding_mask=~mask, need_weights=False)
        x = self.norm_1(x + self.drop(y))
        x = self.norm_2(x + self.drop(self.ffn(x, mask)))
        return x * mask.unsqueeze(-1).to(x.dtype)


class FFTStack(nn.Module):
    def __init__(self, n_layers, channels, filter_channels, n_heads=2, kernel_size=3, dropout=0.1,
                 positions=True):
        super().__init__()
        self.positions = positions
        self.blocks = nn.ModuleList(
            FFTBlock(channels, filter_channels, n_heads, kernel_size, dropout) for _ in range(n_layers)
        )

    def forward(self, x, mask):
        if self.positions:
            x = x + sinusoidal_positions(x.shape[1], x.shape[2], x.device, x.dtype)[None]
        x = x * mask.unsqueeze(-1).to(x.dtype)
        for block in self.blocks:
            x = block(x, mask)
        return x


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of a (B, C, T) tensor."""

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.norm = nn.LayerNorm(channels, eps=eps)

    def forward(self, x):
        return self.norm(x.transpose(1, 2)).transpose(1, 2)


def masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean of ``x`` over positions where ``mask`` is true (broadcast over trailing dims)."""
    mask = mask.to(x.dtype)
    while mask.dim() < x.dim():
        mask = mask.unsqueeze(-1)
    mask = mask.expand_as(x)
    denom = mask.sum().clamp(min=1.0)
    return (x * mask).sum() / denom


def pad_sequences(seqs, pad_value=0.0):
    return torch.nn.utils.rnn.pad_sequence(list(seqs), batch_first=True, padding_value=pad_value)


def get_padding(kernel_size, dilation=1):
    return (kernel_size * dilation - dilation) // 2


def leaky(x, slope=0.1):
    return F.leaky_relu(x, slope)
