import math
from functools import lru_cache
from typing import Optional, Tuple

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from .exceptions import ConfigError, ModeMismatchError, NonFiniteError, ResolutionError
from .tensorcore import RMSNorm, matmul, softmax
from .tokens import SEPARATE_CHANNELS, TokenGrid

DEFAULT_BIAS_HIDDEN = 512
LOG_SPACING_BASE = math.log2(8)


def log_spaced(offsets: torch.Tensor) -> torch.Tensor:
    return torch.sign(offsets) * torch.log2(1.0 + offsets.abs()) / LOG_SPACING_BASE


@lru_cache(maxsize=None)
def relative_offsets(window_size: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    All (d_row, d_col) offsets inside a window, and for every token pair the row of that table it maps to.
    """
    span = torch.arange(-(window_size - 1), window_size, dtype=torch.float64)
    table = torch.stack(torch.meshgrid(span, span, indexing='ij'), dim=-1).reshape(-1, 2)

    coords = torch.stack(torch.meshgrid(torch.arange(window_size), torch.arange(window_size), indexing='ij'))
    coords = coords.flatten(1)
    relative = (coords[:, :, None] - coords[:, None, :]) + (window_size - 1)
    index = relative[0] * (2 * window_size - 1) + relative[1]
    return table, index


class RelPosBiasNet(nn.Module):

    def __init__(self, num_heads: int, hidden: int = DEFAULT_BIAS_HIDDEN):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(2, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, num_heads, bias=False))

    def forward(self, window_size: int) -> torch.Tensor:
        """
        Returns: [num_heads, w*w, w*w] additive bias, a function of the relative offset of each pair only
        """
        table, index = relative_offsets(window_size)
        weight = self.mlp[0].weight
        per_offset = self.mlp(log_spaced(table).to(device=weight.device, dtype=weight.dtype))
        n_tokens = window_size * window_size
        bias = per_offset[index.reshape(-1).to(weight.device)].reshape(n_tokens, n_tokens, -1)
        return bias.permute(2, 0, 1).contiguous()


def window_partition(tokens: torch.Tensor, window_size: int, shift: int = 0) -> torch.Tensor:
    """
    [N, H, W, d] -> [N * nW, w*w, d], after a cyclic roll by (-shift, -shift).
    """
    height, width = tokens.shape[1], tokens.shape[2]
    if height % window_size or width % window_size:
        raise ResolutionError(f'Token grid {height}x{width} is not divisible by window size {window_size}')
    if shift:
        tokens = torch.roll(tokens, shifts=(-shift, -shift), dims=(1, 2))
    return rearrange(tokens, 'n (h w1) (w w2) d -> (n h w) (w1 w2) d', w1=window_size, w2=window_size)


def window_reverse(windows: torch.Tensor, window_size: int, shift: int, height: int, width: int) -> torch.Tensor:
    tokens = rearrange(windows, '(n h w) (w1 w2) d -> n (h w1) (w w2) d', h=height // window_size,
                       w=width // window_size, w1=window_size, w2=window_size)
    if shift:
        tokens = torch.roll(tokens, shifts=(shift, shift), dims=(1, 2))
    return tokens


@lru_cache(maxsize=None)
def boundary_mask(window_size: int, shift: int, periodic: Tuple[bool, bool],
                  grid: Tuple[int, int]) -> torch.Tensor:
    """
    Additive [nW, w*w, w*w] mask for the shifted partition of a `grid`-sized token lattice. Along non-periodic axes
    tokens that wrapped around during the roll must not see the ones that did not.
    """
    if shift not in (0, window_size // 2):
        raise ConfigError(f'Window shift must be 0 or {window_size // 2}, got {shift}')
    height, width = grid
    labels = torch.zeros(height, width, dtype=torch.long)
    if shift:
        if not periodic[0]:
            labels[height - shift:, :] += 2
        if not periodic[1]:
            labels[:, width - shift:] += 1
    windows = rearrange(labels, '(h w1) (w w2) -> (h w) (w1 w2)', w1=window_size, w2=window_size)
    mask = torch.zeros(windows.shape[0], windows.shape[1], windows.shape[1], dtype=torch.float64)
    return mask.masked_fill(windows[:, :, None] != windows[:, None, :], float('-inf'))


@lru_cache(maxsize=None)
def padding_mask(window_size: int, shift: int, grid: Tuple[int, int], padded: Tuple[int, int]) -> torch.Tensor:
    """
    Additive mask hiding the padding tokens added to reach a multiple of the window size. A padding query still sees
    itself so no softmax row is empty.
    """
    valid = torch.zeros(padded, dtype=torch.float64)
    valid[:grid[0], :grid[1]] = 1.0
    if shift:
        valid = torch.roll(valid, shifts=(-shift, -shift), dims=(0, 1))
    windows = rearrange(valid, '(h w1) (w w2) -> (h w) (w1 w2)', w1=window_size, w2=window_size)
    hidden = (windows[:, None, :] == 0) & ~torch.eye(windows.shape[1], dtype=torch.bool)[None]
    return torch.zeros(hidden.shape, dtype=torch.float64).masked_fill(hidden, float('-inf'))


class MultiHeadAttention(nn.Module):

    def __init__(self, dim: int, num_heads: int, qkv_bias: bool = True, qk_norm: bool = True):
        super().__init__()
        if dim % num_heads:
            raise ConfigError(f'Width {dim} is not divisible by {num_heads} heads')
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim, bias=qkv_bias)
        self.q_norm = RMSNorm(self.head_dim) if qk_norm else nn.Identity()
        self.k_norm = RMSNorm(self.head_dim) if qk_norm else nn.Identity()
        self.proj = nn.Linear(dim, dim)

    def project_qkv(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        qkv = rearrange(self.qkv(x), 'b n (three h e) -> three b h n e', three=3, h=self.num_heads)
        return self.q_norm(qkv[0]), self.k_norm(qkv[1]), qkv[2]

    def attention_logits(self, x: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
        q, k, _ = self.project_qkv(x)
        return self._logits(q, k, bias)

    def _logits(self, q: torch.Tensor, k: torch.Tensor, bias: Optional[torch.Tensor]) -> torch.Tensor:
        logits = matmul(q * self.scale, k.transpose(-2, -1))
        if bias is not None:
            logits = logits + bias
        if not bool(torch.isfinite(logits).all()):
            raise NonFiniteError(f'Non-finite attention logits (shape {tuple(logits.shape)})')
        return logits

    def attend(self, x: torch.Tensor, bias: Optional[torch.Tensor] = None, mask: Optional[torch.Tensor] = None,
               group: int = 1) -> torch.Tensor:
        """
        Self-attention over the token axis of [B, n, d] sequences.

        Args:
            x: token sequences
            bias: additive [heads, n, n] bias shared by every sequence
            mask: additive [group, n, n] mask, sequence i uses mask[i % group]
            group: period of the mask along the batch axis

        """
        q, k, v = self.project_qkv(x)
        logits = self._logits(q, k, bias)
        if mask is not None:
            logits = rearrange(logits, '(b g) h n m -> b g h n m', g=group)
            logits = logits + mask.to(logits.dtype)[None, :, None]
            logits = rearrange(logits, 'b g h n m -> (b g) h n m')
        out = matmul(softmax(logits, dim=-1), v)
        return self.proj(rearrange(out, 'b h n e -> b n (h e)'))


class WindowAttention(MultiHeadAttention):

    def __init__(self, dim: int, num_heads: int, window_size: int, qkv_bias: bool = True, qk_norm: bool = True,
                 bias_hidden: int = DEFAULT_BIAS_HIDDEN):
        super().__init__(dim, num_heads, qkv_bias=qkv_bias, qk_norm=qk_norm)
        self.window_size = window_size
        self.bias_net = RelPosBiasNet(num_heads, bias_hidden)

    def relative_bias(self) -> torch.Tensor:
        return self.bias_net(self.window_size)

    def forward(self, tokens: torch.Tensor, shift: int = 0, periodic: Tuple[bool, bool] = (True, True)) -> torch.Tensor:
        """
        Windowed attention over [N, H, W, d] tokens, rolled by `shift` first. Grids that are not a multiple of the
        window size are padded with masked tokens which are stripped again afterwards.
        """
        w = self.window_size
        height, width = tokens.shape[1], tokens.shape[2]
        padded = (math.ceil(height / w) * w, math.ceil(width / w) * w)
        if padded != (height, width):
            tokens = F.pad(tokens, (0, 0, 0, padded[1] - width, 0, padded[0] - height))

        mask = None
        if shift and not all(periodic):
            mask = boundary_mask(w, shift, tuple(periodic), padded)
        if padded != (height, width):
            pad = padding_mask(w, shift, (height, width), padded)
            mask = pad if mask is None else mask + pad

        windows = window_partition(tokens, w, shift)
        n_windows = (padded[0] // w) * (padded[1] // w)
        out = self.attend(windows, bias=self.relative_bias(), mask=mask, group=n_windows)
        out = window_reverse(out, w, shift, padded[0], padded[1])
        return out[:, :height, :width]


class ChannelAttention(MultiHeadAttention):
    """
    Attention across the channel axis of separate-channel tokens, independently at every lattice site.
    """

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.dim() != 5:
            raise ModeMismatchError(f'Channel attention needs [B, C, H, W, d] tokens, got {tuple(tokens.shape)}')
        batch, _, height, width, _ = tokens.shape
        sequences = rearrange(tokens, 'b c h w d -> (b h w) c d')
        out = self.attend(sequences)
        return rearrange(out, '(b h w) c d -> b c h w d', b=batch, h=height, w=width)


def windowed_mhsa(windows: torch.Tensor, attention: WindowAttention,
                  mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    group = 1 if mask is None else mask.shape[0]
    return attention.attend(windows, bias=attention.relative_bias(), mask=mask, group=group)


def channel_axial_mhsa(grid: TokenGrid, attention: ChannelAttention) -> TokenGrid:
    if grid.mode != SEPARATE_CHANNELS:
        raise ModeMismatchError('Channel-axial attention is only defined for separate-channel token grids')
    return grid.with_tokens(attention(grid.tokens))
