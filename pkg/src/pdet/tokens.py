from dataclasses import dataclass, replace
from typing import Optional, Sequence

import torch
from einops import rearrange
from torch import nn

from .exceptions import ChannelCountError, DimensionError, ModeMismatchError, ResolutionError
from .tensorcore import linear

MIXED_CHANNELS = 'mc'
SEPARATE_CHANNELS = 'sc'
MODES = (MIXED_CHANNELS, SEPARATE_CHANNELS,)


def expansion_rate(d: int, patch_size: int, temporal_depth: int = 1) -> float:
    return d / (patch_size ** 2 * temporal_depth)


def stage_width(d: int, stage: int, max_doubling: int) -> int:
    return d * 2 ** min(stage, max_doubling)


@dataclass
class TokenGrid:
    """
    Token lattice of one batch: [B, ty, tx, d] in mixed-channel mode, [B, C, ty, tx, d] in separate-channel mode.
    """
    tokens: torch.Tensor
    patch_size: int
    temporal_depth: int
    mode: str
    height: int
    width: int
    n_channels: int
    field_types: Optional[Sequence[str]] = None

    @property
    def grid_shape(self):
        return tuple(self.tokens.shape[-3:-1])

    @property
    def token_count(self) -> int:
        return self.tokens[0, ..., 0].numel()

    def with_tokens(self, tokens: torch.Tensor) -> 'TokenGrid':
        return replace(self, tokens=tokens)


class PatchEmbed(nn.Module):

    def __init__(self, patch_size: int, temporal_depth: int, max_channels: int, dim: int, mode: str = MIXED_CHANNELS,
                 bias: bool = True):
        super().__init__()
        if mode not in MODES:
            raise ModeMismatchError(f'Unknown channel mode {mode!r}, expected one of {MODES}')
        self.patch_size = patch_size
        self.temporal_depth = temporal_depth
        self.max_channels = max_channels
        self.mode = mode
        channels = max_channels if mode == MIXED_CHANNELS else 1
        self.proj = nn.Linear(temporal_depth * channels * patch_size ** 2, dim, bias=bias)


class PatchUnembed(nn.Module):

    def __init__(self, patch_size: int, temporal_depth: int, max_channels: int, dim: int, mode: str = MIXED_CHANNELS,
                 bias: bool = True):
        super().__init__()
        if mode not in MODES:
            raise ModeMismatchError(f'Unknown channel mode {mode!r}, expected one of {MODES}')
        self.patch_size = patch_size
        self.temporal_depth = temporal_depth
        self.max_channels = max_channels
        self.mode = mode
        channels = max_channels if mode == MIXED_CHANNELS else 1
        self.proj = nn.Linear(dim, temporal_depth * channels * patch_size ** 2, bias=bias)


def patchify(u: torch.Tensor, embed: PatchEmbed, field_types: Optional[Sequence[str]] = None) -> TokenGrid:
    """
    Split [B, T, C, H, W] fields into p x p patches and embed each one linearly.

    Mixed-channel tokens see all channels (zero-padded up to C_max), separate-channel tokens see one channel and
    share the embedding weights across channels.
    """
    if u.dim() != 5:
        raise DimensionError(f'patchify expects [B, T, C, H, W], got {tuple(u.shape)}')
    batch, depth, channels, height, width = u.shape
    p = embed.patch_size
    if height % p or width % p:
        raise ResolutionError(f'Resolution {height}x{width} is not divisible by patch size {p}')
    if depth != embed.temporal_depth:
        raise DimensionError(f'Input has temporal depth {depth}, embedding expects {embed.temporal_depth}')

    if embed.mode == MIXED_CHANNELS:
        if channels > embed.max_channels:
            raise ChannelCountError(f'{channels} channels exceed C_max={embed.max_channels} in mixed-channel mode')
        if channels < embed.max_channels:
            padding = u.new_zeros(batch, depth, embed.max_channels - channels, height, width)
            u = torch.cat([u, padding], dim=2)
        patches = rearrange(u, 'b t c (h p1) (w p2) -> b h w (t c p1 p2)', p1=p, p2=p)
    else:
        patches = rearrange(u, 'b t c (h p1) (w p2) -> b c h w (t p1 p2)', p1=p, p2=p)

    tokens = linear(patches, embed.proj.weight, embed.proj.bias)
    return TokenGrid(tokens=tokens, patch_size=p, temporal_depth=depth, mode=embed.mode, height=height, width=width,
                     n_channels=channels, field_types=field_types)


def unpatchify(grid: TokenGrid, unembed: PatchUnembed) -> torch.Tensor:
    if grid.mode != unembed.mode or grid.patch_size != unembed.patch_size:
        raise ModeMismatchError(f'Token grid ({grid.mode}, p={grid.patch_size}) does not match the output head '
                                f'({unembed.mode}, p={unembed.patch_size})')
    p = unembed.patch_size
    if grid.grid_shape != (grid.height // p, grid.width // p):
        raise DimensionError(f'Token grid {grid.grid_shape} does not cover {grid.height}x{grid.width} with p={p}')

    patches = linear(grid.tokens, unembed.proj.weight, unembed.proj.bias)
    if unembed.mode == MIXED_CHANNELS:
        fields = rearrange(patches, 'b h w (t c p1 p2) -> b t c (h p1) (w p2)', c=unembed.max_channels, p1=p, p2=p)
        return fields[:, :, :grid.n_channels]
    return rearrange(patches, 'b c h w (t p1 p2) -> b t c (h p1) (w p2)', p1=p, p2=p)


def pixel_unshuffle_down(tokens: torch.Tensor, factor: int = 2, proj: Optional[nn.Module] = None) -> torch.Tensor:
    """
    Space-to-depth on [..., ty, tx, d] tokens: (ty, tx, d) -> (ty/f, tx/f, f*f*d), then the optional projection.
    """
    height, width = tokens.shape[-3], tokens.shape[-2]
    if height % factor or width % factor:
        raise ResolutionError(f'Token grid {height}x{width} is not divisible by {factor}')
    merged = rearrange(tokens, '... (h f1) (w f2) d -> ... h w (f1 f2 d)', f1=factor, f2=factor)
    return merged if proj is None else proj(merged)


def pixel_shuffle_up(tokens: torch.Tensor, factor: int = 2, proj: Optional[nn.Module] = None) -> torch.Tensor:
    """
    Depth-to-space on [..., ty, tx, d] tokens: (ty, tx, d) -> (f*ty, f*tx, d/(f*f)), then the optional projection.
    """
    if tokens.shape[-1] % (factor * factor):
        raise DimensionError(f'Token width {tokens.shape[-1]} is not divisible by {factor * factor}')
    spread = rearrange(tokens, '... h w (f1 f2 d) -> ... (h f1) (w f2) d', f1=factor, f2=factor)
    return spread if proj is None else proj(spread)


class TokenDownsample(nn.Module):

    def __init__(self, dim_in: int, dim_out: int, factor: int = 2):
        super().__init__()
        self.factor = factor
        self.proj = nn.Linear(factor * factor * dim_in, dim_out)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return pixel_unshuffle_down(tokens, self.factor, self.proj)


class TokenUpsample(nn.Module):

    def __init__(self, dim_in: int, dim_out: int, factor: int = 2):
        super().__init__()
        if dim_in % (factor * factor):
            raise DimensionError(f'Upsampling width {dim_in} is not divisible by {factor * factor}')
        self.factor = factor
        self.proj = nn.Linear(dim_in // (factor * factor), dim_out)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return pixel_shuffle_up(tokens, self.factor, self.proj)
