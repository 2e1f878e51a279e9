"""
The PDE transformer: patch embedding, a U-shaped stack of adaLN-Zero conditioned shifted-window stages with
same-resolution skip connections, and a zero-initialized output head.
"""
import math
from contextlib import nullcontext
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import torch
from einops import rearrange
from torch import nn

from . import channel_types, pde_kinds
from .attention import DEFAULT_BIAS_HIDDEN, ChannelAttention, WindowAttention
from .common import LOGGER
from .exceptions import ChannelCountError, ConfigError, ModeMismatchError, ResolutionError, UnknownLabelError
from .tensorcore import LayerNorm
from .tokens import (MIXED_CHANNELS, MODES, SEPARATE_CHANNELS, PatchEmbed, PatchUnembed, TokenDownsample,
                     TokenUpsample, patchify, stage_width, unpatchify)

NULL_LABEL = -1
TIME_FREQUENCY_DIM = 256
TIME_SCALE = 1000.0


@dataclass
class ModelConfig:
    d: int = 96
    depth: Tuple[int, ...] = (2, 4, 4, 6, 4, 4, 2)
    num_heads: int = 16
    mlp_ratio: float = 4.0
    window_size: int = 8
    patch_size: int = 4
    class_dropout_prob: float = 0.1
    qkv_bias: bool = True
    qk_norm: bool = True
    mode: str = MIXED_CHANNELS
    max_channels: int = 2
    num_pde_classes: int = len(pde_kinds.ALL)
    num_channel_types: int = len(channel_types.ALL)
    temporal_depth: int = 1
    diffusion: bool = False
    bias_hidden: int = DEFAULT_BIAS_HIDDEN
    max_doubling: int = 2
    name: str = 'custom'

    PRESETS = ('S', 'B', 'L', 'TEST',)

    @staticmethod
    def preset(name: str, /, **overrides) -> 'ModelConfig':
        widths = {'S': 96, 'B': 192, 'L': 384}
        if name in widths:
            cfg = ModelConfig(d=widths[name], name=name)
        elif name == 'TEST':
            cfg = ModelConfig(d=16, depth=(1, 1, 1), num_heads=2, window_size=4, patch_size=4, bias_hidden=64,
                              name=name)
        else:
            raise ConfigError(f'Unknown model preset {name!r}, expected one of {ModelConfig.PRESETS}')
        return replace(cfg, **overrides).validate()

    @property
    def n_down(self) -> int:
        return len(self.depth) // 2

    @property
    def widths(self) -> List[int]:
        return [stage_width(self.d, stage, self.max_doubling) for stage in range(self.n_down + 1)]

    @property
    def input_depth(self) -> int:
        # the noisy state x_t rides along as one more input frame
        return self.temporal_depth + 1 if self.diffusion else self.temporal_depth

    @property
    def resolution_multiple(self) -> int:
        return self.patch_size * 2 ** self.n_down

    def validate(self) -> 'ModelConfig':
        problems = []
        if self.mode not in MODES:
            problems.append(f'mode {self.mode!r} must be one of {MODES}')
        if len(self.depth) % 2 != 1 or any(blocks < 1 for blocks in self.depth):
            problems.append(f'depth {self.depth} must be an odd-length list of positive block counts')
        for width in self.widths:
            if width % self.num_heads:
                problems.append(f'stage width {width} is not divisible by num_heads={self.num_heads}')
        for width in self.widths[1:]:
            if width % 4:
                problems.append(f'stage width {width} is not divisible by 4 for pixel-shuffle upsampling')
        if self.window_size < 1 or self.patch_size < 1 or self.temporal_depth < 1:
            problems.append('window_size, patch_size and temporal_depth must be positive')
        if self.max_channels < 1:
            problems.append(f'max_channels={self.max_channels} must be positive')
        if not 0.0 <= self.class_dropout_prob < 1.0:
            problems.append(f'class_dropout_prob={self.class_dropout_prob} must be in [0, 1)')
        if problems:
            raise ConfigError('; '.join(problems))
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {key: list(value) if isinstance(value, tuple) else value for key, value in asdict(self).items()}

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> 'ModelConfig':
        known = {item.name for item in fields(ModelConfig)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f'Unknown model config keys {unknown}')
        return ModelConfig(**{key: tuple(value) if isinstance(value, list) else value
                              for key, value in data.items()}).validate()


@dataclass
class Conditioning:
    """
    Per-sample conditioning labels. `pde_class` is [B] and `channel_types` is [B, C], both integer ids where
    NULL_LABEL selects the learned unconditional embedding. `diffusion_time` is [B] in [0, 1].
    """
    pde_class: Optional[torch.Tensor] = None
    channel_types: Optional[torch.Tensor] = None
    diffusion_time: Optional[torch.Tensor] = None
    periodic: Tuple[bool, bool] = (True, True)

    @staticmethod
    def from_names(pde_kind: Optional[str], field_types: Optional[Sequence[str]] = None, batch: int = 1,
                   periodic: Tuple[bool, bool] = (True, True)) -> 'Conditioning':
        pde_class = None
        if pde_kind is not None:
            pde_class = torch.full((batch,), _lookup(pde_kinds.class_id, pde_kind, 'PDE kind'), dtype=torch.long)
        types = None
        if field_types is not None:
            ids = [_lookup(channel_types.type_id, name, 'channel type') for name in field_types]
            types = torch.tensor(ids, dtype=torch.long).expand(batch, -1).clone()
        return Conditioning(pde_class=pde_class, channel_types=types, periodic=tuple(periodic))

    def with_time(self, t: Union[float, torch.Tensor], batch: Optional[int] = None) -> 'Conditioning':
        if not isinstance(t, torch.Tensor):
            size = batch or (len(self.pde_class) if self.pde_class is not None else 1)
            t = torch.full((size,), float(t))
        return replace(self, diffusion_time=t)

    def select(self, index: Union[slice, torch.Tensor]) -> 'Conditioning':
        return replace(self,
                       pde_class=None if self.pde_class is None else self.pde_class[index],
                       channel_types=None if self.channel_types is None else self.channel_types[index],
                       diffusion_time=None if self.diffusion_time is None else self.diffusion_time[index])


def _lookup(getter, name: str, what: str) -> int:
    try:
        return getter(name)
    except ValueError:
        raise UnknownLabelError(f'Unknown {what} {name!r}') from None


def drop_labels(labels: torch.Tensor, prob: float, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """
    Replace each label independently with NULL_LABEL with probability `prob`.
    """
    if prob <= 0:
        return labels
    drop = torch.rand(labels.shape, generator=generator) < prob
    return torch.where(drop.to(labels.device), torch.full_like(labels, NULL_LABEL), labels)


def timestep_features(t: torch.Tensor, dim: int = TIME_FREQUENCY_DIM, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    frequencies = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    angles = (t * TIME_SCALE)[:, None] * frequencies[None]
    return torch.cat([torch.cos(angles), torch.sin(angles)], dim=-1)


class TimestepEmbedder(nn.Module):

    def __init__(self, dim: int, frequency_dim: int = TIME_FREQUENCY_DIM):
        super().__init__()
        self.frequency_dim = frequency_dim
        self.mlp = nn.Sequential(nn.Linear(frequency_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        weight = self.mlp[0].weight
        return self.mlp(timestep_features(t.to(device=weight.device, dtype=weight.dtype), self.frequency_dim))


class LabelEmbedder(nn.Module):
    """
    Lookup table with one extra row for NULL_LABEL.
    """

    def __init__(self, num_labels: int, dim: int, what: str):
        super().__init__()
        self.num_labels = num_labels
        self.what = what
        self.table = nn.Embedding(num_labels + 1, dim)

    def forward(self, labels: torch.Tensor) -> torch.Tensor:
        if bool(((labels < NULL_LABEL) | (labels >= self.num_labels)).any()):
            raise UnknownLabelError(f'{self.what} ids {labels.tolist()} outside of [0, {self.num_labels}) and NULL')
        index = torch.where(labels == NULL_LABEL, torch.full_like(labels, self.num_labels), labels)
        return self.table(index.to(self.table.weight.device))


class ConditioningEmbedder(nn.Module):
    """
    Sums the class, diffusion-time and (separate-channel mode) channel-type embeddings. Returns [B, d] vectors in
    mixed-channel mode and one vector per channel, [B * C, d], in separate-channel mode.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.mode = cfg.mode
        self.dropout_prob = cfg.class_dropout_prob
        self.pde_class = LabelEmbedder(cfg.num_pde_classes, cfg.d, 'PDE class')
        self.channel_type = LabelEmbedder(cfg.num_channel_types, cfg.d, 'channel type') \
            if cfg.mode == SEPARATE_CHANNELS else None
        self.time = TimestepEmbedder(cfg.d) if cfg.diffusion else None

    def forward(self, cond: Conditioning, batch: int, n_channels: int,
                generator: Optional[torch.Generator] = None) -> torch.Tensor:
        pde_class = cond.pde_class
        if pde_class is None:
            pde_class = torch.full((batch,), NULL_LABEL, dtype=torch.long)
        if self.training:
            pde_class = drop_labels(pde_class, self.dropout_prob, generator)
        vector = self.pde_class(pde_class)

        if self.time is not None:
            if cond.diffusion_time is None:
                raise ModeMismatchError('A diffusion-mode model needs cond.diffusion_time')
            vector = vector + self.time(cond.diffusion_time)

        if self.channel_type is None:
            return vector

        types = cond.channel_types
        if types is None:
            types = torch.full((batch, n_channels), NULL_LABEL, dtype=torch.long)
        if tuple(types.shape) != (batch, n_channels):
            raise ChannelCountError(f'{tuple(types.shape)} channel-type labels for {n_channels} channels')
        if self.training:
            types = drop_labels(types, self.dropout_prob, generator)
        per_channel = vector[:, None, :] + self.channel_type(types)
        return rearrange(per_channel, 'b c d -> (b c) d')


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale) + shift


class Mlp(nn.Module):

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class AdaLNZeroBlock(nn.Module):
    """
    Shifted-window transformer block whose norms are modulated by regressed (shift, scale) pairs and whose
    sublayer outputs are multiplied by regressed gates. The regression head starts at zero, so does every gate.

    In separate-channel mode an extra channel-axial attention sublayer couples the per-channel token lattices.
    """

    def __init__(self, dim: int, cond_dim: int, cfg: ModelConfig, shift: int):
        super().__init__()
        self.shift = shift
        self.separate_channels = cfg.mode == SEPARATE_CHANNELS
        self.norm1 = LayerNorm(dim, elementwise_affine=False)
        self.attn = WindowAttention(dim, cfg.num_heads, cfg.window_size, qkv_bias=cfg.qkv_bias, qk_norm=cfg.qk_norm,
                                    bias_hidden=cfg.bias_hidden)
        self.norm2 = LayerNorm(dim, elementwise_affine=False)
        self.mlp = Mlp(dim, int(dim * cfg.mlp_ratio))
        n_sublayers = 2
        if self.separate_channels:
            self.norm3 = LayerNorm(dim, elementwise_affine=False)
            self.channel_attn = ChannelAttention(dim, cfg.num_heads, qkv_bias=False, qk_norm=cfg.qk_norm)
            n_sublayers = 3
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(cond_dim, 3 * n_sublayers * dim))

    def forward(self, x: torch.Tensor, c: torch.Tensor, periodic: Tuple[bool, bool] = (True, True)) -> torch.Tensor:
        """
        Args:
            x: [B, ty, tx, D] tokens, or [B, C, ty, tx, D] in separate-channel mode
            c: conditioning vectors, [B, d] or [B * C, d]
            periodic: per-axis boundary flags

        """
        batch_shape = x.shape[:-3]
        flat = x.reshape(-1, *x.shape[-3:])
        params = self.modulation(c)[:, None, None, :].chunk(9 if self.separate_channels else 6, dim=-1)
        shift_msa, scale_msa, gate_msa, shift_mlp, scale_mlp, gate_mlp = params[:6]

        flat = flat + gate_msa * self.attn(modulate(self.norm1(flat), shift_msa, scale_msa), self.shift, periodic)
        flat = flat + gate_mlp * self.mlp(modulate(self.norm2(flat), shift_mlp, scale_mlp))
        if not self.separate_channels:
            return flat.reshape(*batch_shape, *flat.shape[-3:])

        shift_ch, scale_ch, gate_ch = (param.reshape(*batch_shape, 1, 1, -1) for param in params[6:])
        x = flat.reshape(*batch_shape, *flat.shape[-3:])
        return x + gate_ch * self.channel_attn(modulate(self.norm3(x), shift_ch, scale_ch))


class Stage(nn.Module):

    def __init__(self, n_blocks: int, dim: int, cond_dim: int, cfg: ModelConfig):
        super().__init__()
        shifts = (0, cfg.window_size // 2)
        self.blocks = nn.ModuleList([AdaLNZeroBlock(dim, cond_dim, cfg, shift=shifts[index % 2])
                                     for index in range(n_blocks)])

    def forward(self, x: torch.Tensor, c: torch.Tensor, periodic: Tuple[bool, bool]) -> torch.Tensor:
        for block in self.blocks:
            x = block(x, c, periodic)
        return x


class DecoderStage(Stage):
    """
    Upsample, fuse with the encoder tokens of the same resolution (concatenate, then project back), run blocks.
    """

    def __init__(self, n_blocks: int, dim: int, dim_below: int, cond_dim: int, cfg: ModelConfig):
        super().__init__(n_blocks, dim, cond_dim, cfg)
        self.up = TokenUpsample(dim_below, dim)
        self.fuse = nn.Linear(2 * dim, dim)

    def forward(self, x: torch.Tensor, c: torch.Tensor, periodic: Tuple[bool, bool],
                skip: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = self.fuse(torch.cat([self.up(x), skip], dim=-1))
        return super().forward(x, c, periodic)


class FinalLayer(nn.Module):

    def __init__(self, dim: int, cond_dim: int):
        super().__init__()
        self.norm = LayerNorm(dim, elementwise_affine=False)
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(cond_dim, 2 * dim))

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        batch_shape = x.shape[:-3]
        shift, scale = self.modulation(c)[:, None, None, :].chunk(2, dim=-1)
        flat = modulate(self.norm(x.reshape(-1, *x.shape[-3:])), shift, scale)
        return flat.reshape(*batch_shape, *flat.shape[-3:])


class PdeTransformer(nn.Module):

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg.validate()
        widths = cfg.widths
        n_down = cfg.n_down
        self.embed = PatchEmbed(cfg.patch_size, cfg.input_depth, cfg.max_channels, cfg.d, mode=cfg.mode)
        self.conditioning = ConditioningEmbedder(cfg)
        self.encoder = nn.ModuleList([Stage(cfg.depth[stage], widths[stage], cfg.d, cfg) for stage in range(n_down)])
        self.down = nn.ModuleList([TokenDownsample(widths[stage], widths[stage + 1]) for stage in range(n_down)])
        self.bottleneck = Stage(cfg.depth[n_down], widths[n_down], cfg.d, cfg)
        # decoder[stage] runs at the resolution of encoder[stage]
        self.decoder = nn.ModuleList([DecoderStage(cfg.depth[len(cfg.depth) - 1 - stage], widths[stage],
                                                   widths[stage + 1], cfg.d, cfg) for stage in range(n_down)])
        self.final = FinalLayer(cfg.d, cfg.d)
        self.unembed = PatchUnembed(cfg.patch_size, 1, cfg.max_channels, cfg.d, mode=cfg.mode)

    def initialize_weights(self):
        def basic_init(module: nn.Module):
            if isinstance(module, nn.Linear):
                nn.init.xavier_uniform_(module.weight)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, nn.Embedding):
                nn.init.normal_(module.weight, std=0.02)

        self.apply(basic_init)
        for module in self.modules():
            if isinstance(module, (AdaLNZeroBlock, FinalLayer)):
                nn.init.zeros_(module.modulation[-1].weight)
                nn.init.zeros_(module.modulation[-1].bias)
        nn.init.zeros_(self.unembed.proj.weight)
        nn.init.zeros_(self.unembed.proj.bias)

    def forward(self, u_in: torch.Tensor, cond: Conditioning, x_t: Optional[torch.Tensor] = None,
                generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """
        Predict the next snapshot (supervised) or the flow velocity at the noisy state `x_t` (diffusion).

        Args:
            u_in: [B, T, C, H, W] preceding snapshots
            cond: conditioning labels, `diffusion_time` required in diffusion mode
            x_t: [B, 1, C, H, W] noisy state, diffusion mode only
            generator: random stream for label dropout while training

        Returns: [B, 1, C, H, W]

        """
        cfg = self.cfg
        batch, _, n_channels, height, width = u_in.shape
        multiple = cfg.resolution_multiple
        if height % multiple or width % multiple:
            raise ResolutionError(f'Resolution {height}x{width} must be divisible by p * 2^{cfg.n_down} = {multiple}')
        if cfg.diffusion != (x_t is not None):
            raise ModeMismatchError(f'x_t must be given exactly when the model runs in diffusion mode '
                                    f'(diffusion={cfg.diffusion})')
        if cfg.mode == SEPARATE_CHANNELS and cond.channel_types is not None \
                and cond.channel_types.shape[-1] != n_channels:
            raise ModeMismatchError(f'{cond.channel_types.shape[-1]} channel types for {n_channels} input channels')
        if x_t is not None:
            u_in = torch.cat([u_in, x_t], dim=1)

        c = self.conditioning(cond, batch, n_channels, generator)
        periodic = tuple(cond.periodic)
        grid = patchify(u_in, self.embed)

        x = grid.tokens
        skips = []
        for stage, down in zip(self.encoder, self.down):
            x = stage(x, c, periodic)
            skips.append(x)
            x = down(x)
        x = self.bottleneck(x, c, periodic)
        for stage in reversed(range(cfg.n_down)):
            x = self.decoder[stage](x, c, periodic, skip=skips[stage])

        x = self.final(x, c)
        return unpatchify(grid.with_tokens(x), self.unembed)


def build(cfg: ModelConfig, seed: int = 0, device: Optional[Union[str, torch.device]] = None) -> PdeTransformer:
    """
    Instantiate and initialize a model. The same seed always yields bitwise identical parameters. Building on the
    'meta' device allocates nothing and is meant for parameter counting.
    """
    on_meta = device is not None and torch.device(device).type == 'meta'
    placement = torch.device(device) if device is not None else nullcontext()
    with torch.random.fork_rng(devices=[]), placement:
        torch.manual_seed(seed)
        model = PdeTransformer(cfg)
        if not on_meta:
            model.initialize_weights()
    LOGGER.debug(f'Built {cfg.name} model with {sum(p.numel() for p in model.parameters())} parameters')
    return model


def token_counts(cfg: ModelConfig, resolution: Tuple[int, int], n_channels: int = 1) -> List[int]:
    """
    Spatio-temporal token count at each resolution level, finest first.
    """
    height, width = resolution[0] // cfg.patch_size, resolution[1] // cfg.patch_size
    per_lattice = n_channels if cfg.mode == SEPARATE_CHANNELS else 1
    counts = []
    for _ in range(cfg.n_down + 1):
        counts.append(per_lattice * height * width)
        height, width = height // 2, width // 2
    return counts


