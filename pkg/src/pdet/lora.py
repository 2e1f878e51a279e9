import fnmatch
import math
from typing import Dict, Optional, Sequence

import torch
from torch import nn

from .common import LOGGER
from .exceptions import ConfigError, LoraTargetNotFoundError
from .tensorcore import linear

DEFAULT_TARGETS = ('*.attn.qkv', '*.attn.proj',)


class LoraLinear(nn.Module):
    """
    Frozen linear layer plus a trainable low-rank update: y = W0 x + (alpha / r) B A x.
    """

    def __init__(self, base: nn.Linear, rank: int, alpha: Optional[float] = None):
        super().__init__()
        if rank < 1:
            raise ConfigError(f'LoRA rank must be >= 1, got {rank}')
        self.base = base
        self.rank = rank
        self.alpha = float(rank if alpha is None else alpha)
        self.scaling = self.alpha / rank
        for param in self.base.parameters():
            param.requires_grad_(False)

        factory = {'dtype': base.weight.dtype, 'device': base.weight.device}
        self.lora_A = nn.Parameter(torch.empty(rank, base.in_features, **factory))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank, **factory))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        update = linear(linear(x, self.lora_A), self.lora_B)
        return self.base(x) + self.scaling * update


def saves_parameters(rank: int, d: int, k: int) -> bool:
    return rank < d * k / (d + k)


def attach_lora(model: nn.Module, rank: int, alpha: Optional[float] = None,
                targets: Sequence[str] = DEFAULT_TARGETS) -> Dict[str, LoraLinear]:
    """
    Freeze every parameter of `model` and wrap the linear layers whose qualified names match one of the glob
    `targets` in a LoraLinear, in place.

    Returns: the attached adapters keyed by module name

    """
    matched = [name for name, module in model.named_modules()
               if isinstance(module, nn.Linear) and any(fnmatch.fnmatchcase(name, pattern) for pattern in targets)]
    if not matched:
        raise LoraTargetNotFoundError(f'No linear layer matches {list(targets)}')

    for param in model.parameters():
        param.requires_grad_(False)

    adapters = {}
    for name in matched:
        parent_name, _, child_name = name.rpartition('.')
        parent = model.get_submodule(parent_name) if parent_name else model
        base = getattr(parent, child_name)
        if not saves_parameters(rank, base.out_features, base.in_features):
            LOGGER.warning(f'LoRA rank {rank} on {name} ({base.out_features}x{base.in_features}) saves no parameters')
        adapter = LoraLinear(base, rank, alpha)
        setattr(parent, child_name, adapter)
        adapters[name] = adapter

    LOGGER.info(f'Attached rank-{rank} LoRA adapters to {len(adapters)} layers')
    return adapters


def lora_parameter_count(adapters: Dict[str, LoraLinear]) -> int:
    return sum(adapter.rank * (adapter.out_features + adapter.in_features) for adapter in adapters.values())
