"""
Checked tensor operations on top of torch autograd.

Every op here validates shapes up front, so a wiring mistake surfaces as a `DimensionError` naming both operands
instead of a broadcasting accident three layers later. With `PdetGlobalSettings().check_finite` on, outputs are
scanned and a `NonFiniteError` is raised on the first NaN/Inf.
"""
import itertools
from typing import Callable, Dict, Iterable, Iterator, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .common import PdetGlobalSettings
from .exceptions import ContractError, DimensionError, NonFiniteError


def check_finite(tensor: torch.Tensor, op_name: str) -> torch.Tensor:
    if PdetGlobalSettings().check_finite and not bool(torch.isfinite(tensor).all()):
        raise NonFiniteError(f'{op_name} produced non-finite values (shape {tuple(tensor.shape)})')
    return tensor


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f'matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}')
    return check_finite(torch.matmul(a, b), 'matmul')


def linear(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    if x.shape[-1] != weight.shape[-1]:
        raise DimensionError(f'linear shape mismatch: input {tuple(x.shape)} vs weight {tuple(weight.shape)}')
    return check_finite(F.linear(x, weight, bias), 'linear')


def _check_affine(x: torch.Tensor, param: Optional[torch.Tensor], name: str, op_name: str):
    if param is not None and tuple(param.shape) != (x.shape[-1],):
        raise DimensionError(f'{op_name} {name} shape {tuple(param.shape)} does not match input {tuple(x.shape)}')


def layernorm(x: torch.Tensor, gamma: Optional[torch.Tensor] = None, beta: Optional[torch.Tensor] = None,
              eps: Optional[float] = None) -> torch.Tensor:
    eps = PdetGlobalSettings().layernorm_eps if eps is None else eps
    if eps <= 0:
        raise ContractError(f'layernorm eps must be positive, got {eps}')
    _check_affine(x, gamma, 'gamma', 'layernorm')
    _check_affine(x, beta, 'beta', 'layernorm')
    return check_finite(F.layer_norm(x, (x.shape[-1],), gamma, beta, eps), 'layernorm')


def rmsnorm(x: torch.Tensor, gamma: Optional[torch.Tensor] = None, eps: Optional[float] = None) -> torch.Tensor:
    eps = PdetGlobalSettings().rmsnorm_eps if eps is None else eps
    if eps <= 0:
        raise ContractError(f'rmsnorm eps must be positive, got {eps}')
    _check_affine(x, gamma, 'gamma', 'rmsnorm')
    out = x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)
    if gamma is not None:
        out = out * gamma
    return check_finite(out, 'rmsnorm')


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    # torch subtracts the running max internally
    return check_finite(torch.softmax(x, dim=dim), 'softmax')


def gelu(x: torch.Tensor) -> torch.Tensor:
    return check_finite(F.gelu(x), 'gelu')


def backward(loss: torch.Tensor, parameters: Optional[Iterable[torch.Tensor]] = None) -> None:
    """
    Backpropagate a scalar loss. Gradients accumulate across calls until they are reset.

    Args:
        loss: a tensor with exactly one element
        parameters: optional tensors whose `grad` should exist afterwards even when the loss does not reach them

    """
    if loss.numel() != 1:
        raise ContractError(f'backward needs a scalar loss, got shape {tuple(loss.shape)}')
    check_finite(loss.detach(), 'loss')
    loss.reshape(()).backward()
    for param in parameters or ():
        if param.requires_grad and param.grad is None:
            param.grad = torch.zeros_like(param)


def zero_grad(parameters: Iterable[torch.Tensor]) -> None:
    for param in parameters:
        if param.grad is not None:
            param.grad.detach_()
            param.grad.zero_()


class LayerNorm(nn.Module):

    def __init__(self, dim: int, elementwise_affine: bool = True, eps: Optional[float] = None):
        super().__init__()
        self.eps = PdetGlobalSettings().layernorm_eps if eps is None else eps
        if elementwise_affine:
            self.weight = nn.Parameter(torch.ones(dim))
            self.bias = nn.Parameter(torch.zeros(dim))
        else:
            self.register_parameter('weight', None)
            self.register_parameter('bias', None)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return layernorm(x, self.weight, self.bias, self.eps)


class RMSNorm(nn.Module):

    def __init__(self, dim: int, eps: Optional[float] = None):
        super().__init__()
        self.eps = PdetGlobalSettings().rmsnorm_eps if eps is None else eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return rmsnorm(x, self.weight, self.eps)


def named_parameters(module: nn.Module, trainable_only: bool = False) -> Dict[str, nn.Parameter]:
    return {name: param for name, param in module.named_parameters()
            if param.requires_grad or not trainable_only}


def count_parameters(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(param.numel() for param in named_parameters(module, trainable_only).values())


def numerical_gradient(fn: Callable[[], torch.Tensor], tensor: torch.Tensor,
                       indices: Optional[Iterable[Tuple[int, ...]]] = None, h: float = 1e-5) -> torch.Tensor:
    """
    Central finite differences of the scalar `fn()` with respect to entries of `tensor`, perturbed in place.

    Args:
        fn: closure recomputing the scalar loss from the current tensor values
        tensor: leaf tensor (usually a parameter) to perturb
        indices: entries to probe, all entries when omitted
        h: step size

    Returns: a tensor shaped like `tensor` holding the estimates at the probed entries and zero elsewhere

    """
    estimate = torch.zeros_like(tensor)
    probe = indices if indices is not None else _all_indices(tensor.shape)
    with torch.no_grad():
        for index in probe:
            original = tensor[index].item()
            tensor[index] = original + h
            upper = fn().item()
            tensor[index] = original - h
            lower = fn().item()
            tensor[index] = original
            estimate[index] = (upper - lower) / (2 * h)
    return estimate


def _all_indices(shape: torch.Size) -> Iterator[Tuple[int, ...]]:
    return itertools.product(*(range(extent) for extent in shape))
