from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

from .. import pde_kinds
from ..exceptions import SolverSpecError
from .etdrk import ETDRK_ORDERS

MAX_RESOLUTION = 256
MIN_RESOLUTION = 4

RANDOM_INITIALIZER = 'random'
BLOBS_INITIALIZER = 'blobs'


def _power_of_two(value: int) -> bool:
    return value > 0 and value & (value - 1) == 0


@dataclass
class SolverSpec:
    pde_kind: str
    resolution: Tuple[int, int] = (64, 64)
    domain_extent: Tuple[float, float] = (1.0, 1.0)
    dt_store: float = 0.01
    substeps: int = 1
    params: Dict[str, float] = field(default_factory=dict)
    warmup_steps: int = 0
    seed: int = 0
    n_steps: int = 30
    order: int = 2
    initializer: str = RANDOM_INITIALIZER
    region_fraction: float = 0.6
    clamp: Optional[Tuple[float, float]] = None

    @property
    def dt(self) -> float:
        return self.dt_store / self.substeps

    def validate(self) -> 'SolverSpec':
        problems = []
        if self.pde_kind not in pde_kinds.ALL:
            problems.append(f'pde_kind {self.pde_kind!r} is not one of {pde_kinds.ALL}')
        if any(not _power_of_two(extent) or not MIN_RESOLUTION <= extent <= MAX_RESOLUTION
               for extent in self.resolution):
            problems.append(f'resolution {self.resolution} must be powers of two in '
                            f'[{MIN_RESOLUTION}, {MAX_RESOLUTION}]')
        if any(extent <= 0 for extent in self.domain_extent):
            problems.append(f'domain_extent {self.domain_extent} must be positive')
        if self.dt_store <= 0:
            problems.append(f'dt_store {self.dt_store} must be positive')
        if self.substeps < 1:
            problems.append(f'substeps {self.substeps} must be >= 1')
        if self.warmup_steps < 0:
            problems.append(f'warmup_steps {self.warmup_steps} must be >= 0')
        if self.n_steps < 1:
            problems.append(f'n_steps {self.n_steps} must be >= 1')
        if self.order not in ETDRK_ORDERS:
            problems.append(f'order {self.order} must be one of {ETDRK_ORDERS}')
        if self.initializer not in (RANDOM_INITIALIZER, BLOBS_INITIALIZER):
            problems.append(f'initializer {self.initializer!r} is unknown')
        if problems:
            raise SolverSpecError('; '.join(problems))
        return self
