from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from recordclass import recordclass

from .exceptions import ContractError

ManifestEntry = recordclass('ManifestEntry', 'name dtype shape offset nbytes')
EmaClipState = recordclass('EmaClipState', 'beta1 beta2 alpha kappa i g1 g2')
ReportRow = recordclass('ReportRow', 'dataset horizon nrmse n_trajectories truncated_count')
SweepRow = recordclass('SweepRow', 'dataset sampler_steps horizon nrmse')


@dataclass
class Snapshot:
    values: np.ndarray
    field_types: Sequence[str]
    time: float

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ContractError(f'Snapshot values must be [f, x, y], got shape {tuple(self.values.shape)}')
        if len(self.field_types) != self.values.shape[0]:
            raise ContractError(f'{len(self.field_types)} field types for {self.values.shape[0]} fields')


@dataclass
class TrajectoryMeta:
    pde_kind: str
    params: Dict[str, float] = field(default_factory=dict)
    domain_extent: Tuple[float, float] = (1.0, 1.0)
    periodic: Tuple[bool, bool] = (True, True)
    seed: int = 0
    dt: float = 1.0
    t0: float = 0.0
    long_rollout: bool = False


@dataclass
class Trajectory:
    """
    A stored simulation run, values laid out as [t, f, x, y].
    """
    values: np.ndarray
    field_types: Sequence[str]
    meta: TrajectoryMeta

    def __post_init__(self):
        if self.values.ndim != 4:
            raise ContractError(f'Trajectory values must be [t, f, x, y], got shape {tuple(self.values.shape)}')
        if len(self.field_types) != self.values.shape[1]:
            raise ContractError(f'{len(self.field_types)} field types for {self.values.shape[1]} fields')
        self.field_types = list(self.field_types)

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_fields(self) -> int:
        return self.values.shape[1]

    @property
    def resolution(self) -> Tuple[int, int]:
        return self.values.shape[2], self.values.shape[3]

    @property
    def times(self) -> np.ndarray:
        return self.meta.t0 + np.arange(self.n_steps) * self.meta.dt

    @property
    def snapshots(self) -> List[Snapshot]:
        return [Snapshot(values=self.values[k], field_types=self.field_types, time=float(time))
                for k, time in enumerate(self.times)]


@dataclass
class DatasetSplit:
    train: List[int]
    val: List[int]
    test: List[int]

    def __post_init__(self):
        train, val, test = set(self.train), set(self.val), set(self.test)
        if train & val or train & test or val & test:
            raise ContractError('Dataset split index lists overlap')


@dataclass
class FieldStats:
    mean: np.ndarray
    std: np.ndarray

    @property
    def n_fields(self) -> int:
        return len(self.mean)

    def to_dict(self) -> Dict[str, List[float]]:
        return {'mean': [float(value) for value in self.mean], 'std': [float(value) for value in self.std]}

    @staticmethod
    def from_dict(data: Dict[str, Sequence[float]]) -> 'FieldStats':
        return FieldStats(mean=np.asarray(data['mean'], dtype=np.float64),
                          std=np.asarray(data['std'], dtype=np.float64))
