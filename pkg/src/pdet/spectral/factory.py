from concurrent.futures import ProcessPoolExecutor
from copy import deepcopy
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .. import pde_kinds
from ..common import LOGGER, worker_cap
from ..exceptions import ContractError, EmptyDatasetError, SimulationBlowUpError, SolverSpecError
from ..fields import split, write_dataset
from ..types import DatasetSplit, Trajectory, TrajectoryMeta
from . import equations  # noqa: F401  (registers the equation classes)
from .etdrk import ETDRKIntegrator, SpectralGrid
from .initializers import (CUTOFF_RANGE, EXPONENT_RANGE, INTENSITY_RANGE, ic_diffused_noise, ic_gaussian_blobs,
                           ic_grf, ic_truncated_fourier)
from .namespace import equation_class
from .types import BLOBS_INITIALIZER, RANDOM_INITIALIZER, SolverSpec

BLOW_UP_THRESHOLD = 1e6
GRAY_SCOTT_SOLVER_DT = 1.0
DEFAULT_TEST_RANGE = (500, 600)
STEADY_GRAY_SCOTT_TEST_RANGE = (80, 100)
# (trajectories, stored steps) of the separate long-rollout test sets
GRAY_SCOTT_LONG_ROLLOUT = (30, 100)
CHAOTIC_LONG_ROLLOUT = (50, 200)


@dataclass
class Recipe:
    dt_store: float
    substeps: int = 1
    order: int = 2
    extent: float = 1.0
    extent_range: Optional[Tuple[float, float]] = None
    fixed: Dict[str, float] = field(default_factory=dict)
    varied: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    warmup_steps: int = 0
    initializer: str = RANDOM_INITIALIZER
    region_fraction: float = 0.6
    clamp: Optional[Tuple[float, float]] = None
    test_range: Optional[Tuple[int, int]] = DEFAULT_TEST_RANGE
    long_rollout: Optional[Tuple[int, int]] = None


def _gray_scott(feed: float, kill: float, dt_store: float, warmup: int, region_fraction: float = 0.6,
                steady: bool = False) -> Recipe:
    return Recipe(dt_store=dt_store, substeps=int(round(dt_store / GRAY_SCOTT_SOLVER_DT)), extent=2.5,
                  fixed={'feed_rate': feed, 'kill_rate': kill, 'diffusivity_a': 2e-5, 'diffusivity_b': 1e-5},
                  warmup_steps=warmup, initializer=BLOBS_INITIALIZER, region_fraction=region_fraction,
                  test_range=STEADY_GRAY_SCOTT_TEST_RANGE if steady else None,
                  long_rollout=None if steady else GRAY_SCOTT_LONG_ROLLOUT)


RECIPES = {
    pde_kinds.DIFF: Recipe(dt_store=0.01, varied={'nu_x': (0.005, 0.05), 'nu_y': (0.005, 0.05)}),
    pde_kinds.FISHER: Recipe(dt_store=0.005, varied={'diffusivity': (0.00005, 0.01), 'reactivity': (5.0, 15.0)},
                             clamp=(0.0, 1.0)),
    pde_kinds.SH: Recipe(dt_store=0.5, substeps=5, extent=20 * np.pi,
                         varied={'reactivity': (0.4, 1.0), 'critical_number': (0.8, 1.2)}),
    pde_kinds.GS_ALPHA: _gray_scott(0.008, 0.046, 30, 75),
    pde_kinds.GS_BETA: _gray_scott(0.020, 0.046, 30, 50),
    pde_kinds.GS_GAMMA: _gray_scott(0.024, 0.056, 75, 70),
    pde_kinds.GS_DELTA: _gray_scott(0.028, 0.056, 130, 0, steady=True),
    pde_kinds.GS_EPSILON: _gray_scott(0.020, 0.056, 15, 300),
    pde_kinds.GS_THETA: _gray_scott(0.040, 0.060, 200, 0, steady=True),
    pde_kinds.GS_IOTA: _gray_scott(0.050, 0.0605, 240, 0, steady=True),
    pde_kinds.GS_KAPPA: _gray_scott(0.052, 0.063, 300, 15, region_fraction=0.2, steady=True),
    pde_kinds.BURGERS: Recipe(dt_store=0.01, substeps=50, varied={'viscosity': (0.00005, 0.0003)}),
    pde_kinds.KDV: Recipe(dt_store=0.05, substeps=10, order=4, extent_range=(30.0, 120.0),
                          fixed={'convection': -6.0, 'dispersivity': 1.0},
                          varied={'viscosity': (0.00005, 0.001)}),
    pde_kinds.KS: Recipe(dt_store=0.5, substeps=5, order=4, extent_range=(10.0, 130.0), warmup_steps=200,
                         test_range=None, long_rollout=CHAOTIC_LONG_ROLLOUT),
    pde_kinds.DECAY_TURB: Recipe(dt_store=3.0, substeps=500, varied={'viscosity': (0.00005, 0.0001)},
                                 test_range=None, long_rollout=CHAOTIC_LONG_ROLLOUT),
    pde_kinds.KOLM_FLOW: Recipe(dt_store=0.3, substeps=1500, order=4, warmup_steps=50,
                                fixed={'forcing_wavenumber': 4.0, 'forcing_amplitude': 1.0, 'drag': 0.1},
                                varied={'viscosity': (0.0001, 0.001)}, test_range=None,
                                long_rollout=CHAOTIC_LONG_ROLLOUT),
}


def recipe(pde_kind: str) -> Recipe:
    try:
        return RECIPES[pde_kind]
    except KeyError:
        raise SolverSpecError(f'Unknown PDE kind {pde_kind!r}, expected one of {pde_kinds.ALL}')


def sample_solver_spec(pde_kind: str, index: int, seed: int = 0, resolution: Union[int, Tuple[int, int]] = 64,
                       n_steps: int = 30, param_overrides: Optional[Dict[str, float]] = None,
                       long_rollout: bool = False) -> SolverSpec:
    """
    The SolverSpec of trajectory `index` of a dataset: varied quantities are drawn from the recipe's ranges with a
    generator seeded by (seed, index), so any trajectory can be regenerated on its own. Long-rollout test sets are
    seeded by (seed, index, 1) instead.
    """
    pde_recipe = recipe(pde_kind)
    rng = np.random.default_rng([seed, index, 1] if long_rollout else [seed, index])
    params = dict(pde_recipe.fixed)
    for name, (low, high) in pde_recipe.varied.items():
        params[name] = float(rng.uniform(low, high))
    params.update(param_overrides or {})

    extent = pde_recipe.extent if pde_recipe.extent_range is None else float(rng.uniform(*pde_recipe.extent_range))
    if isinstance(resolution, (int, np.integer)):
        resolution = (int(resolution), int(resolution))
    return SolverSpec(pde_kind=pde_kind, resolution=tuple(resolution), domain_extent=(extent, extent),
                      dt_store=pde_recipe.dt_store, substeps=pde_recipe.substeps, params=params,
                      warmup_steps=pde_recipe.warmup_steps, seed=int(rng.integers(2 ** 31 - 1)), n_steps=n_steps,
                      order=pde_recipe.order, initializer=pde_recipe.initializer,
                      region_fraction=pde_recipe.region_fraction, clamp=pde_recipe.clamp)


def _random_component(resolution: Tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    choice = int(rng.integers(3))
    if choice == 0:
        return ic_truncated_fourier(resolution, int(rng.integers(*CUTOFF_RANGE)), rng)
    if choice == 1:
        return ic_grf(resolution, float(rng.uniform(*EXPONENT_RANGE)), rng)
    return ic_diffused_noise(resolution, float(rng.uniform(*INTENSITY_RANGE)), rng)


def initial_state(spec: SolverSpec, n_fields: int) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    if spec.initializer == BLOBS_INITIALIZER:
        state = np.stack(ic_gaussian_blobs(spec.resolution, 4, spec.region_fraction, rng))
    else:
        state = np.stack([_random_component(spec.resolution, rng) for _ in range(n_fields)])
    if spec.clamp is not None:
        state = np.clip(state, *spec.clamp)
    return state


def build_stepper(spec: SolverSpec,
                  forcing: Optional[np.ndarray] = None) -> Tuple[SpectralGrid, ETDRKIntegrator, List[str]]:
    grid = SpectralGrid(resolution=tuple(spec.resolution), extent=tuple(spec.domain_extent))
    cls = equation_class(spec.pde_kind)
    equation = cls(spec.params, grid, spec.pde_kind, forcing=forcing) if forcing is not None \
        else cls(spec.params, grid, spec.pde_kind)
    integrator = ETDRKIntegrator(equation.linear(), equation.nonlinear if equation.has_nonlinear else None,
                                 spec.dt, order=spec.order, pde_kind=spec.pde_kind)
    return grid, integrator, list(equation.FIELD_TYPES)


def simulate(spec: SolverSpec, initial: Optional[np.ndarray] = None) -> Trajectory:
    """
    Run one trajectory: warmup stored steps are integrated and discarded, then `n_steps` snapshots are kept at
    `dt_store` spacing, the first one being the state right after warmup.
    """
    spec.validate()
    grid, integrator, field_types = build_stepper(spec)
    state = initial_state(spec, len(field_types)) if initial is None else np.asarray(initial, dtype=np.float64)
    expected_shape = (len(field_types),) + tuple(spec.resolution)
    if state.shape != expected_shape:
        raise ContractError(f'{spec.pde_kind} initial state must have shape {expected_shape}, got {state.shape}')

    u_hat = grid.to_fourier(state)
    for _ in range(spec.warmup_steps):
        u_hat = integrator.advance(u_hat, spec.substeps)

    frames = []
    for step in range(spec.n_steps):
        if step:
            u_hat = integrator.advance(u_hat, spec.substeps)
        frame = grid.to_real(u_hat)
        max_abs = float(np.max(np.abs(frame)))
        if max_abs > BLOW_UP_THRESHOLD:
            raise SimulationBlowUpError(spec.pde_kind, step, max_abs, BLOW_UP_THRESHOLD)
        frames.append(frame)

    meta = TrajectoryMeta(pde_kind=spec.pde_kind, params=dict(spec.params),
                          domain_extent=tuple(float(extent) for extent in spec.domain_extent),
                          periodic=(True, True), seed=spec.seed, dt=spec.dt_store,
                          t0=spec.warmup_steps * spec.dt_store)
    return Trajectory(values=np.stack(frames), field_types=field_types, meta=meta)


def vorticity_solver_step(omega: np.ndarray, viscosity: float, dt: float, forcing: Optional[np.ndarray] = None,
                          extent: Tuple[float, float] = (1.0, 1.0), drag: float = 0.0, order: int = 2) -> np.ndarray:
    """
    One ETDRK step of the streamfunction-vorticity Navier-Stokes equations on a periodic box.

    Args:
        omega: vorticity, [x, y] or [1, x, y]
        viscosity: kinematic viscosity
        dt: step size
        forcing: optional vorticity forcing field, [x, y]
        extent: domain size
        drag: linear drag coefficient
        order: 2 or 4

    Returns: the vorticity after one step, shaped like `omega`

    """
    field = np.asarray(omega, dtype=np.float64)
    spec = SolverSpec(pde_kind=pde_kinds.DECAY_TURB, resolution=field.shape[-2:], domain_extent=tuple(extent),
                      dt_store=dt, params={'viscosity': viscosity, 'drag': drag}, order=order)
    grid, integrator, _ = build_stepper(spec, forcing=forcing)
    stepped = grid.to_real(integrator.step(grid.to_fourier(field.reshape((1,) + field.shape[-2:]))))
    return stepped.reshape(field.shape)


def default_split(pde_kind: str, count: int, seed: int, long_rollout: bool = False) -> DatasetSplit:
    if long_rollout:
        if count <= 0:
            raise EmptyDatasetError('Cannot split an empty long-rollout set')
        return DatasetSplit(train=[], val=[], test=list(range(count)))
    test_range = recipe(pde_kind).test_range
    if test_range is not None and count >= test_range[1]:
        return split(count, seed, test_range=test_range)
    return split(count, seed, fractions=(0.7, 0.15, 0.15))


def _simulate_spec(spec: SolverSpec) -> Trajectory:
    return simulate(spec)


class DatasetBuilder:
    ATTRIBUTES = {
        '_pde_kind': {'kwarg': 'pde_kind', 'default': None},
        '_resolution': {'kwarg': 'resolution', 'default': 64},
        '_n_trajectories': {'kwarg': 'n_trajectories', 'default': 60},
        '_n_steps': {'kwarg': 'n_steps', 'default': 30},
        '_seed': {'kwarg': 'seed', 'default': 0},
        '_workers': {'kwarg': 'workers', 'default': 1},
        '_param_overrides': {'kwarg': 'param_overrides', 'default': {}},
        '_long_rollout': {'kwarg': None, 'default': False},
        '_after_trajectory_callback': {'kwarg': None, 'default': None},
    }

    def __init__(self, pde_kind: str,
                 resolution: Optional[int] = None,
                 n_trajectories: Optional[int] = None,
                 n_steps: Optional[int] = None,
                 seed: Optional[int] = None,
                 workers: Optional[int] = None,
                 param_overrides: Optional[Dict[str, float]] = None):
        self.override(pde_kind=pde_kind, resolution=resolution, n_trajectories=n_trajectories, n_steps=n_steps,
                      seed=seed, workers=workers, param_overrides=param_overrides)

    @staticmethod
    def from_builder(builder: 'DatasetBuilder') -> 'DatasetBuilder':
        return deepcopy(builder)

    def override(self, pde_kind: Optional[str] = None,
                 resolution: Optional[int] = None,
                 n_trajectories: Optional[int] = None,
                 n_steps: Optional[int] = None,
                 seed: Optional[int] = None,
                 workers: Optional[int] = None,
                 param_overrides: Optional[Dict[str, float]] = None) -> 'DatasetBuilder':
        if pde_kind is not None and pde_kind not in pde_kinds.ALL:
            raise SolverSpecError(f'Unknown PDE kind {pde_kind!r}, expected one of {pde_kinds.ALL}')

        _locals = locals()
        for attribute, settings in self.ATTRIBUTES.items():
            _arg = _locals.get(settings.get('kwarg'))
            if _arg is not None:
                setattr(self, attribute, _arg)
            elif not hasattr(self, attribute):
                setattr(self, attribute, deepcopy(settings.get('default')))

        if self._n_trajectories < 1:
            raise SolverSpecError(f'n_trajectories must be >= 1, got {self._n_trajectories}')
        return self

    def long_rollout(self, n_trajectories: Optional[int] = None, n_steps: Optional[int] = None) -> 'DatasetBuilder':
        """
        Switch to the separate long-rollout test set of an unsteady or chaotic PDE kind, sized by its recipe unless
        `n_trajectories` or `n_steps` are given.
        """
        size = recipe(self._pde_kind).long_rollout
        if size is None:
            raise SolverSpecError(f'{self._pde_kind} has no long-rollout test set')
        self._long_rollout = True
        return self.override(n_trajectories=n_trajectories or size[0], n_steps=n_steps or size[1])

    def after_trajectory(self, callback: Callable[[int, Trajectory], None] = None) -> 'DatasetBuilder':
        self._after_trajectory_callback = callback
        return self

    @property
    def pde_kind(self) -> str:
        return self._pde_kind

    @property
    def size(self) -> Tuple[int, int]:
        return self._n_trajectories, self._n_steps

    def specs(self) -> List[SolverSpec]:
        return [sample_solver_spec(self._pde_kind, index, self._seed, self._resolution, self._n_steps,
                                   self._param_overrides, long_rollout=self._long_rollout).validate()
                for index in range(self._n_trajectories)]

    def build(self) -> List[Trajectory]:
        specs = self.specs()
        workers = min(worker_cap(self._workers), len(specs))
        LOGGER.info(f'Generating {len(specs)} {self._pde_kind} trajectories at {specs[0].resolution} '
                    f'with {workers} worker(s)')

        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = pool.map(_simulate_spec, specs)
                trajs = self._collect(results)
        else:
            trajs = self._collect(map(_simulate_spec, specs))
        return trajs

    def _collect(self, results: Sequence[Trajectory]) -> List[Trajectory]:
        trajs = []
        for index, traj in enumerate(results):
            traj.meta.long_rollout = self._long_rollout
            trajs.append(traj)
            LOGGER.debug(f'{self._pde_kind} trajectory {index} done')
            if self._after_trajectory_callback:
                self._after_trajectory_callback(index, traj)
        return trajs

    def write(self, path: str) -> List[Trajectory]:
        trajs = self.build()
        write_dataset(trajs, path)
        return trajs
