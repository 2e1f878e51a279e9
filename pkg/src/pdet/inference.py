"""
Autoregressive rollout, the Euler sampler for flow-matching models, and the nRMSE evaluation harness.
"""
import csv
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import torch
import ujson

from .common import LOGGER
from .exceptions import ContractError, DimensionError, ZeroReferenceError
from .fields import read_dataset
from .model import Conditioning
from .spectral.factory import build_stepper, recipe
from .spectral.types import SolverSpec
from .types import FieldStats, ReportRow, Snapshot, SweepRow, Trajectory

DEFAULT_HORIZONS = (1, 10, 20)
DEFAULT_SAMPLER_STEPS = 25
TRUNCATED_SCORE = 1.0

REPORT_COLUMNS = ('dataset', 'horizon', 'nrmse', 'n_trajectories', 'truncated_count',)
SWEEP_COLUMNS = ('dataset', 'sampler_steps', 'horizon', 'nrmse',)

Predictor = Callable[..., torch.Tensor]


def nrmse_per_item(pred: Union[np.ndarray, torch.Tensor], ref: Union[np.ndarray, torch.Tensor]) -> np.ndarray:
    pred = torch.as_tensor(pred, dtype=torch.float64).detach()
    ref = torch.as_tensor(ref, dtype=torch.float64).detach()
    if pred.shape != ref.shape:
        raise DimensionError(f'nrmse shape mismatch: prediction {tuple(pred.shape)} vs reference {tuple(ref.shape)}')
    error = (pred - ref).pow(2).flatten(1).mean(dim=1)
    scale = ref.pow(2).flatten(1).mean(dim=1)
    zero = torch.nonzero(scale == 0)
    if len(zero):
        raise ZeroReferenceError(int(zero[0, 0]))
    return torch.sqrt(error / scale).numpy()


def nrmse(pred: Union[np.ndarray, torch.Tensor], ref: Union[np.ndarray, torch.Tensor]) -> float:
    """
    Mean over the leading (item) axis of sqrt(MSE(pred, ref) / MSE(0, ref)).
    """
    return float(np.mean(nrmse_per_item(pred, ref)))


@dataclass
class RolloutResult:
    """
    Predicted states [steps, C, H, W] and the nRMSE after each step. A rollout that produced a non-finite state is
    cut there: `predictions` only holds the finite steps and the series scores the rest as 1.0.
    """
    predictions: np.ndarray
    nrmse_series: List[float] = field(default_factory=list)
    truncated: bool = False
    truncated_at: Optional[int] = None

    @property
    def horizon(self) -> int:
        return len(self.nrmse_series)

    def nrmse_at(self, horizon: int) -> float:
        if not 1 <= horizon <= len(self.nrmse_series):
            raise ContractError(f'Horizon {horizon} outside of the {len(self.nrmse_series)}-step series')
        return self.nrmse_series[horizon - 1]

    def aggregates(self, horizons: Sequence[int] = DEFAULT_HORIZONS) -> Dict[int, float]:
        return {horizon: self.nrmse_at(horizon) for horizon in horizons if horizon <= self.horizon}


def _is_diffusion(model) -> bool:
    return bool(getattr(getattr(model, 'cfg', None), 'diffusion', False))


def _model_dtype(model, default: torch.dtype) -> torch.dtype:
    parameters = getattr(model, 'parameters', None)
    first = next(iter(parameters()), None) if parameters else None
    return first.dtype if first is not None else default


@torch.no_grad()
def euler_sample(model: Predictor, u_in: torch.Tensor, cond: Conditioning, n_steps: int = DEFAULT_SAMPLER_STEPS,
                 generator: Optional[torch.Generator] = None, x0: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Integrate dx/dt = model(u_in, cond at t, x) from t=0 to t=1 with `n_steps` explicit Euler steps.

    Args:
        model: velocity predictor
        u_in: [B, T, C, H, W] conditioning snapshots
        cond: conditioning labels, the diffusion time is filled in per step
        n_steps: number of Euler steps
        generator: random stream for the starting noise
        x0: explicit starting state, [B, 1, C, H, W]

    Returns: x at t=1, [B, 1, C, H, W]

    """
    if n_steps < 1:
        raise ContractError(f'n_steps must be >= 1, got {n_steps}')
    batch = u_in.shape[0]
    x = x0 if x0 is not None else torch.randn((batch, 1) + tuple(u_in.shape[2:]), generator=generator,
                                              dtype=u_in.dtype).to(u_in.device)
    dt = 1.0 / n_steps
    for step in range(n_steps):
        t = torch.full((batch,), step * dt, dtype=u_in.dtype, device=u_in.device)
        x = x + dt * model(u_in, cond.with_time(t), x_t=x)
    return x


def _window(initial: Union[Snapshot, Sequence[Snapshot], np.ndarray, torch.Tensor],
            dtype: torch.dtype) -> torch.Tensor:
    if isinstance(initial, Snapshot):
        values = initial.values[None]
    elif isinstance(initial, (list, tuple)):
        values = np.stack([snapshot.values for snapshot in initial])
    else:
        values = initial
    window = torch.as_tensor(np.asarray(values) if not isinstance(values, torch.Tensor) else values, dtype=dtype)
    if window.dim() != 4:
        raise DimensionError(f'Rollout start must be [T, C, H, W], got {tuple(window.shape)}')
    return window[None]


def _stats_arrays(stats: Optional[FieldStats], dtype: torch.dtype):
    if stats is None:
        return None, None
    mean = torch.as_tensor(np.asarray(stats.mean), dtype=dtype)[None, None, :, None, None]
    std = torch.as_tensor(np.asarray(stats.std), dtype=dtype)[None, None, :, None, None]
    return mean, std


@torch.no_grad()
def rollout(model: Predictor, initial: Union[Snapshot, Sequence[Snapshot], np.ndarray, torch.Tensor],
            cond: Conditioning, steps: int, reference: Optional[np.ndarray] = None,
            stats: Optional[FieldStats] = None, sampler_steps: int = DEFAULT_SAMPLER_STEPS,
            generator: Optional[torch.Generator] = None, dtype: torch.dtype = torch.float64,
            diffusion: Optional[bool] = None) -> RolloutResult:
    """
    Feed each prediction back as the newest input snapshot for `steps` steps.

    Args:
        model: predictor called as model(u_in, cond) or, in diffusion mode, sampled with `euler_sample`
        initial: the starting window, one or more snapshots in physical units
        cond: conditioning for a batch of one
        steps: rollout length
        reference: [>= steps, C, H, W] ground truth after the window, enables the nRMSE series
        stats: normalization the model was trained with; inputs are normalized and outputs denormalized
        sampler_steps: Euler steps per prediction in diffusion mode
        generator: random stream for the diffusion sampler
        dtype: compute dtype of the window
        diffusion: override the diffusion-mode detection from `model.cfg`

    """
    if steps < 1:
        raise ContractError(f'Rollout needs steps >= 1, got {steps}')
    if reference is not None and len(reference) < steps:
        raise ContractError(f'Reference covers {len(reference)} steps, rollout needs {steps}')
    if hasattr(model, 'eval'):
        model.eval()
    diffusion = _is_diffusion(model) if diffusion is None else diffusion
    mean, std = _stats_arrays(stats, dtype)
    model_dtype = _model_dtype(model, dtype)

    window = _window(initial, dtype)
    if mean is not None:
        window = (window - mean) / std

    predictions, series = [], []
    truncated_at = None
    for step in range(steps):
        if diffusion:
            prediction = euler_sample(model, window.to(model_dtype), cond, sampler_steps, generator)
        else:
            prediction = model(window.to(model_dtype), cond)
        prediction = prediction.to(dtype)
        if not bool(torch.isfinite(prediction).all()):
            truncated_at = step
            LOGGER.warning(f'Rollout became non-finite at step {step + 1}, truncating')
            break
        physical = prediction * std + mean if mean is not None else prediction
        predictions.append(physical[0, 0].cpu().numpy())
        if reference is not None:
            series.append(float(nrmse_per_item(physical[0], np.asarray(reference[step], dtype=np.float64)[None])[0]))
        window = torch.cat([window[:, 1:], prediction], dim=1)

    if reference is not None and truncated_at is not None:
        series.extend([TRUNCATED_SCORE] * (steps - truncated_at))
    stacked = np.stack(predictions) if predictions else np.zeros((0,) + tuple(window.shape[2:]))
    return RolloutResult(predictions=stacked, nrmse_series=series, truncated=truncated_at is not None,
                         truncated_at=truncated_at)


class SolverPredictor:
    """
    The spectral solver behind a dataset, called like a model: it advances the newest input snapshot by one
    stored time step. Inputs are taken in physical units.
    """

    def __init__(self, spec: SolverSpec):
        self.spec = spec.validate()
        self.grid, self.integrator, self.field_types = build_stepper(spec)

    @staticmethod
    def from_trajectory(traj: Trajectory) -> 'SolverPredictor':
        pde_recipe = recipe(traj.meta.pde_kind)
        spec = SolverSpec(pde_kind=traj.meta.pde_kind, resolution=traj.resolution,
                          domain_extent=tuple(traj.meta.domain_extent), dt_store=traj.meta.dt,
                          substeps=pde_recipe.substeps, params=dict(traj.meta.params), order=pde_recipe.order)
        return SolverPredictor(spec)

    def __call__(self, u_in: torch.Tensor, cond: Optional[Conditioning] = None,
                 x_t: Optional[torch.Tensor] = None, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        latest = u_in[:, -1].detach().cpu().numpy().astype(np.float64)
        stepped = np.stack([self.grid.to_real(self.integrator.advance(self.grid.to_fourier(item), self.spec.substeps))
                            for item in latest])
        return torch.as_tensor(stepped, dtype=u_in.dtype)[:, None]


# evaluation suite

@dataclass
class EvaluationReport:
    rows: List[ReportRow] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {'columns': list(REPORT_COLUMNS),
                'rows': [dict(row._asdict()) for row in self.rows],
                'skipped': list(self.skipped)}

    def row(self, dataset: str, horizon: int) -> ReportRow:
        for row in self.rows:
            if row.dataset == dataset and row.horizon == horizon:
                return row
        raise KeyError((dataset, horizon))


def write_report(report: EvaluationReport, directory: str) -> Dict[str, str]:
    os.makedirs(directory, exist_ok=True)
    paths = {'json': os.path.join(directory, 'report.json'), 'csv': os.path.join(directory, 'report.csv')}
    with open(paths['json'], 'w', encoding='utf-8') as handle:
        handle.write(ujson.dumps(report.to_dict(), indent=2))
    _write_csv(paths['csv'], REPORT_COLUMNS, report.rows)
    LOGGER.info(f'Wrote evaluation report with {len(report.rows)} rows to {directory}')
    return paths


def _write_csv(path: str, columns: Sequence[str], rows: Sequence) -> None:
    with open(path, 'w', encoding='utf-8', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([getattr(row, column) for column in columns])


def _load(source: Union[str, Sequence[Trajectory]]) -> Optional[List[Trajectory]]:
    if isinstance(source, str):
        if not os.path.exists(source):
            return None
        return read_dataset(source)
    return list(source)


def evaluate_suite(model: Predictor, datasets: Mapping[str, Union[str, Sequence[Trajectory]]],
                   horizons: Sequence[int] = DEFAULT_HORIZONS, stats: Optional[Mapping[str, FieldStats]] = None,
                   indices: Optional[Mapping[str, Sequence[int]]] = None, history: int = 1,
                   sampler_steps: int = DEFAULT_SAMPLER_STEPS, seed: int = 0,
                   dtype: torch.dtype = torch.float64) -> EvaluationReport:
    """
    Roll the model out on every trajectory of every dataset and average nRMSE per (dataset, horizon).

    Args:
        model: predictor, see `rollout`
        datasets: name -> `.pdet` path or loaded trajectories; missing paths are skipped and listed in the report
        horizons: rollout steps at which to report
        stats: per-dataset normalization the model expects
        indices: per-dataset trajectory ids to evaluate, all when absent
        history: input window length
        sampler_steps: Euler steps in diffusion mode
        seed: seed of the sampler noise
        dtype: compute dtype

    """
    report = EvaluationReport()
    horizons = sorted(set(int(horizon) for horizon in horizons))
    for name, source in datasets.items():
        trajs = _load(source)
        if trajs is None:
            LOGGER.warning(f'Dataset {name} not found at {source}, skipping')
            report.skipped.append(name)
            continue
        selected = [trajs[index] for index in indices[name]] if indices and name in indices else trajs
        if not selected:
            LOGGER.warning(f'Dataset {name} has no trajectories to evaluate, skipping')
            report.skipped.append(name)
            continue

        available = min(traj.n_steps for traj in selected) - history
        usable = [horizon for horizon in horizons if horizon <= available]
        if len(usable) < len(horizons):
            LOGGER.warning(f'Dataset {name} only supports horizons up to {available}, dropping '
                           f'{[h for h in horizons if h > available]}')
        if not usable:
            report.skipped.append(name)
            continue

        generator = torch.Generator()
        generator.manual_seed(seed)
        results = []
        for traj in selected:
            cond = Conditioning.from_names(traj.meta.pde_kind, traj.field_types, batch=1, periodic=traj.meta.periodic)
            results.append(rollout(model, traj.values[:history], cond, max(usable),
                                   reference=traj.values[history:history + max(usable)],
                                   stats=(stats or {}).get(name), sampler_steps=sampler_steps, generator=generator,
                                   dtype=dtype))

        for horizon in usable:
            scores = [result.nrmse_at(horizon) for result in results]
            truncated = sum(1 for result in results if result.truncated and result.truncated_at < horizon)
            report.rows.append(ReportRow(name, horizon, float(np.mean(scores)), len(results), truncated))
            LOGGER.info(f'{name} nRMSE@{horizon} = {np.mean(scores):.4g} over {len(results)} trajectories')
    return report


def sampler_sweep(model: Predictor, datasets: Mapping[str, Union[str, Sequence[Trajectory]]],
                  sampler_steps: Sequence[int] = (1, 2, 5, 10, 25, 50), horizons: Sequence[int] = (1,),
                  **kwargs) -> List[SweepRow]:
    """
    nRMSE against the number of Euler steps per prediction.
    """
    rows = []
    for n_steps in sampler_steps:
        report = evaluate_suite(model, datasets, horizons, sampler_steps=n_steps, **kwargs)
        rows.extend(SweepRow(row.dataset, n_steps, row.horizon, row.nrmse) for row in report.rows)
    return rows


def write_sweep(rows: Sequence[SweepRow], path: str) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    _write_csv(path, SWEEP_COLUMNS, rows)
    return path
