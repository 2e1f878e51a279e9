"""
Supervised and flow-matching training: objectives, EMA gradient clipping, trainer loop with gradient accumulation
and EMA weights, checkpoints and the metrics stream.
"""
import math
import os
from copy import deepcopy
from dataclasses import asdict, dataclass, fields
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
import ujson
from torch import nn
from torch.optim.swa_utils import AveragedModel, get_ema_multi_avg_fn

from .common import LOGGER
from .exceptions import CheckpointMismatchError, EmptyDatasetError, NonFiniteLossError, TrainConfigError
from .fields import read_checkpoint, write_checkpoint
from .model import Conditioning, ModelConfig, PdeTransformer, build
from .tensorcore import backward
from .types import EmaClipState, FieldStats, Trajectory

OBJECTIVE_MSE = 'mse'
OBJECTIVE_FLOW_MATCHING = 'flow_matching'
OBJECTIVES = (OBJECTIVE_MSE, OBJECTIVE_FLOW_MATCHING,)

DTYPES = {'float32': torch.float32, 'float64': torch.float64}

CHECKPOINT_SUFFIX = '.pdet-ckpt'


@dataclass
class TrainConfig:
    lr: float = 4.0e-5
    weight_decay: float = 1e-15
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    effective_batch: int = 256
    micro_batch: int = 32
    epochs: int = 1
    max_steps: Optional[int] = None
    ema_decay: float = 0.999
    objective: str = OBJECTIVE_MSE
    sigma_min: float = 1e-4
    seed: int = 0
    clip: bool = True
    clip_literal: bool = False
    history: int = 1
    checkpoint_every: int = 0
    dtype: str = 'float32'

    @property
    def accumulation_steps(self) -> int:
        return self.effective_batch // self.micro_batch

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    def validate(self) -> 'TrainConfig':
        problems = []
        if self.micro_batch < 1 or self.effective_batch < 1:
            problems.append('micro_batch and effective_batch must be positive')
        elif self.effective_batch % self.micro_batch:
            problems.append(f'effective_batch={self.effective_batch} is not a multiple of '
                            f'micro_batch={self.micro_batch}')
        if self.lr <= 0:
            problems.append(f'lr={self.lr} must be positive')
        if self.weight_decay < 0:
            problems.append(f'weight_decay={self.weight_decay} must be non-negative')
        if not 0.0 <= self.ema_decay < 1.0:
            problems.append(f'ema_decay={self.ema_decay} must be in [0, 1)')
        if self.objective not in OBJECTIVES:
            problems.append(f'objective {self.objective!r} must be one of {OBJECTIVES}')
        if not 0.0 <= self.sigma_min < 1.0:
            problems.append(f'sigma_min={self.sigma_min} must be in [0, 1)')
        if self.epochs < 1 or self.history < 1:
            problems.append('epochs and history must be positive')
        if self.dtype not in DTYPES:
            problems.append(f'dtype {self.dtype!r} must be one of {tuple(DTYPES)}')
        if problems:
            raise TrainConfigError('; '.join(problems))
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {key: list(value) if isinstance(value, tuple) else value for key, value in asdict(self).items()}

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> 'TrainConfig':
        known = {item.name for item in fields(TrainConfig)}
        values = {key: tuple(value) if isinstance(value, list) else value
                  for key, value in data.items() if key in known}
        return TrainConfig(**values).validate()


# objectives

def flow_sample(u_out: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, sigma_min: float) -> torch.Tensor:
    """
    Point on the straight path from noise (t=0) to data (t=1): x_t = t u + (1 - (1 - sigma_min) t) eps.
    """
    t = t.reshape(-1, *([1] * (u_out.dim() - 1))).to(u_out.dtype)
    return t * u_out + (1 - (1 - sigma_min) * t) * eps


def flow_target(u_out: torch.Tensor, eps: torch.Tensor, sigma_min: float) -> torch.Tensor:
    return u_out - (1 - sigma_min) * eps


def loss_supervised(model: nn.Module, u_in: torch.Tensor, cond: Conditioning, u_out: torch.Tensor,
                    generator: Optional[torch.Generator] = None) -> torch.Tensor:
    # mean over every element of the batch, i.e. the squared norm divided by B * T * C * H * W
    return F.mse_loss(model(u_in, cond, generator=generator), u_out)


def loss_flow_matching(model: nn.Module, u_in: torch.Tensor, cond: Conditioning, u_out: torch.Tensor,
                       sigma_min: float = 1e-4, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """
    Regress the velocity of the noise-to-data path at a uniformly drawn time t with the model fed [u_in, x_t].
    """
    batch = u_out.shape[0]
    t = torch.rand(batch, generator=generator, dtype=u_out.dtype).to(u_out.device)
    eps = torch.randn(u_out.shape, generator=generator, dtype=u_out.dtype).to(u_out.device)
    x_t = flow_sample(u_out, t, eps, sigma_min)
    prediction = model(u_in, cond.with_time(t), x_t=x_t, generator=generator)
    return F.mse_loss(prediction, flow_target(u_out, eps, sigma_min))


# EMA gradient clipping

def new_clip_state(beta1: float = 0.99, beta2: float = 0.999, alpha: float = 2.0, kappa: float = 1.1) -> EmaClipState:
    return EmaClipState(beta1, beta2, alpha, kappa, 0, 0.0, 0.0)


def ema_clip_scale(state: EmaClipState, norm: float, literal: bool = False) -> float:
    """
    Decide the rescaling factor for a gradient of norm `norm` and advance the clip state.

    Two EMAs of past gradient norms are kept: the slow one (beta2) sets the threshold alpha * g2_hat, the fast one
    (beta1) the target kappa * g1_hat. Both are bias-corrected and updated with the norm after clipping. The first
    call never clips.

    With `literal`, the slow EMA is updated with beta1 and a clipped gradient is multiplied by kappa * g1_hat
    instead of being rescaled to that norm.

    Returns: the factor to multiply the gradient by, 1.0 when nothing is clipped

    """
    scale = 1.0
    if state.i != 0:
        g1_hat = state.g1 / (1 - state.beta1 ** state.i)
        g2_hat = state.g2 / (1 - (state.beta1 if literal else state.beta2) ** state.i)
        if norm > state.alpha * g2_hat:
            scale = state.kappa * g1_hat if literal else state.kappa * g1_hat / norm

    clipped_norm = norm * scale
    state.g1 = state.beta1 * state.g1 + (1 - state.beta1) * clipped_norm
    slow = state.beta1 if literal else state.beta2
    state.g2 = slow * state.g2 + (1 - slow) * clipped_norm
    state.i += 1
    return scale


def global_norm(grads: Sequence[torch.Tensor]) -> float:
    if not grads:
        return 0.0
    return float(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(grad) for grad in grads])))


def ema_grad_clip(state: EmaClipState, grads: Sequence[torch.Tensor], literal: bool = False) -> Tuple[float, bool]:
    """
    Clip `grads` in place against the EMA thresholds in `state`.

    Returns: (norm before clipping, whether the gradients were rescaled)

    """
    norm = global_norm(grads)
    scale = ema_clip_scale(state, norm, literal)
    if scale != 1.0:
        for grad in grads:
            grad.mul_(scale)
    return norm, scale != 1.0


# data

@dataclass
class TrainingSource:
    name: str
    trajectories: List[Trajectory]

    @property
    def pde_kind(self) -> str:
        return self.trajectories[0].meta.pde_kind

    @property
    def field_types(self) -> List[str]:
        return list(self.trajectories[0].field_types)


@dataclass
class Batch:
    source: str
    u_in: torch.Tensor
    u_out: torch.Tensor
    cond: Conditioning

    @property
    def size(self) -> int:
        return self.u_in.shape[0]


class PairDataset:
    """
    (input window, next snapshot) pairs over one or more datasets. A pair is (source, trajectory, start): the input
    is snapshots [start, start + history) and the target is snapshot start + history.
    """

    def __init__(self, sources: Sequence[TrainingSource], history: int = 1, dtype: torch.dtype = torch.float32):
        self.sources = [source for source in sources if source.trajectories]
        self.history = history
        self.dtype = dtype
        self.pairs = [(source_index, traj_index, start)
                      for source_index, source in enumerate(self.sources)
                      for traj_index, traj in enumerate(source.trajectories)
                      for start in range(traj.n_steps - history)]
        if not self.pairs:
            raise EmptyDatasetError(f'No training pairs with history {history} in {[s.name for s in sources]}')

    def __len__(self) -> int:
        return len(self.pairs)

    def batch(self, pairs: Sequence[Tuple[int, int, int]]) -> Batch:
        source = self.sources[pairs[0][0]]
        inputs, targets = [], []
        for source_index, traj_index, start in pairs:
            if source_index != pairs[0][0]:
                raise EmptyDatasetError('A batch must come from a single dataset')
            values = source.trajectories[traj_index].values
            inputs.append(torch.as_tensor(np.asarray(values[start:start + self.history]), dtype=self.dtype))
            targets.append(torch.as_tensor(np.asarray(values[start + self.history:start + self.history + 1]),
                                           dtype=self.dtype))
        cond = Conditioning.from_names(source.pde_kind, source.field_types, batch=len(pairs),
                                       periodic=source.trajectories[0].meta.periodic)
        return Batch(source=source.name, u_in=torch.stack(inputs), u_out=torch.stack(targets), cond=cond)

    def micro_batches(self, micro_batch: int, seed: int, epoch: int) -> List[List[Tuple[int, int, int]]]:
        """
        Seeded per-epoch order: pairs are shuffled within each dataset, cut into full micro batches, and the micro
        batches of all datasets are shuffled together.
        """
        rng = np.random.default_rng([seed, epoch])
        chunks = []
        for source_index in range(len(self.sources)):
            members = [pair for pair in self.pairs if pair[0] == source_index]
            order = rng.permutation(len(members))
            shuffled = [members[index] for index in order]
            chunks.extend(shuffled[start:start + micro_batch]
                          for start in range(0, len(shuffled) - micro_batch + 1, micro_batch))
        return [chunks[index] for index in rng.permutation(len(chunks))]


def step_generator(seed: int, step: int) -> torch.Generator:
    """
    Random stream for one optimizer step. Resuming at `step` replays exactly the same draws.
    """
    generator = torch.Generator()
    generator.manual_seed(int(np.random.SeedSequence([seed, step]).generate_state(1)[0]))
    return generator


# metrics

class MetricsWriter:

    def __init__(self, path: str):
        self.path = path
        self._handle = open(path, 'a', encoding='utf-8')

    def write(self, record: Dict[str, Any]):
        self._handle.write(ujson.dumps(record) + '\n')
        self._handle.flush()

    def close(self):
        self._handle.close()

    def __enter__(self) -> 'MetricsWriter':
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()


def read_metrics(path: str) -> List[Dict[str, Any]]:
    with open(path, 'r', encoding='utf-8') as handle:
        return [ujson.loads(line) for line in handle if line.strip()]


# trainer

def make_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    trainable = [param for param in model.parameters() if param.requires_grad]
    return torch.optim.AdamW(trainable, lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.eps,
                             weight_decay=cfg.weight_decay)


def make_ema(model: nn.Module, decay: float) -> AveragedModel:
    return AveragedModel(model, multi_avg_fn=get_ema_multi_avg_fn(decay))


class Trainer:

    def __init__(self, model: nn.Module, cfg: TrainConfig,
                 optimizer: Optional[torch.optim.Optimizer] = None,
                 ema: Optional[AveragedModel] = None,
                 clip_state: Optional[EmaClipState] = None,
                 metrics: Optional[MetricsWriter] = None,
                 after_step: Optional[Callable[['Trainer', Dict[str, Any]], None]] = None,
                 stats: Optional[Dict[str, FieldStats]] = None):
        self.model = model
        self.cfg = cfg.validate()
        model_cfg = getattr(model, 'cfg', None)
        if isinstance(model_cfg, ModelConfig) and model_cfg.diffusion != (cfg.objective == OBJECTIVE_FLOW_MATCHING):
            raise TrainConfigError(f'objective {cfg.objective!r} does not match a model with '
                                   f'diffusion={model_cfg.diffusion}')
        if cfg.clip_literal:
            LOGGER.warning('Using the literal EMA clipping variant: the slow EMA uses beta1 and clipped gradients '
                           'are multiplied by kappa * g1_hat')
        self.optimizer = optimizer or make_optimizer(model, cfg)
        self.ema = ema or make_ema(model, cfg.ema_decay)
        self.clip_state = clip_state or new_clip_state()
        self.metrics = metrics
        self.after_step = after_step
        self.stats = stats or {}
        self.step = 0
        self.epoch = 0
        self.epoch_step = 0
        self.history = []  # type: List[Dict[str, Any]]

    @property
    def trainable_parameters(self) -> List[nn.Parameter]:
        return [param for param in self.model.parameters() if param.requires_grad]

    def batch_loss(self, batch: Batch, generator: torch.Generator) -> torch.Tensor:
        if self.cfg.objective == OBJECTIVE_FLOW_MATCHING:
            return loss_flow_matching(self.model, batch.u_in, batch.cond, batch.u_out, self.cfg.sigma_min, generator)
        return loss_supervised(self.model, batch.u_in, batch.cond, batch.u_out, generator)

    def train_step(self, micro_batches: Sequence[Batch]) -> Dict[str, Any]:
        """
        One optimizer step over `micro_batches`: gradients of the per-micro-batch losses are accumulated with
        weight 1 / len(micro_batches), clipped, applied by AdamW, then folded into the EMA weights.
        """
        self.model.train()
        generator = step_generator(self.cfg.seed, self.step)
        parameters = self.trainable_parameters
        self.optimizer.zero_grad(set_to_none=False)

        losses = []
        for index, batch in enumerate(micro_batches):
            loss = self.batch_loss(batch, generator)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise NonFiniteLossError(self.step, value, {'source': batch.source, 'micro_batch': index,
                                                            'epoch': self.epoch, 'lr': self.cfg.lr,
                                                            'last_loss': self.history[-1]['loss']
                                                            if self.history else None})
            backward(loss / len(micro_batches), parameters)
            losses.append(value)

        grads = [param.grad for param in parameters]
        if self.cfg.clip:
            grad_norm, clipped = ema_grad_clip(self.clip_state, grads, self.cfg.clip_literal)
        else:
            grad_norm, clipped = global_norm(grads), False
        self.optimizer.step()
        self.ema.update_parameters(self.model)
        self.step += 1

        record = {'step': self.step, 'epoch': self.epoch, 'loss': float(np.mean(losses)), 'grad_norm': grad_norm,
                  'clipped': clipped, 'lr': self.optimizer.param_groups[0]['lr']}
        self.history.append(record)
        if self.metrics:
            self.metrics.write(record)
        if self.after_step:
            self.after_step(self, record)
        return record

    def steps_per_epoch(self, data: PairDataset) -> int:
        return len(data.micro_batches(self.cfg.micro_batch, self.cfg.seed, 0)) // self.cfg.accumulation_steps

    def _epoch_groups(self, data: PairDataset, epoch: int) -> Iterator[List[Tuple[int, int, int]]]:
        chunks = data.micro_batches(self.cfg.micro_batch, self.cfg.seed, epoch)
        n = self.cfg.accumulation_steps
        for start in range(0, len(chunks) - n + 1, n):
            yield chunks[start:start + n]

    def train_epoch(self, data: PairDataset) -> Dict[str, Any]:
        """
        Run the remaining optimizer steps of the current epoch (all of them unless resumed mid-epoch).
        """
        records = []
        for position, group in enumerate(self._epoch_groups(data, self.epoch)):
            if position < self.epoch_step:
                continue
            if self.cfg.max_steps is not None and self.step >= self.cfg.max_steps:
                break
            records.append(self.train_step([data.batch(chunk) for chunk in group]))
            self.epoch_step = position + 1
        else:
            self.epoch += 1
            self.epoch_step = 0
        losses = [record['loss'] for record in records]
        summary = {'epoch': self.epoch, 'steps': len(records), 'loss_curve': losses,
                   'mean_loss': float(np.mean(losses)) if losses else None,
                   'clipped_steps': sum(record['clipped'] for record in records)}
        LOGGER.info(f'Epoch done after step {self.step}: mean loss {summary["mean_loss"]}, '
                    f'{summary["clipped_steps"]} clipped step(s)')
        return summary

    def fit(self, data: PairDataset, checkpoint_dir: Optional[str] = None) -> List[Dict[str, Any]]:
        if self.steps_per_epoch(data) == 0:
            raise EmptyDatasetError(f'{len(data)} pairs do not fill one effective batch of {self.cfg.effective_batch}')
        summaries = []
        while self.epoch < self.cfg.epochs:
            if self.cfg.max_steps is not None and self.step >= self.cfg.max_steps:
                break
            summaries.append(self._train_epoch_with_checkpoints(data, checkpoint_dir))
        if checkpoint_dir:
            save_checkpoint(os.path.join(checkpoint_dir, f'final{CHECKPOINT_SUFFIX}'), self)
        return summaries

    def _train_epoch_with_checkpoints(self, data: PairDataset, checkpoint_dir: Optional[str]) -> Dict[str, Any]:
        if not checkpoint_dir or not self.cfg.checkpoint_every:
            return self.train_epoch(data)
        previous = self.after_step

        def checkpointing(trainer: 'Trainer', record: Dict[str, Any]):
            if previous:
                previous(trainer, record)
            if trainer.step % trainer.cfg.checkpoint_every == 0:
                save_checkpoint(os.path.join(checkpoint_dir, checkpoint_name(trainer.step)), trainer)

        self.after_step = checkpointing
        try:
            return self.train_epoch(data)
        finally:
            self.after_step = previous


def train_epoch(model: nn.Module, data: PairDataset, cfg: TrainConfig, clip_state: Optional[EmaClipState] = None,
                ema_weights: Optional[AveragedModel] = None,
                optimizer: Optional[torch.optim.Optimizer] = None) -> Dict[str, Any]:
    trainer = Trainer(model, cfg, optimizer=optimizer, ema=ema_weights, clip_state=clip_state)
    return trainer.train_epoch(data)


class TrainerBuilder:
    ATTRIBUTES = {
        '_model_config': {'kwarg': 'model_config', 'default': None},
        '_train_config': {'kwarg': 'train_config', 'default': None},
        '_model_seed': {'kwarg': 'model_seed', 'default': 0},
        '_metrics_path': {'kwarg': 'metrics_path', 'default': None},
        '_resume_from': {'kwarg': 'resume_from', 'default': None},
        '_stats': {'kwarg': 'stats', 'default': {}},
        '_after_step_callback': {'kwarg': None, 'default': None},
    }

    def __init__(self, model_config: ModelConfig,
                 train_config: Optional[TrainConfig] = None,
                 model_seed: Optional[int] = None,
                 metrics_path: Optional[str] = None,
                 resume_from: Optional[str] = None,
                 stats: Optional[Dict[str, FieldStats]] = None):
        self.override(model_config=model_config, train_config=train_config or TrainConfig(), model_seed=model_seed,
                      metrics_path=metrics_path, resume_from=resume_from, stats=stats)

    @staticmethod
    def from_builder(builder: 'TrainerBuilder') -> 'TrainerBuilder':
        return deepcopy(builder)

    def override(self, model_config: Optional[ModelConfig] = None,
                 train_config: Optional[TrainConfig] = None,
                 model_seed: Optional[int] = None,
                 metrics_path: Optional[str] = None,
                 resume_from: Optional[str] = None,
                 stats: Optional[Dict[str, FieldStats]] = None) -> 'TrainerBuilder':
        _locals = locals()
        for attribute, settings in self.ATTRIBUTES.items():
            _arg = _locals.get(settings.get('kwarg'))
            if _arg is not None:
                setattr(self, attribute, _arg)
            elif not hasattr(self, attribute):
                setattr(self, attribute, deepcopy(settings.get('default')))
        return self

    def after_step(self, callback: Callable[[Trainer, Dict[str, Any]], None] = None) -> 'TrainerBuilder':
        self._after_step_callback = callback
        return self

    def build(self) -> Trainer:
        train_config = self._train_config.validate()
        model = build(self._model_config, self._model_seed).to(train_config.torch_dtype)
        metrics = MetricsWriter(self._metrics_path) if self._metrics_path else None
        trainer = Trainer(model, train_config, metrics=metrics, after_step=self._after_step_callback,
                          stats=self._stats)
        if self._resume_from:
            load_checkpoint(self._resume_from, trainer)
        return trainer


# checkpoints

def checkpoint_name(step: int) -> str:
    return f'step-{step:07d}{CHECKPOINT_SUFFIX}'


def _to_numpy(tensor: torch.Tensor) -> np.ndarray:
    return tensor.detach().cpu().numpy()


def checkpoint_tensors(trainer: Trainer) -> Dict[str, np.ndarray]:
    tensors = {}
    names = {}
    for name, param in trainer.model.named_parameters():
        tensors[f'param/{name}'] = _to_numpy(param)
        names[param] = name
    for name, param in trainer.ema.module.named_parameters():
        tensors[f'ema/{name}'] = _to_numpy(param)
    for param, state in trainer.optimizer.state.items():
        for key in ('exp_avg', 'exp_avg_sq'):
            if key in state:
                tensors[f'optim/{names[param]}/{key}'] = _to_numpy(state[key])
    return tensors


def save_checkpoint(path: str, trainer: Trainer, extra: Optional[Dict[str, Any]] = None) -> str:
    model_cfg = getattr(trainer.model, 'cfg', None)
    meta = {
        'step': trainer.step,
        'epoch': trainer.epoch,
        'epoch_step': trainer.epoch_step,
        'ema_n_averaged': int(trainer.ema.n_averaged),
        'clip_state': dict(trainer.clip_state._asdict()),
        'train_config': trainer.cfg.to_dict(),
        'model_config': model_cfg.to_dict() if isinstance(model_cfg, ModelConfig) else None,
        'stats': {name: stats.to_dict() for name, stats in trainer.stats.items()},
    }
    meta.update(extra or {})
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    write_checkpoint(path, checkpoint_tensors(trainer), meta)
    LOGGER.info(f'Saved checkpoint at step {trainer.step} to {path}')
    return path


def config_diff(saved: Dict[str, Any], current: Dict[str, Any]) -> Dict[str, Tuple[Any, Any]]:
    return {key: (saved.get(key), current.get(key)) for key in sorted(set(saved) | set(current))
            if saved.get(key) != current.get(key)}


def _copy_parameters(module: nn.Module, tensors: Dict[str, np.ndarray], prefix: str):
    with torch.no_grad():
        for name, param in module.named_parameters():
            key = f'{prefix}/{name}'
            if key not in tensors:
                raise CheckpointMismatchError({key: ('missing', list(param.shape))})
            value = torch.from_numpy(tensors[key])
            if tuple(value.shape) != tuple(param.shape):
                raise CheckpointMismatchError({key: (list(value.shape), list(param.shape))})
            param.copy_(value)


def load_checkpoint(path: str, trainer: Trainer) -> Dict[str, Any]:
    """
    Restore parameters, EMA weights, AdamW moments, clip state and counters into `trainer`.
    """
    tensors, meta = read_checkpoint(path)
    model_cfg = getattr(trainer.model, 'cfg', None)
    if isinstance(model_cfg, ModelConfig) and meta.get('model_config') is not None:
        diff = config_diff(meta['model_config'], model_cfg.to_dict())
        if diff:
            raise CheckpointMismatchError(diff)

    _copy_parameters(trainer.model, tensors, 'param')
    _copy_parameters(trainer.ema.module, tensors, 'ema')
    trainer.ema.n_averaged.fill_(meta.get('ema_n_averaged', 0))

    step = int(meta.get('step', 0))
    for name, param in trainer.model.named_parameters():
        moments = {key: tensors.get(f'optim/{name}/{key}') for key in ('exp_avg', 'exp_avg_sq')}
        if moments['exp_avg'] is None or moments['exp_avg_sq'] is None:
            continue
        trainer.optimizer.state[param] = {
            'step': torch.tensor(float(step)),
            'exp_avg': torch.from_numpy(moments['exp_avg']).to(param),
            'exp_avg_sq': torch.from_numpy(moments['exp_avg_sq']).to(param),
        }

    clip = meta.get('clip_state')
    if clip:
        trainer.clip_state = EmaClipState(**clip)
    trainer.step = step
    trainer.epoch = int(meta.get('epoch', 0))
    trainer.epoch_step = int(meta.get('epoch_step', 0))
    trainer.stats = {name: FieldStats.from_dict(value) for name, value in meta.get('stats', {}).items()}
    LOGGER.info(f'Resumed from {path} at step {step}')
    return meta


def load_model(path: str, use_ema: bool = True,
               expected: Optional[ModelConfig] = None) -> Tuple[PdeTransformer, Dict[str, Any]]:
    """
    Rebuild the model stored in a checkpoint, with its EMA weights by default.
    """
    tensors, meta = read_checkpoint(path)
    if meta.get('model_config') is None:
        raise CheckpointMismatchError({'model_config': (None, 'required')})
    if expected is not None:
        diff = config_diff(meta['model_config'], expected.to_dict())
        if diff:
            raise CheckpointMismatchError(diff)
    cfg = ModelConfig.from_dict(meta['model_config'])
    train_cfg = TrainConfig.from_dict(meta.get('train_config', {}))
    model = build(cfg, 0).to(train_cfg.torch_dtype)
    _copy_parameters(model, tensors, 'ema' if use_ema else 'param')
    model.eval()
    return model, meta


