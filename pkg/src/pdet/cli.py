"""
pdet command line: gen, train, eval and sample.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""
import argparse
import logging
import os
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .common import LOGGER, PdetGlobalSettings, exit_code_handler, worker_cap, THREADS_ENV_VAR
from .config import load_run_config, write_resolved
from .exceptions import ConfigValidationError, EmptyDatasetError
from .fields import compute_stats, normalize, read_dataset, write_dataset
from .inference import evaluate_suite, rollout, sampler_sweep, write_report, write_sweep
from .model import Conditioning
from .spectral import DatasetBuilder, default_split
from .training import (CHECKPOINT_SUFFIX, PairDataset, TrainerBuilder, TrainingSource, load_model)
from .types import DatasetSplit, FieldStats, Trajectory, TrajectoryMeta

DATASET_SUFFIX = '.pdet'
LONG_ROLLOUT_SUFFIX = '-long'
LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR',)


def dataset_name(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def _split_indices(split: DatasetSplit, which: str, count: int) -> List[int]:
    if which == 'all':
        return list(range(count))
    return list(getattr(split, which))


def _configure(args: argparse.Namespace):
    logging.basicConfig(level=getattr(logging, args.log_level), format='%(asctime)s %(name)s %(levelname)s %(message)s')
    if os.environ.get(THREADS_ENV_VAR):
        threads = worker_cap()
        PdetGlobalSettings().threads = threads
        torch.set_num_threads(threads)


def _config_args(args: argparse.Namespace) -> List[str]:
    overrides = list(args.set or [])
    if getattr(args, 'workers', None) is not None:
        overrides.append(f'run.workers={args.workers}')
    if getattr(args, 'seed', None) is not None:
        overrides.append(f'run.seed={args.seed}')
    return overrides


@exit_code_handler
def cmd_gen(args: argparse.Namespace):
    overrides = _config_args(args)
    for flag, key in (('pde', 'data.pde'), ('res', 'data.resolution'), ('traj', 'data.trajectories'),
                      ('steps', 'data.steps'), ('out', 'run.out')):
        value = getattr(args, flag)
        if value is not None:
            overrides.append(f'{key}={value}')
    cfg = load_run_config(args.config, overrides)

    out = cfg.out
    os.makedirs(out, exist_ok=True)
    builder = DatasetBuilder(cfg.data['pde'], resolution=cfg.data['resolution'],
                             n_trajectories=cfg.data['trajectories'], n_steps=cfg.data['steps'],
                             seed=cfg.run['seed'], workers=cfg.run['workers'])
    name = cfg.data['pde']
    if args.long_rollout:
        builder.long_rollout(args.traj, args.steps)
        cfg.data['trajectories'], cfg.data['steps'] = builder.size
        name += LONG_ROLLOUT_SUFFIX
    path = os.path.join(out, f'{name}{DATASET_SUFFIX}')
    builder.write(path)
    write_resolved(cfg, out)
    LOGGER.info(f'Dataset written to {path}')


def _load_sources(paths: Sequence[str], seed: int) -> Dict[str, Dict]:
    if not paths:
        raise ConfigValidationError([('data.datasets', 'at least one dataset path is required')])
    missing = [path for path in paths if not os.path.exists(path)]
    if missing:
        raise ConfigValidationError([('data.datasets', f'{path} does not exist') for path in missing])
    sources = {}
    for path in paths:
        trajs = read_dataset(path)
        name = dataset_name(path)
        meta = trajs[0].meta
        sources[name] = {'path': path, 'trajectories': trajs,
                         'split': default_split(meta.pde_kind, len(trajs), seed, meta.long_rollout)}
    return sources


@exit_code_handler
def cmd_train(args: argparse.Namespace):
    overrides = _config_args(args)
    if args.out is not None:
        overrides.append(f'run.out={args.out}')
    cfg = load_run_config(args.config, overrides)
    train_cfg = cfg.train_config()
    sources = _load_sources(cfg.data['datasets'], train_cfg.seed)

    max_channels = max(source['trajectories'][0].n_fields for source in sources.values())
    if 'max_channels' not in cfg.model:
        cfg.model['max_channels'] = max_channels
    model_cfg = cfg.model_config()

    stats, training_sources = {}, []
    for name, source in sources.items():
        trajs, split = source['trajectories'], source['split']
        stats[name] = compute_stats(trajs, split)
        training_sources.append(TrainingSource(name, [normalize(trajs[index], stats[name]) for index in split.train]))

    out = cfg.out
    checkpoint_dir = os.path.join(out, 'ckpt')
    os.makedirs(checkpoint_dir, exist_ok=True)
    write_resolved(cfg, out)

    builder = TrainerBuilder(model_cfg, train_cfg, model_seed=cfg.run['seed'],
                             metrics_path=os.path.join(out, 'metrics.jsonl'), resume_from=args.resume, stats=stats)
    trainer = builder.build()
    data = PairDataset(training_sources, history=train_cfg.history, dtype=train_cfg.torch_dtype)
    LOGGER.info(f'Training {model_cfg.name} ({sum(p.numel() for p in trainer.model.parameters())} parameters) '
                f'on {len(data)} pairs from {list(sources)}')
    try:
        trainer.fit(data, checkpoint_dir=checkpoint_dir)
    finally:
        if trainer.metrics:
            trainer.metrics.close()


def _evaluation_sets(paths: Sequence[str], which: str, seed: int) -> Dict[str, Dict]:
    sets = {}
    for path in paths:
        name = dataset_name(path)
        if not os.path.exists(path):
            sets[name] = {'source': path, 'indices': None}
            continue
        trajs = read_dataset(path)
        long_rollout = trajs[0].meta.long_rollout
        split = default_split(trajs[0].meta.pde_kind, len(trajs), seed, long_rollout)
        sets[name] = {'source': trajs, 'indices': _split_indices(split, which, len(trajs)),
                      'long_rollout': long_rollout}
    return sets


@exit_code_handler
def cmd_eval(args: argparse.Namespace):
    overrides = _config_args(args)
    if args.horizons:
        overrides.append(f'eval.horizons={args.horizons}')
    if args.sampler_steps is not None:
        overrides.append(f'eval.sampler_steps={args.sampler_steps}')
    if args.sweep:
        overrides.append(f'eval.sweep={args.sweep}')
    if args.split:
        overrides.append(f'data.split={args.split}')
    cfg = load_run_config(args.config, overrides)

    expected = cfg.model_config() if args.config else None
    model, meta = load_model(args.ckpt, use_ema=cfg.eval['use_ema'], expected=expected)
    stats = {name: FieldStats.from_dict(value) for name, value in meta.get('stats', {}).items()}
    seed = meta.get('train_config', {}).get('seed', cfg.run['seed'])
    paths = args.dataset or cfg.data['datasets']
    if not paths:
        raise ConfigValidationError([('data.datasets', 'at least one dataset is required for eval')])

    sets = _evaluation_sets(paths, cfg.data['split'], seed)
    for name, entry in sets.items():
        base = name[:-len(LONG_ROLLOUT_SUFFIX)] if name.endswith(LONG_ROLLOUT_SUFFIX) else name
        if entry.get('long_rollout') and name not in stats and base in stats:
            stats[name] = stats[base]
        if name not in stats:
            LOGGER.warning(f'No normalization statistics stored for {name}, evaluating in raw units')
    datasets = {name: entry['source'] for name, entry in sets.items()}
    indices = {name: entry['indices'] for name, entry in sets.items() if entry['indices'] is not None}

    report_dir = os.path.join(args.out or os.path.dirname(os.path.dirname(os.path.abspath(args.ckpt))), 'report')
    kwargs = dict(stats=stats, indices=indices, history=model.cfg.temporal_depth, seed=cfg.run['seed'])
    report = evaluate_suite(model, datasets, cfg.eval['horizons'], sampler_steps=cfg.eval['sampler_steps'], **kwargs)
    write_report(report, report_dir)
    if cfg.eval['sweep']:
        if not model.cfg.diffusion:
            LOGGER.warning('Sampler sweep requested for a supervised model, every row will be identical')
        rows = sampler_sweep(model, datasets, cfg.eval['sweep'], cfg.eval['horizons'], **kwargs)
        write_sweep(rows, os.path.join(report_dir, 'sweep.csv'))


@exit_code_handler
def cmd_sample(args: argparse.Namespace):
    cfg = load_run_config(args.config, _config_args(args))
    model, meta = load_model(args.ckpt, use_ema=cfg.eval['use_ema'])
    if not model.cfg.diffusion and args.steps is not None:
        LOGGER.warning('--steps only applies to flow-matching models, predicting deterministically')

    trajs = read_dataset(args.dataset)
    if not 0 <= args.index < len(trajs):
        raise EmptyDatasetError(f'{args.dataset} has no trajectory {args.index} (it holds {len(trajs)})')
    traj = trajs[args.index]
    name = dataset_name(args.dataset)
    stats = meta.get('stats', {}).get(name)
    history = model.cfg.temporal_depth

    generator = torch.Generator()
    generator.manual_seed(cfg.run['seed'])
    cond = Conditioning.from_names(traj.meta.pde_kind, traj.field_types, batch=1, periodic=traj.meta.periodic)
    result = rollout(model, traj.values[:history], cond, args.rollout,
                     stats=FieldStats.from_dict(stats) if stats else None,
                     sampler_steps=args.steps or cfg.eval['sampler_steps'], generator=generator)
    if result.truncated:
        LOGGER.warning(f'Sample became non-finite after {result.truncated_at} step(s)')

    values = np.concatenate([np.asarray(traj.values[:history], dtype=np.float64), result.predictions])
    sampled_meta = TrajectoryMeta(pde_kind=traj.meta.pde_kind, params=dict(traj.meta.params),
                                  domain_extent=traj.meta.domain_extent, periodic=traj.meta.periodic,
                                  seed=cfg.run['seed'], dt=traj.meta.dt, t0=traj.meta.t0)
    out = args.out or os.path.join(cfg.out, f'{name}-sample-{args.index}{DATASET_SUFFIX}')
    directory = os.path.dirname(out)
    if directory:
        os.makedirs(directory, exist_ok=True)
    write_dataset([Trajectory(values=values, field_types=traj.field_types, meta=sampled_meta)], out)


def _common(parser: argparse.ArgumentParser):
    parser.add_argument('--config', help='INI run configuration')
    parser.add_argument('--set', action='append', metavar='SECTION.KEY=VALUE', help='override a config key')
    parser.add_argument('--log-level', default='INFO', choices=LOG_LEVELS)
    parser.add_argument('--seed', type=int)
    parser.add_argument('--device', default='cpu', choices=('cpu',))
    parser.add_argument('--workers', type=int, help=f'worker processes, capped by {THREADS_ENV_VAR}')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='pdet', description='PDE transformer: data, training and evaluation')
    commands = parser.add_subparsers(dest='command', required=True)

    gen = commands.add_parser('gen', help='simulate a dataset')
    _common(gen)
    gen.add_argument('--pde')
    gen.add_argument('--res', type=int)
    gen.add_argument('--traj', type=int)
    gen.add_argument('--steps', type=int)
    gen.add_argument('--out')
    gen.add_argument('--long-rollout', action='store_true',
                     help='write the separate long-rollout test set of an unsteady or chaotic PDE')
    gen.set_defaults(handler=cmd_gen)

    train = commands.add_parser('train', help='train a model')
    _common(train)
    train.add_argument('--out')
    train.add_argument('--resume', help=f'checkpoint ({CHECKPOINT_SUFFIX}) to resume from')
    train.set_defaults(handler=cmd_train)

    evaluate = commands.add_parser('eval', help='roll out a checkpoint and report nRMSE')
    _common(evaluate)
    evaluate.add_argument('--ckpt', required=True)
    evaluate.add_argument('--dataset', action='append')
    evaluate.add_argument('--horizons', help='comma-separated rollout horizons')
    evaluate.add_argument('--split', choices=('train', 'val', 'test', 'all'))
    evaluate.add_argument('--sampler-steps', type=int)
    evaluate.add_argument('--sweep', help='comma-separated Euler step counts for the sampler sweep')
    evaluate.add_argument('--out')
    evaluate.set_defaults(handler=cmd_eval)

    sample = commands.add_parser('sample', help='write a predicted trajectory')
    _common(sample)
    sample.add_argument('--ckpt', required=True)
    sample.add_argument('--dataset', required=True)
    sample.add_argument('--index', type=int, default=0)
    sample.add_argument('--steps', type=int, help='Euler steps per prediction')
    sample.add_argument('--rollout', type=int, default=1, help='number of predicted snapshots')
    sample.add_argument('--out')
    sample.set_defaults(handler=cmd_sample)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure(args)
    return args.handler(args)


if __name__ == '__main__':
    raise SystemExit(main())
