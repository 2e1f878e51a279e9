import os

import numpy as np
import pytest
import ujson

import pdet
from pdet import cli
from pdet.config import RESOLVED_CONFIG_NAME
from pdet.exceptions import ConfigValidationError, SolverSpecError
from pdet.fields import read_dataset


def gen(out, *extra):
    return cli.main(['gen', '--pde', 'diff', '--res', '16', '--traj', '3', '--steps', '3', '--out', str(out),
                     '--log-level', 'WARNING'] + list(extra))


@pytest.fixture
def errors(global_settings):
    seen = []
    global_settings.exception_callback = seen.append
    return seen


def test_gen_writes_dataset_and_resolved_config(tmp_path):
    assert gen(tmp_path) == 0
    trajs = read_dataset(str(tmp_path / 'diff.pdet'))
    assert [traj.values.shape for traj in trajs] == [(3, 1, 16, 16)] * 3
    assert os.path.exists(tmp_path / RESOLVED_CONFIG_NAME)


def test_gen_is_deterministic_per_seed(tmp_path):
    for name, seed in (('a', '1'), ('b', '1'), ('c', '2')):
        assert gen(tmp_path / name, '--seed', seed) == 0
    a, b, c = (read_dataset(str(tmp_path / name / 'diff.pdet')) for name in 'abc')
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a, b))
    assert not np.array_equal(a[0].values, c[0].values)


def test_invalid_config_exits_with_one(tmp_path, errors):
    assert cli.main(['gen', '--pde', 'heat-3d', '--out', str(tmp_path)]) == 1
    assert isinstance(errors[0], ConfigValidationError)
    assert cli.main(['gen', '--set', 'nonsense', '--out', str(tmp_path)]) == 1
    assert cli.main(['train', '--out', str(tmp_path), '--set', f'data.datasets={tmp_path / "none.pdet"}']) == 1


def test_runtime_failure_exits_with_two(tmp_path, monkeypatch, errors):
    def broken(self, path):
        raise RuntimeError('disk on fire')

    monkeypatch.setattr(cli.DatasetBuilder, 'write', broken)
    assert gen(tmp_path) == 2
    assert str(errors[0]) == 'disk on fire'


def test_gen_long_rollout_set(tmp_path, errors):
    assert cli.main(['gen', '--pde', 'gs-alpha', '--res', '16', '--traj', '2', '--steps', '2', '--long-rollout',
                     '--out', str(tmp_path), '--log-level', 'WARNING']) == 0
    trajs = read_dataset(str(tmp_path / 'gs-alpha-long.pdet'))
    assert len(trajs) == 2 and all(traj.meta.long_rollout for traj in trajs)
    assert cli.main(['gen', '--pde', 'diff', '--long-rollout', '--out', str(tmp_path)]) == 1
    assert isinstance(errors[0], SolverSpecError)


def test_parser_rejects_other_devices():
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(['gen', '--device', 'cuda'])


def test_dataset_name():
    assert cli.dataset_name('/data/gs-alpha.pdet') == 'gs-alpha'


@pytest.mark.slow
def test_gen_train_eval_sample(tmp_path):
    data_dir, run_dir = tmp_path / 'data', tmp_path / 'run'
    assert cli.main(['gen', '--pde', 'diff', '--res', '16', '--traj', '6', '--steps', '4',
                     '--out', str(data_dir)]) == 0
    dataset = str(data_dir / 'diff.pdet')

    assert cli.main(['train', '--out', str(run_dir), '--set', f'data.datasets={dataset}',
                     '--set', 'train.effective_batch=2', '--set', 'train.micro_batch=2',
                     '--set', 'train.checkpoint_every=2']) == 0
    checkpoint = run_dir / 'ckpt' / 'final.pdet-ckpt'
    assert checkpoint.exists()
    assert os.path.exists(run_dir / RESOLVED_CONFIG_NAME)
    with open(run_dir / 'metrics.jsonl', encoding='utf-8') as handle:
        records = [ujson.loads(line) for line in handle]
    assert records and all(np.isfinite(record['loss']) for record in records)

    assert cli.main(['eval', '--ckpt', str(checkpoint), '--dataset', dataset, '--horizons', '1,2',
                     '--split', 'all', '--sweep', '1,2']) == 0
    with open(run_dir / 'report' / 'report.json', encoding='utf-8') as handle:
        report = ujson.load(handle)
    assert [(row['horizon'], row['n_trajectories']) for row in report['rows']] == [(1, 6), (2, 6)]
    assert os.path.exists(run_dir / 'report' / 'sweep.csv')

    sample = str(tmp_path / 'sample.pdet')
    assert cli.main(['sample', '--ckpt', str(checkpoint), '--dataset', dataset, '--index', '2',
                     '--rollout', '2', '--out', sample]) == 0
    written = read_dataset(sample)[0]
    assert written.values.shape == (3, 1, 16, 16)
    assert np.allclose(written.values[0], read_dataset(dataset)[2].values[0])


@pytest.mark.slow
def test_desk_training_learns_diffusion(tmp_path):
    data_dir, run_dir = tmp_path / 'data', tmp_path / 'run'
    assert cli.main(['gen', '--pde', 'diff', '--res', '64', '--traj', '60', '--steps', '30',
                     '--out', str(data_dir), '--log-level', 'WARNING']) == 0
    dataset = str(data_dir / 'diff.pdet')

    assert cli.main(['train', '--out', str(run_dir), '--log-level', 'WARNING', '--set', f'data.datasets={dataset}',
                     '--set', 'train.lr=1e-3', '--set', 'train.effective_batch=16', '--set', 'train.micro_batch=16',
                     '--set', 'train.epochs=20', '--set', 'train.max_steps=500']) == 0
    with open(run_dir / 'metrics.jsonl', encoding='utf-8') as handle:
        assert sum(1 for _ in handle) == 500

    assert cli.main(['eval', '--ckpt', str(run_dir / 'ckpt' / 'final.pdet-ckpt'), '--dataset', dataset,
                     '--horizons', '1', '--set', 'eval.use_ema=false', '--log-level', 'WARNING']) == 0
    with open(run_dir / 'report' / 'report.json', encoding='utf-8') as handle:
        row = ujson.load(handle)['rows'][0]
    assert row['n_trajectories'] == 9
    assert row['nrmse'] < 0.10


def test_package_metadata():
    assert pdet.__author__ == 'The pdet developers'
    assert pdet.__version__ == pdet.VERSION
