import json
import struct

import numpy as np
import pytest

from pdet.exceptions import (ContractError, EmptyDatasetError, FieldStatsMismatchError, MagicMismatchError,
                             ManifestMismatchError, TruncatedPayloadError)
from pdet.fields import (compute_stats, denormalize, normalize, read_checkpoint, read_dataset, split,
                         write_checkpoint, write_dataset)
from pdet.types import DatasetSplit, FieldStats, Trajectory, TrajectoryMeta


def make_trajectory(rng, n_steps=3, n_fields=2, size=8, pde_kind='gs-alpha', seed=0):
    fields = ['concentration-a', 'concentration-b'][:n_fields] if pde_kind.startswith('gs') else ['density']
    meta = TrajectoryMeta(pde_kind=pde_kind, params={'feed_rate': 0.008}, domain_extent=(2.5, 2.5), seed=seed,
                          dt=30.0, t0=2250.0)
    return Trajectory(values=rng.standard_normal((n_steps, len(fields), size, size)), field_types=fields, meta=meta)


def test_dataset_keeps_values_and_metadata(tmp_path, rng):
    trajs = [make_trajectory(rng, seed=index) for index in range(3)]
    path = str(tmp_path / 'gs.pdet')
    write_dataset(trajs, path)

    loaded = read_dataset(path)
    assert len(loaded) == 3
    for original, restored in zip(trajs, loaded):
        assert restored.values.dtype == np.float32
        assert np.array_equal(restored.values, original.values.astype(np.float32))
        assert restored.field_types == original.field_types
        assert restored.meta == original.meta


def test_dataset_header_layout(tmp_path, rng):
    path = tmp_path / 'gs.pdet'
    write_dataset([make_trajectory(rng)], str(path))
    raw = path.read_bytes()
    assert raw[:8] == b'PDETDATA'
    (length,) = struct.unpack('<Q', raw[8:16])
    manifest = json.loads(raw[16:16 + length].decode('utf-8'))
    assert manifest['format'] == 'pdet-dataset'
    assert manifest['trajectories'][0]['shape'] == [3, 2, 8, 8]
    assert len(raw) == 16 + length + 3 * 2 * 8 * 8 * 4


def test_wrong_magic(tmp_path, rng):
    path = tmp_path / 'model.pdet-ckpt'
    write_checkpoint(str(path), {'w': np.zeros(2)})
    with pytest.raises(MagicMismatchError):
        read_dataset(str(path))


def test_truncated_payload(tmp_path, rng):
    path = tmp_path / 'gs.pdet'
    write_dataset([make_trajectory(rng)], str(path))
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(TruncatedPayloadError):
        read_dataset(str(path))

    path.write_bytes(raw[:12])
    with pytest.raises(TruncatedPayloadError):
        read_dataset(str(path))


def test_manifest_nbytes_mismatch(tmp_path, rng):
    path = tmp_path / 'gs.pdet'
    write_dataset([make_trajectory(rng)], str(path))
    raw = path.read_bytes()
    (length,) = struct.unpack('<Q', raw[8:16])
    manifest = json.loads(raw[16:16 + length])
    manifest['trajectories'][0]['nbytes'] -= 4
    encoded = json.dumps(manifest).encode('utf-8')
    path.write_bytes(raw[:8] + struct.pack('<Q', len(encoded)) + encoded + raw[16 + length:])
    with pytest.raises(ManifestMismatchError):
        read_dataset(str(path))


def test_unknown_pde_kind_in_manifest(tmp_path, rng):
    path = tmp_path / 'gs.pdet'
    write_dataset([make_trajectory(rng)], str(path))
    raw = path.read_bytes()
    (length,) = struct.unpack('<Q', raw[8:16])
    manifest = json.loads(raw[16:16 + length])
    manifest['trajectories'][0]['meta']['pde_kind'] = 'navier-stokes-3d'
    encoded = json.dumps(manifest).encode('utf-8')
    path.write_bytes(raw[:8] + struct.pack('<Q', len(encoded)) + encoded + raw[16 + length:])
    with pytest.raises(ManifestMismatchError):
        read_dataset(str(path))


def test_empty_and_ragged_datasets_are_refused(tmp_path, rng):
    with pytest.raises(EmptyDatasetError):
        write_dataset([], str(tmp_path / 'empty.pdet'))
    with pytest.raises(ContractError):
        write_dataset([make_trajectory(rng), make_trajectory(rng, size=16)], str(tmp_path / 'ragged.pdet'))


def test_checkpoint_keeps_dtypes_and_meta(tmp_path):
    tensors = {'param/w': np.arange(6, dtype=np.float64).reshape(2, 3),
               'param/b': np.ones(3, dtype=np.float32),
               'counts': np.array([1, 2], dtype=np.int64)}
    meta = {'step': 7, 'clip_state': {'g1': 0.125}}
    path = str(tmp_path / 'step.pdet-ckpt')
    write_checkpoint(path, tensors, meta)

    loaded, loaded_meta = read_checkpoint(path)
    assert loaded_meta == meta
    for name, value in tensors.items():
        assert loaded[name].dtype == value.dtype
        assert np.array_equal(loaded[name], value)


def test_checkpoint_rejects_unsupported_dtype(tmp_path):
    with pytest.raises(ContractError):
        write_checkpoint(str(tmp_path / 'bad.pdet-ckpt'), {'x': np.zeros(2, dtype=np.float16)})


def test_stats_use_only_the_training_split(rng):
    trajs = [make_trajectory(rng, n_fields=1, pde_kind='diff') for _ in range(4)]
    trajs[3].values[:] = 1e6
    stats = compute_stats(trajs, DatasetSplit(train=[0, 1, 2], val=[], test=[3]))
    stacked = np.stack([traj.values for traj in trajs[:3]])
    assert np.allclose(stats.mean, [stacked.mean()])
    assert np.allclose(stats.std, [stacked.std()])


def test_constant_field_normalizes_with_unit_std(rng):
    traj = make_trajectory(rng, n_fields=1, pde_kind='diff')
    traj.values[:] = 3.0
    stats = compute_stats([traj], DatasetSplit(train=[0], val=[], test=[]))
    assert stats.std[0] == 1.0
    assert np.allclose(normalize(traj, stats).values, 0.0)


def test_normalize_then_denormalize_restores_values(rng):
    traj = make_trajectory(rng)
    stats = FieldStats(mean=np.array([1.0, -2.0]), std=np.array([0.5, 4.0]))
    normalized = normalize(traj, stats)
    assert np.allclose(normalized.values[:, 1], (traj.values[:, 1] + 2.0) / 4.0)
    assert np.allclose(denormalize(normalized, stats).values, traj.values)


def test_stats_field_count_must_match(rng):
    with pytest.raises(FieldStatsMismatchError):
        normalize(make_trajectory(rng), FieldStats(mean=np.zeros(1), std=np.ones(1)))


def test_split_is_deterministic_and_disjoint():
    first = split(600, seed=3, test_range=(500, 600))
    assert first == split(600, seed=3, test_range=(500, 600))
    assert first.test == list(range(500, 600))
    assert len(first.val) == 75
    assert len(first.train) == 425
    assert not set(first.train) & set(first.val)
    assert split(600, seed=4, test_range=(500, 600)).train != first.train


def test_split_fractions_without_test_range():
    result = split(20, seed=0, fractions=(0.7, 0.15, 0.15))
    assert (len(result.train), len(result.val), len(result.test)) == (14, 3, 3)
    assert sorted(result.train + result.val + result.test) == list(range(20))


def test_split_rejects_bad_input():
    with pytest.raises(EmptyDatasetError):
        split(0, seed=0)
    with pytest.raises(ContractError):
        split(10, seed=0, test_range=(8, 12))
