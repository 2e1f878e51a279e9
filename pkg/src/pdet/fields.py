"""
Simulation data on disk and in memory.

Container layout shared by datasets (`.pdet`) and checkpoints (`.pdet-ckpt`):

    8 bytes   magic (b'PDETDATA' or b'PDETCKPT')
    8 bytes   little-endian u64, manifest length in bytes
    N bytes   UTF-8 JSON manifest
    ...       raw little-endian payload blocks, offsets relative to the end of the manifest
"""
import json
import struct
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from marshmallow import ValidationError

from . import CHECKPOINT_MAGIC, DATASET_MAGIC
from .common import LOGGER
from .exceptions import (EmptyDatasetError, FieldStatsMismatchError, MagicMismatchError, ManifestMismatchError,
                         TruncatedPayloadError, ContractError)
from .schemas import (CHECKPOINT_FORMAT, CONTAINER_VERSION, DATASET_FORMAT, CheckpointManifestSchema,
                      DatasetManifestSchema)
from .types import DatasetSplit, FieldStats, ManifestEntry, Trajectory, TrajectoryMeta

HEADER = struct.Struct('<8sQ')
STD_FLOOR = 1e-12
DEFAULT_VAL_FRACTION = 0.15

_LITTLE_ENDIAN_DTYPES = {
    'float32': np.dtype('<f4'),
    'float64': np.dtype('<f8'),
    'int64': np.dtype('<i8'),
}


def _write_container(path: str, magic: bytes, manifest: Dict, blocks: Sequence[np.ndarray]) -> None:
    encoded = json.dumps(manifest, sort_keys=True).encode('utf-8')
    with open(path, 'wb') as handle:
        handle.write(HEADER.pack(magic, len(encoded)))
        handle.write(encoded)
        for block in blocks:
            handle.write(np.ascontiguousarray(block).tobytes(order='C'))


def _read_container(path: str, magic: bytes) -> Tuple[Dict, memoryview]:
    with open(path, 'rb') as handle:
        raw = handle.read()

    if raw[:len(magic)] != magic[:len(raw)] or len(raw) == 0:
        raise MagicMismatchError(f'{path}: expected magic {magic!r}, found {bytes(raw[:8])!r}')
    if len(raw) < HEADER.size:
        raise TruncatedPayloadError(f'{path}: file ends inside the {HEADER.size}-byte header')

    _, manifest_length = HEADER.unpack_from(raw)
    payload_start = HEADER.size + manifest_length
    if len(raw) < payload_start:
        raise TruncatedPayloadError(f'{path}: manifest declares {manifest_length} bytes, '
                                    f'only {len(raw) - HEADER.size} present')
    try:
        manifest = json.loads(raw[HEADER.size:payload_start].decode('utf-8'))
    except (UnicodeDecodeError, ValueError) as exc:
        raise ManifestMismatchError(f'{path}: manifest is not valid UTF-8 JSON ({exc})')
    return manifest, memoryview(raw)[payload_start:]


def _block(path: str, payload: memoryview, dtype: str, shape: Sequence[int], offset: int, nbytes: int) -> np.ndarray:
    np_dtype = _LITTLE_ENDIAN_DTYPES[dtype]
    expected = int(np.prod(shape, dtype=np.int64)) * np_dtype.itemsize
    if nbytes != expected:
        raise ManifestMismatchError(f'{path}: shape {list(shape)} of {dtype} needs {expected} bytes, '
                                    f'manifest says {nbytes}')
    if offset + nbytes > len(payload):
        raise TruncatedPayloadError(f'{path}: block at offset {offset} needs {nbytes} bytes, '
                                    f'payload has {len(payload) - offset if offset < len(payload) else 0}')
    flat = np.frombuffer(payload[offset:offset + nbytes], dtype=np_dtype)
    return flat.reshape(shape).astype(np_dtype.newbyteorder('='), copy=True)


def _meta_to_dict(meta: TrajectoryMeta) -> Dict:
    return {
        'pde_kind': meta.pde_kind,
        'params': {key: float(value) for key, value in meta.params.items()},
        'domain_extent': [float(value) for value in meta.domain_extent],
        'periodic': [bool(value) for value in meta.periodic],
        'seed': int(meta.seed),
        'dt': float(meta.dt),
        't0': float(meta.t0),
        'long_rollout': bool(meta.long_rollout),
    }


def write_dataset(trajs: Sequence[Trajectory], path: str) -> None:
    if not trajs:
        raise EmptyDatasetError('Refusing to write an empty dataset')
    shape = trajs[0].values.shape
    for index, traj in enumerate(trajs):
        if traj.values.shape != shape or traj.field_types != trajs[0].field_types:
            raise ContractError(f'Trajectory {index} has shape {traj.values.shape} / fields {traj.field_types}, '
                                f'expected {shape} / {trajs[0].field_types}')

    entries, blocks, offset = [], [], 0
    for traj in trajs:
        block = np.asarray(traj.values, dtype='<f4')
        entries.append({
            'shape': list(block.shape),
            'dtype': 'float32',
            'offset': offset,
            'nbytes': block.nbytes,
            'field_types': list(traj.field_types),
            'meta': _meta_to_dict(traj.meta),
        })
        blocks.append(block)
        offset += block.nbytes

    manifest = {'format': DATASET_FORMAT, 'version': CONTAINER_VERSION, 'byte_order': 'little',
                'trajectories': entries}
    _write_container(path, DATASET_MAGIC, manifest, blocks)
    LOGGER.info(f'Wrote {len(trajs)} trajectories of shape {list(shape)} to {path}')


def read_dataset(path: str) -> List[Trajectory]:
    manifest, payload = _read_container(path, DATASET_MAGIC)
    try:
        loaded = DatasetManifestSchema().load(manifest)
    except ValidationError as exc:
        raise ManifestMismatchError(f'{path}: invalid dataset manifest {exc.messages}')

    trajs = []
    for index, entry in enumerate(loaded['trajectories']):
        if len(entry['field_types']) != entry['shape'][1]:
            raise ManifestMismatchError(f'{path}: trajectory {index} lists {len(entry["field_types"])} field types '
                                        f'for {entry["shape"][1]} fields')
        values = _block(path, payload, entry['dtype'], entry['shape'], entry['offset'], entry['nbytes'])
        trajs.append(Trajectory(values=values, field_types=entry['field_types'], meta=entry['meta']))
    return trajs


def write_checkpoint(path: str, tensors: Dict[str, np.ndarray], meta: Optional[Dict] = None) -> None:
    entries, blocks, offset = [], [], 0
    for name, value in tensors.items():
        array = np.asarray(value)
        dtype = str(array.dtype)
        if dtype not in _LITTLE_ENDIAN_DTYPES:
            raise ContractError(f'Checkpoint entry {name} has unsupported dtype {dtype}')
        block = array.astype(_LITTLE_ENDIAN_DTYPES[dtype], copy=False)
        entries.append({'name': name, 'dtype': dtype, 'shape': list(block.shape), 'offset': offset,
                        'nbytes': block.nbytes})
        blocks.append(block)
        offset += block.nbytes

    manifest = {'format': CHECKPOINT_FORMAT, 'version': CONTAINER_VERSION, 'byte_order': 'little',
                'entries': entries, 'meta': meta or {}}
    _write_container(path, CHECKPOINT_MAGIC, manifest, blocks)


def read_checkpoint(path: str) -> Tuple[Dict[str, np.ndarray], Dict]:
    manifest, payload = _read_container(path, CHECKPOINT_MAGIC)
    try:
        loaded = CheckpointManifestSchema().load(manifest)
    except ValidationError as exc:
        raise ManifestMismatchError(f'{path}: invalid checkpoint manifest {exc.messages}')

    tensors = {}
    for entry in loaded['entries']:  # type: ManifestEntry
        if entry.name in tensors:
            raise ManifestMismatchError(f'{path}: duplicate checkpoint entry {entry.name}')
        tensors[entry.name] = _block(path, payload, entry.dtype, entry.shape, entry.offset, entry.nbytes)
    return tensors, loaded['meta']


def compute_stats(trajs: Sequence[Trajectory], split: DatasetSplit) -> FieldStats:
    """
    Per-field mean and standard deviation over the training trajectories of `split` only.
    """
    if not split.train:
        raise EmptyDatasetError('Cannot compute normalization statistics from an empty training split')
    stacked = np.stack([np.asarray(trajs[index].values, dtype=np.float64) for index in split.train])
    mean = stacked.mean(axis=(0, 1, 3, 4))
    std = stacked.std(axis=(0, 1, 3, 4))
    for field_index in np.flatnonzero(std <= STD_FLOOR):
        LOGGER.warning(f'Field {trajs[split.train[0]].field_types[field_index]} is constant over the training split, '
                       f'normalizing with std=1')
    std = np.where(std <= STD_FLOOR, 1.0, std)
    return FieldStats(mean=mean, std=std)


def _checked_stats(traj: Trajectory, stats: FieldStats) -> Tuple[np.ndarray, np.ndarray]:
    if stats.n_fields != traj.n_fields:
        raise FieldStatsMismatchError(f'Statistics cover {stats.n_fields} fields, trajectory has {traj.n_fields}')
    std = np.asarray(stats.std, dtype=np.float64)
    if np.any(std <= 0):
        LOGGER.warning('Non-positive std in normalization statistics, leaving those fields unscaled')
        std = np.where(std <= 0, 1.0, std)
    return np.asarray(stats.mean, dtype=np.float64)[:, None, None], std[:, None, None]


def normalize(traj: Trajectory, stats: FieldStats) -> Trajectory:
    mean, std = _checked_stats(traj, stats)
    values = ((traj.values.astype(np.float64) - mean) / std).astype(traj.values.dtype)
    return Trajectory(values=values, field_types=traj.field_types, meta=traj.meta)


def denormalize(traj: Trajectory, stats: FieldStats) -> Trajectory:
    mean, std = _checked_stats(traj, stats)
    values = (traj.values.astype(np.float64) * std + mean).astype(traj.values.dtype)
    return Trajectory(values=values, field_types=traj.field_types, meta=traj.meta)


def split(trajs: Union[int, Sequence[Trajectory]], seed: int,
          fractions: Tuple[float, float, float] = (1.0 - DEFAULT_VAL_FRACTION, DEFAULT_VAL_FRACTION, 0.0),
          test_range: Optional[Tuple[int, int]] = None) -> DatasetSplit:
    """
    Deterministic train/val/test split.

    Args:
        trajs: the trajectories, or just their count
        seed: permutation seed
        fractions: (train, val, test) shares; with `test_range` the test share is ignored and the other two
            apply to the remaining trajectories
        test_range: half-open id range held out as the test split, e.g. (500, 600)

    Returns: a DatasetSplit with sorted index lists

    """
    count = trajs if isinstance(trajs, int) else len(trajs)
    if count <= 0:
        raise EmptyDatasetError('Cannot split an empty dataset')
    if any(fraction < 0 for fraction in fractions) or sum(fractions) > 1.0 + 1e-12:
        raise ContractError(f'Split fractions must be non-negative and sum to at most 1, got {fractions}')

    if test_range is not None:
        start, stop = test_range
        if not 0 <= start < stop <= count:
            raise ContractError(f'Test range {test_range} outside of [0, {count})')
        test = list(range(start, stop))
        pool = [index for index in range(count) if not start <= index < stop]
        train_share, val_share = fractions[0], fractions[1]
        n_test = 0
    else:
        test = []
        pool = list(range(count))
        train_share, val_share = fractions[0], fractions[1]
        n_test = int(round(fractions[2] * count))

    order = np.random.default_rng(seed).permutation(len(pool))
    shuffled = [pool[index] for index in order]
    n_val = int(round(val_share * len(pool)))
    n_train = min(int(round(train_share * len(pool))), len(pool) - n_val - n_test)

    val = shuffled[:n_val]
    if n_test:
        test = shuffled[n_val:n_val + n_test]
    train = shuffled[n_val + n_test:n_val + n_test + n_train]
    return DatasetSplit(train=sorted(train), val=sorted(val), test=sorted(test))
