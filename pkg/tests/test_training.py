import copy
import os

import numpy as np
import pytest
import torch

from pdet.exceptions import CheckpointMismatchError, EmptyDatasetError, NonFiniteLossError, TrainConfigError
from pdet.model import ModelConfig, build
from pdet.training import (OBJECTIVE_FLOW_MATCHING, PairDataset, TrainConfig, Trainer, TrainerBuilder,
                           TrainingSource, checkpoint_name, ema_clip_scale, ema_grad_clip, flow_sample,
                           flow_target, load_model, new_clip_state, read_metrics, step_generator, train_epoch)
from pdet.types import FieldStats, Trajectory, TrajectoryMeta


def make_source(name='diff', n_traj=4, n_steps=3, seed=0, size=16):
    rng = np.random.default_rng(seed)
    trajectories = [Trajectory(values=rng.standard_normal((n_steps, 1, size, size)), field_types=['density'],
                               meta=TrajectoryMeta(pde_kind='diff', seed=index))
                    for index in range(n_traj)]
    return TrainingSource(name=name, trajectories=trajectories)


def small_config(**kwargs):
    values = dict(effective_batch=4, micro_batch=2, epochs=2, dtype='float64')
    values.update(kwargs)
    return TrainConfig(**values)


@pytest.fixture
def data(float64):
    return PairDataset([make_source()], dtype=torch.float64)


def test_flow_path_endpoints_and_velocity(float64):
    u, eps = torch.randn(3, 1, 1, 4, 4), torch.randn(3, 1, 1, 4, 4)
    assert torch.allclose(flow_sample(u, torch.zeros(3), eps, 1e-4), eps)
    assert torch.allclose(flow_sample(u, torch.ones(3), eps, 1e-4), u + 1e-4 * eps)
    t, h = torch.full((3,), 0.3), 1e-3
    slope = (flow_sample(u, t + h, eps, 1e-4) - flow_sample(u, t, eps, 1e-4)) / h
    assert torch.allclose(slope, flow_target(u, eps, 1e-4), atol=1e-10)


def test_clip_scale_sequence():
    state = new_clip_state()
    assert ema_clip_scale(state, 1.0) == 1.0
    assert ema_clip_scale(state, 1.0) == 1.0
    assert ema_clip_scale(state, 10.0) == pytest.approx(0.11)
    assert state.i == 3


def test_clip_scale_literal_variant():
    state = new_clip_state()
    ema_clip_scale(state, 1.0, literal=True)
    ema_clip_scale(state, 1.0, literal=True)
    assert ema_clip_scale(state, 10.0, literal=True) == pytest.approx(1.1)


def test_first_gradient_is_never_clipped():
    assert ema_clip_scale(new_clip_state(), 1e6) == 1.0


def test_grad_clip_rescales_in_place():
    state = new_clip_state()
    assert ema_grad_clip(state, [torch.tensor([3.0, 4.0])]) == (pytest.approx(5.0), False)
    grads = [torch.tensor([30.0, 40.0])]
    norm, clipped = ema_grad_clip(state, grads)
    assert norm == pytest.approx(50.0) and clipped
    assert torch.allclose(grads[0], torch.tensor([3.3, 4.4]))


def reference_clipped_norms(norms, beta1=0.99, beta2=0.999, alpha=2.0, kappa=1.1):
    g1 = g2 = 0.0
    clipped = []
    for i, g in enumerate(norms):
        if i > 0 and g > alpha * g2 / (1 - beta2 ** i):
            g = kappa * g1 / (1 - beta1 ** i)
        g1 = beta1 * g1 + (1 - beta1) * g
        g2 = beta2 * g2 + (1 - beta2) * g
        clipped.append(g)
    return clipped


def test_clip_scale_follows_scalar_reference():
    norms = np.random.default_rng(0).lognormal(0.0, 1.0, size=1000)
    state = new_clip_state()
    clipped = [norm * ema_clip_scale(state, norm) for norm in norms]
    assert clipped == pytest.approx(reference_clipped_norms(norms), rel=1e-10)
    assert sum(a != b for a, b in zip(clipped, norms)) > 0


def test_spike_after_steady_norms_is_clipped():
    state = new_clip_state()
    for _ in range(50):
        assert ema_clip_scale(state, 1.0) == 1.0
    grads = [torch.tensor([60.0, 80.0])]
    norm, clipped = ema_grad_clip(state, grads)
    assert norm == pytest.approx(100.0) and clipped
    assert float(torch.linalg.vector_norm(grads[0])) == pytest.approx(1.1)
    assert ema_clip_scale(state, 1.0) == 1.0


def test_train_config_validation():
    assert TrainConfig().accumulation_steps == 8
    with pytest.raises(TrainConfigError):
        TrainConfig(effective_batch=10, micro_batch=4).validate()
    with pytest.raises(TrainConfigError):
        TrainConfig(objective='l1').validate()
    cfg = small_config(betas=(0.8, 0.9))
    assert TrainConfig.from_dict(dict(cfg.to_dict(), unknown=1)) == cfg


def test_step_generator_is_reproducible():
    first = torch.randn(4, generator=step_generator(3, 10))
    assert torch.equal(first, torch.randn(4, generator=step_generator(3, 10)))
    assert not torch.equal(first, torch.randn(4, generator=step_generator(3, 11)))


def test_pair_dataset_windows(float64):
    source = make_source(n_traj=2, n_steps=5)
    data = PairDataset([source], history=2, dtype=torch.float64)
    assert len(data) == 2 * 3
    batch = data.batch([(0, 1, 2), (0, 0, 0)])
    assert batch.u_in.shape == (2, 2, 1, 16, 16)
    assert batch.u_out.shape == (2, 1, 1, 16, 16)
    assert np.array_equal(batch.u_out[0, 0].numpy(), source.trajectories[1].values[4])
    assert batch.cond.pde_class.tolist() == [0, 0]
    with pytest.raises(EmptyDatasetError):
        PairDataset([source], history=5)


def test_micro_batches_stay_within_one_dataset(float64):
    data = PairDataset([make_source('a', n_traj=2), make_source('b', n_traj=1, n_steps=5)])
    chunks = data.micro_batches(2, seed=0, epoch=0)
    assert all(len({pair[0] for pair in chunk}) == 1 for chunk in chunks)
    assert sorted(pair for chunk in chunks for pair in chunk) == sorted(data.pairs)
    assert chunks == data.micro_batches(2, seed=0, epoch=0)
    assert len({str(data.micro_batches(2, seed=0, epoch=epoch)) for epoch in range(5)}) > 1


def test_accumulated_gradients_match_full_batch(randomize, test_config, float64):
    source = make_source(n_traj=8, n_steps=2)
    data = PairDataset([source], dtype=torch.float64)
    pairs = list(data.pairs)
    model = randomize(build(test_config))
    results = []
    for micro in (8, 2):
        copy_ = copy.deepcopy(model)
        cfg = TrainConfig(effective_batch=8, micro_batch=micro, clip=False, dtype='float64')
        trainer = Trainer(copy_, cfg, optimizer=torch.optim.SGD(copy_.parameters(), lr=1.0))
        record = trainer.train_step([data.batch(pairs[start:start + micro]) for start in range(0, 8, micro)])
        results.append((copy_, record))
    (full, full_record), (accumulated, accumulated_record) = results
    assert full_record['loss'] == pytest.approx(accumulated_record['loss'], rel=1e-12)
    assert full_record['grad_norm'] == pytest.approx(accumulated_record['grad_norm'], rel=1e-10)
    for a, b in zip(full.parameters(), accumulated.parameters()):
        assert torch.allclose(a, b, rtol=1e-10, atol=1e-14)


def test_ema_weights_follow_closed_form(randomize, test_config, data):
    model = randomize(build(test_config))
    trainer = Trainer(model, small_config(clip=False, ema_decay=0.5),
                      optimizer=torch.optim.SGD(model.parameters(), lr=0.1))
    batch = [data.batch(data.pairs[:2])]
    param = model.unembed.proj.weight
    snapshots = []
    for _ in range(3):
        trainer.train_step(batch)
        snapshots.append(param.detach().clone())
    expected = snapshots[0]
    for snapshot in snapshots[1:]:
        expected = 0.5 * expected + 0.5 * snapshot
    assert torch.allclose(trainer.ema.module.unembed.proj.weight, expected, atol=1e-14)
    assert int(trainer.ema.n_averaged) == 3


def test_objective_must_match_model(test_config):
    with pytest.raises(TrainConfigError):
        Trainer(build(test_config), TrainConfig(objective=OBJECTIVE_FLOW_MATCHING))
    with pytest.raises(TrainConfigError):
        Trainer(build(ModelConfig.preset('TEST', diffusion=True)), TrainConfig())


def test_flow_matching_step_is_reproducible(data):
    cfg = ModelConfig.preset('TEST', diffusion=True, class_dropout_prob=0.0)
    model = build(cfg)
    records = []
    for _ in range(2):
        trainer = Trainer(copy.deepcopy(model), small_config(objective=OBJECTIVE_FLOW_MATCHING))
        records.append(trainer.train_step([data.batch(data.pairs[:2])]))
    assert np.isfinite(records[0]['loss'])
    assert records[0]['loss'] == records[1]['loss']


def test_non_finite_loss_stops_training(test_config, float64):
    source = make_source(n_traj=2, n_steps=2)
    for traj in source.trajectories:
        traj.values[1] = np.nan
    data = PairDataset([source], dtype=torch.float64)
    trainer = Trainer(build(test_config), small_config())
    with pytest.raises(NonFiniteLossError) as info:
        trainer.train_step([data.batch(data.pairs[:2])])
    assert info.value.step == 0
    assert info.value.diagnostics['source'] == 'diff'


def test_fit_needs_one_full_step(test_config, data):
    trainer = Trainer(build(test_config), small_config(effective_batch=16, micro_batch=2))
    with pytest.raises(EmptyDatasetError):
        trainer.fit(data)


def test_train_epoch_function(test_config, data):
    summary = train_epoch(build(test_config), data, small_config())
    assert summary['epoch'] == 1 and summary['steps'] == 2
    assert len(summary['loss_curve']) == 2 and np.isfinite(summary['mean_loss'])


def test_fit_writes_metrics_and_checkpoints(tmp_path, test_config, data):
    seen = []
    builder = TrainerBuilder(test_config, small_config(checkpoint_every=2), metrics_path=str(tmp_path / 'm.jsonl'),
                             stats={'diff': FieldStats(mean=np.array([0.5]), std=np.array([2.0]))}) \
        .after_step(lambda trainer, record: seen.append(record['step']))
    trainer = builder.build()
    try:
        summaries = trainer.fit(data, checkpoint_dir=str(tmp_path / 'ckpt'))
    finally:
        trainer.metrics.close()

    assert seen == [1, 2, 3, 4]
    assert [summary['steps'] for summary in summaries] == [2, 2]
    records = read_metrics(str(tmp_path / 'm.jsonl'))
    assert [record['step'] for record in records] == [1, 2, 3, 4]
    assert set(records[0]) == {'step', 'epoch', 'loss', 'grad_norm', 'clipped', 'lr'}
    assert not records[0]['clipped']
    assert set(os.listdir(tmp_path / 'ckpt')) == {checkpoint_name(2), checkpoint_name(4), 'final.pdet-ckpt'}

    model, meta = load_model(str(tmp_path / 'ckpt' / 'final.pdet-ckpt'))
    assert meta['step'] == 4
    assert meta['stats']['diff'] == {'mean': [0.5], 'std': [2.0]}
    assert not model.training
    for a, b in zip(model.parameters(), trainer.ema.module.parameters()):
        assert torch.equal(a, b)
    with pytest.raises(CheckpointMismatchError) as info:
        load_model(str(tmp_path / 'ckpt' / 'final.pdet-ckpt'),
                   expected=ModelConfig.preset('TEST', class_dropout_prob=0.5))
    assert 'class_dropout_prob' in info.value.diff


def test_resume_reproduces_uninterrupted_run(tmp_path, test_config, data):
    cfg = small_config()
    straight = TrainerBuilder(test_config, cfg).build()
    straight.fit(data)

    interrupted = TrainerBuilder(test_config, small_config(max_steps=3)).build()
    interrupted.fit(data, checkpoint_dir=str(tmp_path))
    assert (interrupted.step, interrupted.epoch, interrupted.epoch_step) == (3, 1, 1)

    resumed = TrainerBuilder(test_config, cfg, resume_from=str(tmp_path / 'final.pdet-ckpt')).build()
    resumed.fit(data)

    assert resumed.step == 4
    losses = [record['loss'] for record in interrupted.history + resumed.history]
    assert losses == pytest.approx([record['loss'] for record in straight.history], rel=1e-12)
    for a, b in zip(straight.model.parameters(), resumed.model.parameters()):
        assert torch.allclose(a, b, rtol=1e-12, atol=1e-15)
    for a, b in zip(straight.ema.module.parameters(), resumed.ema.module.parameters()):
        assert torch.allclose(a, b, rtol=1e-12, atol=1e-15)
    assert tuple(resumed.clip_state) == pytest.approx(tuple(straight.clip_state))


def test_resume_rejects_a_different_model(tmp_path, test_config, data):
    trainer = TrainerBuilder(test_config, small_config(max_steps=1)).build()
    trainer.fit(data, checkpoint_dir=str(tmp_path))
    builder = TrainerBuilder(ModelConfig.preset('TEST', class_dropout_prob=0.5), small_config(),
                             resume_from=str(tmp_path / 'final.pdet-ckpt'))
    with pytest.raises(CheckpointMismatchError):
        builder.build()


def test_builder_copies_are_independent(test_config):
    builder = TrainerBuilder(test_config, small_config())
    other = TrainerBuilder.from_builder(builder).override(model_seed=3)
    first, second = builder.build(), other.build()
    assert first.model.embed.proj.weight.dtype == torch.float64
    assert not torch.equal(first.model.embed.proj.weight, second.model.embed.proj.weight)
