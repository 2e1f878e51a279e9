import numpy as np
import pytest

from pdet import pde_kinds
from pdet.exceptions import (ContractError, EmptyDatasetError, InitialConditionRangeError, SimulationBlowUpError,
                             SolverSpecError, StabilityError)
from pdet.fields import read_dataset
from pdet.spectral import (RECIPES, DatasetBuilder, ETDRKIntegrator, SolverSpec, SpectralState, default_split,
                           etdrk_step, ic_diffused_noise, ic_gaussian_blobs, ic_grf, ic_truncated_fourier, recipe,
                           sample_solver_spec, simulate, vorticity_solver_step)


def grid_coordinates(n, extent=1.0):
    x = np.arange(n) * extent / n
    return np.meshgrid(x, x, indexing='ij')


def logistic_error(order, dt, rate=1.0, u0=0.1, horizon=1.0):
    integrator = ETDRKIntegrator(np.array([rate]), lambda u: -u ** 2, dt, order=order)
    u = integrator.advance(np.array([u0]), int(round(horizon / dt)))
    growth = np.exp(rate * horizon)
    exact = rate * u0 * growth / (rate + u0 * (growth - 1))
    return abs(u[0] - exact)


@pytest.mark.parametrize('order, expected_ratio', [(2, 4.0), (4, 16.0)])
def test_etdrk_convergence_order(order, expected_ratio):
    ratio = logistic_error(order, 0.2) / logistic_error(order, 0.1)
    assert expected_ratio * 0.7 < ratio < expected_ratio * 1.3


def test_diffusion_decays_single_mode_exactly():
    x, y = grid_coordinates(32)
    initial = (np.sin(2 * np.pi * 2 * x) * np.cos(2 * np.pi * 3 * y))[None]
    spec = SolverSpec(pde_kind=pde_kinds.DIFF, resolution=(32, 32), dt_store=0.01, n_steps=5,
                      params={'nu_x': 0.01, 'nu_y': 0.02})
    traj = simulate(spec, initial=initial)

    rate = 0.01 * (4 * np.pi) ** 2 + 0.02 * (6 * np.pi) ** 2
    for step in range(5):
        assert np.allclose(traj.values[step], initial * np.exp(-rate * 0.01 * step), atol=1e-12)
    assert traj.field_types == ['density']
    assert traj.meta.dt == 0.01


def test_taylor_green_vortex_decays_by_viscosity_only():
    x, y = grid_coordinates(32)
    omega = np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y)
    stepped = vorticity_solver_step(omega, viscosity=1e-3, dt=0.1)
    decay = np.exp(-1e-3 * 2 * (2 * np.pi) ** 2 * 0.1)
    assert np.allclose(stepped, omega * decay, atol=1e-10)


def test_simulation_is_deterministic_per_seed():
    spec = sample_solver_spec(pde_kinds.FISHER, index=2, seed=7, resolution=16, n_steps=3)
    first, second = simulate(spec), simulate(spec)
    assert np.array_equal(first.values, second.values)


def test_every_kind_has_a_recipe():
    assert set(RECIPES) == set(pde_kinds.ALL)
    assert recipe(pde_kinds.GS_ALPHA).substeps == 30
    assert recipe(pde_kinds.KS).warmup_steps == 200
    with pytest.raises(SolverSpecError):
        recipe('heat-3d')


def test_sampled_parameters_stay_in_range():
    for index in range(5):
        spec = sample_solver_spec(pde_kinds.KDV, index, seed=1)
        assert 30.0 <= spec.domain_extent[0] < 120.0
        assert 5e-5 <= spec.params['viscosity'] < 1e-3
        assert spec.params['convection'] == -6.0
    assert sample_solver_spec(pde_kinds.DIFF, 0, 1).params == sample_solver_spec(pde_kinds.DIFF, 0, 1).params


def test_spec_validation():
    with pytest.raises(SolverSpecError):
        SolverSpec(pde_kind=pde_kinds.DIFF, resolution=(48, 48)).validate()
    with pytest.raises(SolverSpecError):
        SolverSpec(pde_kind='heat-3d').validate()


def test_dataset_builder_shapes_and_callback():
    seen = []
    builder = DatasetBuilder(pde_kinds.DIFF, resolution=16, n_trajectories=3, n_steps=4, seed=5) \
        .after_trajectory(lambda index, traj: seen.append(index))
    trajs = builder.build()
    assert seen == [0, 1, 2]
    assert [traj.values.shape for traj in trajs] == [(4, 1, 16, 16)] * 3

    again = DatasetBuilder.from_builder(builder).after_trajectory(None).build()
    assert all(np.array_equal(a.values, b.values) for a, b in zip(trajs, again))


def test_dataset_builder_rejects_unknown_kind():
    with pytest.raises(SolverSpecError):
        DatasetBuilder('heat-3d')


def test_gray_scott_has_two_fields():
    traj = DatasetBuilder(pde_kinds.GS_ALPHA, resolution=16, n_trajectories=1, n_steps=2).build()[0]
    assert traj.values.shape == (2, 2, 16, 16)
    assert traj.field_types == ['concentration-a', 'concentration-b']


def test_blow_up_is_reported():
    spec = SolverSpec(pde_kind=pde_kinds.DIFF, resolution=(8, 8), params={'nu_x': 0.01, 'nu_y': 0.01}, n_steps=2)
    with pytest.raises(SimulationBlowUpError):
        simulate(spec, initial=np.full((1, 8, 8), 1e7))


def test_non_finite_step_names_the_equation():
    integrator = ETDRKIntegrator(np.array([-1.0]), lambda u: u * np.inf, 0.1, pde_kind='fisher')
    with pytest.raises(StabilityError) as info:
        integrator.step(np.array([1.0]))
    assert info.value.pde_kind == 'fisher'


def test_initializers(rng):
    field = ic_truncated_fourier(32, cutoff=4, seed=0)
    assert np.isclose(np.abs(field).max(), 1.0)
    assert abs(field.mean()) < 1e-12
    spectrum = np.abs(np.fft.rfft2(field))
    index = np.abs(np.fft.fftfreq(32, d=1 / 32))
    assert spectrum[index >= 4].max() < 1e-10
    assert spectrum[:, 4:].max() < 1e-10

    assert np.isclose(np.abs(ic_grf(32, 3.0, rng)).max(), 1.0)
    assert np.isclose(np.abs(ic_diffused_noise(32, 0.001, rng)).max(), 1.0)
    c_a, c_b = ic_gaussian_blobs(32, 4, 0.2, seed=0)
    assert np.allclose(c_a + c_b, 1.0)
    assert c_b.min() >= 0.0 and c_b.max() <= 1.0


@pytest.mark.parametrize('call', [
    lambda: ic_truncated_fourier(16, 11, 0),
    lambda: ic_grf(16, 4.0, 0),
    lambda: ic_diffused_noise(16, 0.5, 0),
    lambda: ic_gaussian_blobs(16, 4, 0.0, 0),
])
def test_initializer_ranges(call):
    with pytest.raises(InitialConditionRangeError):
        call()


def test_default_split_layouts():
    assert default_split(pde_kinds.DIFF, 600, seed=0).test == list(range(500, 600))
    assert default_split(pde_kinds.GS_DELTA, 100, seed=0).test == list(range(80, 100))
    small = default_split(pde_kinds.KS, 20, seed=0)
    assert (len(small.train), len(small.val), len(small.test)) == (14, 3, 3)


def test_single_etdrk_step_on_spectral_state():
    x, y = grid_coordinates(16)
    state = SpectralState.from_real((np.sin(2 * np.pi * 2 * x) * np.cos(2 * np.pi * 3 * y))[None], (1.0, 1.0))
    stepped = etdrk_step(state, -0.01 * state.grid.k_squared[None], None, dt=0.1)
    decay = np.exp(-0.01 * 52 * np.pi ** 2 * 0.1)
    assert np.allclose(stepped.to_real(), state.to_real() * decay, atol=1e-12)
    with pytest.raises(ContractError):
        SpectralState(coeffs=np.zeros((3, 3), dtype=complex), grid=state.grid)


def logistic(u0, rate, t):
    growth = np.exp(rate * t)
    return u0 * growth / (1 + u0 * (growth - 1))


@pytest.mark.parametrize('order, tolerance', [(2, 1e-4), (4, 1e-5)])
def test_homogeneous_fisher_follows_logistic_growth(order, tolerance):
    spec = SolverSpec(pde_kind=pde_kinds.FISHER, resolution=(8, 8), dt_store=0.05, substeps=50, n_steps=4,
                      params={'diffusivity': 0.001, 'reactivity': 10.0}, order=order)
    traj = simulate(spec, initial=np.full((1, 8, 8), 0.3))
    for step, t in enumerate((0.0, 0.05, 0.1, 0.15)):
        exact = logistic(0.3, 10.0, t)
        assert np.abs(traj.values[step] - exact).max() / exact < tolerance


def smooth_velocity(n, offsets, seed):
    return np.stack([0.5 * ic_truncated_fourier(n, 4, seed=seed + index) + offset
                     for index, offset in enumerate(offsets)])


def test_burgers_conserves_mean_velocity():
    spec = SolverSpec(pde_kind=pde_kinds.BURGERS, resolution=(32, 32), dt_store=0.01, substeps=50, n_steps=5,
                      params={'viscosity': 3e-4})
    initial = smooth_velocity(32, (0.3, -0.2), seed=1)
    means = simulate(spec, initial=initial).values.mean(axis=(2, 3))
    assert np.abs(means - initial.mean(axis=(1, 2))).max() < 1e-8


def test_inviscid_kdv_conserves_mean():
    spec = SolverSpec(pde_kind=pde_kinds.KDV, resolution=(32, 32), domain_extent=(30.0, 30.0), dt_store=0.05,
                      substeps=10, n_steps=5, order=4,
                      params={'viscosity': 0.0, 'convection': -6.0, 'dispersivity': 1.0})
    initial = smooth_velocity(32, (0.1, 0.05), seed=3) * 0.4
    means = simulate(spec, initial=initial).values.mean(axis=(2, 3))
    assert np.abs(means - initial.mean(axis=(1, 2))).max() < 1e-8


def test_long_rollout_sets_per_kind():
    assert recipe(pde_kinds.GS_ALPHA).long_rollout == (30, 100)
    assert recipe(pde_kinds.KOLM_FLOW).long_rollout == (50, 200)
    assert recipe(pde_kinds.GS_DELTA).long_rollout is None
    assert {kind for kind, entry in RECIPES.items() if entry.long_rollout} == {
        pde_kinds.GS_ALPHA, pde_kinds.GS_BETA, pde_kinds.GS_GAMMA, pde_kinds.GS_EPSILON, pde_kinds.KS,
        pde_kinds.DECAY_TURB, pde_kinds.KOLM_FLOW}
    with pytest.raises(SolverSpecError):
        DatasetBuilder(pde_kinds.DIFF).long_rollout()


def test_long_rollout_builder(tmp_path):
    regular = DatasetBuilder(pde_kinds.KS, resolution=16, seed=2)
    long = DatasetBuilder.from_builder(regular).long_rollout()
    assert regular.size == (60, 30)
    assert long.size == (50, 200)
    regular_seeds = {spec.seed for spec in regular.specs()}
    assert not regular_seeds & {spec.seed for spec in long.specs()}

    small = DatasetBuilder(pde_kinds.GS_ALPHA, resolution=16, seed=2).long_rollout(n_trajectories=2, n_steps=3)
    trajs = small.write(str(tmp_path / 'gs-alpha-long.pdet'))
    assert [traj.values.shape for traj in trajs] == [(3, 2, 16, 16)] * 2
    assert all(traj.meta.long_rollout for traj in read_dataset(str(tmp_path / 'gs-alpha-long.pdet')))


def test_long_rollout_sets_are_all_test():
    held_out = default_split(pde_kinds.KS, 50, seed=0, long_rollout=True)
    assert (held_out.train, held_out.val, held_out.test) == ([], [], list(range(50)))
    with pytest.raises(EmptyDatasetError):
        default_split(pde_kinds.KS, 0, seed=0, long_rollout=True)
