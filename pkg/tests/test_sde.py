import numpy as np
import pytest

from riskcouple.errors import (EmptyEnsemble, GridMismatch, ModelError, NonPositiveDiffusion,
                               NumericOverflow)
from riskcouple.rng import brownian_increments
from riskcouple.sde import (ModelSpec, PolicySpec, TimeGrid, check_regularity, map_paths,
                            simulate, validate_model)


def test_time_grid_invariants():
    g = TimeGrid.from_step(10.0, 1e-3)
    assert g.n_steps == 10_000
    assert abs(g.n_steps * g.dt - g.horizon) <= np.spacing(g.horizon)
    with pytest.raises(GridMismatch):
        TimeGrid(1.0, 0.3, 3)
    with pytest.raises(GridMismatch):
        TimeGrid(1.0, 0.0, 1)
    with pytest.raises(GridMismatch):
        TimeGrid(0.0, 0.1, 0)


def test_validate_ou_passes(unit_grid):
    spec = ModelSpec(2, lambda t, x, u: -x + u, 1.0)
    rep = validate_model(spec, unit_grid, PolicySpec.affine(0, -1))
    assert rep.ok
    assert {name for name, _, _ in rep.checks} >= {"n_agents", "grid", "diffusion"}


def test_validate_rejects_zero_sigma(unit_grid):
    with pytest.raises(NonPositiveDiffusion):
        validate_model(ModelSpec(1, lambda t, x, u: u, 0.0), unit_grid)
    with pytest.raises(NonPositiveDiffusion):
        validate_model(ModelSpec(1, lambda t, x, u: u, lambda x: np.sin(x)), unit_grid)


def test_validate_rejects_empty_ensemble(unit_grid):
    with pytest.raises(EmptyEnsemble):
        validate_model(ModelSpec(0, lambda t, x, u: u, 1.0), unit_grid)


def test_policy_interval_must_be_nonempty():
    with pytest.raises(ModelError):
        PolicySpec.affine(0, 0, 1.0, -1.0)


def test_frozen_dynamics(unit_grid):
    spec = ModelSpec(3, lambda t, x, u: 0.0 * x, 1.0, lambda t, z, u: 0.0 * z,
                     initial_states=1.0)
    b = simulate(spec, PolicySpec.affine(), unit_grid, 5, seed=1, disable_diffusion=True)
    assert np.all(b.states == 1.0)


def test_pure_brownian_integration(unit_grid):
    spec = ModelSpec(1, lambda t, x, u: 0.0 * x, 1.0, initial_states=0.25)
    b = simulate(spec, PolicySpec.affine(), unit_grid, 50, seed=99)
    dW = brownian_increments(99, 50, 1, unit_grid.n_steps, unit_grid.dt)
    assert np.array_equal(b.brownian_increments, dW)
    assert np.allclose(b.states[:, 0, -1], 0.25 + dW[:, 0].sum(axis=1), atol=1e-13)


def test_ou_stationary_variance():
    # Euler-Maruyama OU: Var_{k+1} = (1 - theta dt)^2 Var_k + dt; the continuous
    # stationary value is 1/(2 theta) = 0.5
    grid = TimeGrid.from_step(10.0, 1e-3)
    spec = ModelSpec(1, lambda t, x, u: -x + u, 1.0)
    x_t = map_paths(lambda b: b.states[:, 0, -1], spec, PolicySpec.affine(), grid, 10_000, 4)
    v = x_t.var(ddof=1)
    se = v * np.sqrt(2.0 / (x_t.size - 1))
    assert abs(v - 0.5) <= 3 * se


def test_coupled_noise_shared_between_flags(unit_grid):
    spec = ModelSpec(2, lambda t, x, u: -x + u, 1.0,
                     lambda t, z, u: 0.3 * (z.mean(axis=-1, keepdims=True) - z))
    a = simulate(spec, PolicySpec.affine(0, -0.5), unit_grid, 20, 5, True)
    b = simulate(spec, PolicySpec.affine(0, -0.5), unit_grid, 20, 5, False)
    assert np.array_equal(a.brownian_increments, b.brownian_increments)
    assert not np.array_equal(a.states, b.states)
    assert b.interaction_values is not None


def test_seed_determinism_and_chunking(unit_grid):
    spec = ModelSpec(3, lambda t, x, u: -x + u, 1.0, lambda t, z, u: 0.1 * z)
    pol = PolicySpec.affine(0.1, -0.3)
    a = simulate(spec, pol, unit_grid, 37, 2024)
    b = simulate(spec, pol, unit_grid, 37, 2024)
    assert np.array_equal(a.states, b.states)
    chunked = map_paths(lambda bb: bb.states, spec, pol, unit_grid, 37, 2024, chunk_paths=5)
    assert np.array_equal(chunked, a.states)


def test_brownian_increment_variance(unit_grid):
    b = simulate(ModelSpec(4, lambda t, x, u: u, 1.0), PolicySpec.affine(), unit_grid,
                 500, 8)
    n = b.brownian_increments[:, 0, :].size
    dt = unit_grid.dt
    for a in range(4):
        v = b.brownian_increments[:, a, :].var(ddof=1)
        assert dt * (1 - 5 / np.sqrt(n)) <= v <= dt * (1 + 5 / np.sqrt(n))


def test_local_policy_locality(unit_grid):
    spec = ModelSpec(3, lambda t, x, u: -x + u, 1.0,
                     lambda t, z, u: z.mean(axis=-1, keepdims=True) - z)
    pol = PolicySpec.affine(0.2, -0.7)
    dW = brownian_increments(3, 10, 3, unit_grid.n_steps, unit_grid.dt)
    base = simulate(spec, pol, unit_grid, 10, 3, False, increments=dW)
    dW2 = dW.copy()
    dW2[:, 1, :] = 0.0
    other = simulate(spec, pol, unit_grid, 10, 3, False, increments=dW2)
    assert np.array_equal(base.controls[:, [0, 2]], other.controls[:, [0, 2]])
    assert not np.array_equal(base.controls[:, 1], other.controls[:, 1])


def test_euler_first_order():
    spec = ModelSpec(1, lambda t, x, u: -x * x + np.sin(t) + u, 1.0, initial_states=1.0)
    pol = PolicySpec.affine()

    def terminal(dt):
        g = TimeGrid.from_step(1.0, dt)
        return simulate(spec, pol, g, 1, 0, disable_diffusion=True).states[0, 0, -1]

    errs = []
    for dt in (0.02, 0.01, 0.005):
        errs.append(abs(terminal(dt) - terminal(dt / 10)))
    ratios = [errs[i] / errs[i + 1] for i in range(2)]
    assert all(1.7 < r < 2.3 for r in ratios), ratios


def test_numeric_overflow_reports_location():
    spec = ModelSpec(1, lambda t, x, u: x * x * x, 1.0, initial_states=10.0)
    with pytest.raises(NumericOverflow) as exc:
        simulate(spec, PolicySpec.affine(), TimeGrid(1.0, 0.1, 10), 4, 0)
    assert exc.value.step >= 1 and exc.value.path == 0


def test_per_agent_policy_shape_checked(unit_grid):
    spec = ModelSpec(3, lambda t, x, u: u, 1.0)
    pol = PolicySpec(np.zeros((2, 2)))
    with pytest.raises(ModelError):
        simulate(spec, pol, unit_grid, 2, 0)
    ok = PolicySpec(np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]))
    b = simulate(spec, ok, unit_grid, 2, 0)
    assert np.array_equal(b.controls[0, :, 0], [0.0, 1.0, 2.0])


def test_policy_clamp_and_table():
    pol = PolicySpec.affine(0.0, 10.0, -1.0, 1.0)
    assert np.array_equal(pol.controls(np.array([[-5.0, 0.05, 5.0]])), [[-1.0, 0.5, 1.0]])
    tab = PolicySpec.from_table([-1.0, 0.0, 1.0], [3.0, 2.0, 1.0])
    assert np.array_equal(tab.controls(np.array([[-0.9, 0.2, 0.7]])), [[3.0, 2.0, 1.0]])


def test_regularity_affine():
    rep = check_regularity(ModelSpec(1, lambda t, x, u: -x + u, 1.0))
    assert np.allclose(rep.lipschitz, 1.0)
    assert not rep.lipschitz_flag and not rep.growth_flag


def test_regularity_flags_quadratic():
    rep = check_regularity(ModelSpec(1, lambda t, x, u: x * x + u, 1.0))
    assert rep.lipschitz_flag
    assert rep.lipschitz[-1] > rep.lipschitz[0]


def test_regularity_sine_bounded():
    rep = check_regularity(ModelSpec(1, lambda t, x, u: np.sin(x) + u, 1.0))
    # oracle: dense scan of |cos| bounds every difference quotient by 1
    assert rep.lipschitz.max() <= 1.0 + 1e-9
    assert not rep.lipschitz_flag


def test_path_dump(tmp_path, unit_grid):
    spec = ModelSpec(2, lambda t, x, u: -x, 1.0, lambda t, z, u: 0.1 * z)
    b = simulate(spec, PolicySpec.affine(), TimeGrid(0.1, 0.01, 10), 3, 0)
    n = b.to_csv(tmp_path / "p.csv")
    assert n == 3 * 2 * 11
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0].startswith("path,agent,step")
    assert len(lines) == n + 1


def test_bundle_arrays_read_only(unit_grid):
    b = simulate(ModelSpec(1, lambda t, x, u: u, 1.0), PolicySpec.affine(), unit_grid, 2, 0)
    with pytest.raises(ValueError):
        b.states[0, 0, 0] = 1.0
