import itertools
import math

import numpy as np
import pytest
from scipy.stats import wasserstein_distance

from riskcouple.bounds import MCConfig, certify_bound_meanfield
from riskcouple.errors import EmptyMeasure, ModelError, NotConverged
from riskcouple.meanfield import (EmpiricalMeasure, FixedPointConfig, _QuantileIntegrals,
                                  concentration_probe, meanfield_coupled_model,
                                  measure_lipschitz, particle_system, solve_mckean_vlasov,
                                  wasserstein_1d)
from riskcouple.risk import CostSpec
from riskcouple.sde import ModelSpec, PolicySpec, TimeGrid


def test_empirical_measure_sorted_readonly():
    m = EmpiricalMeasure([3.0, -1.0, 2.0])
    assert np.array_equal(m.atoms, [-1.0, 2.0, 3.0]) and len(m) == 3
    with pytest.raises(ValueError):
        m.atoms[0] = 0.0
    with pytest.raises(ValueError):
        EmpiricalMeasure([0.0, np.inf])


def test_wasserstein_examples():
    a = np.random.default_rng(0).normal(size=50)
    assert wasserstein_1d(a, a[::-1]) == 0.0
    assert wasserstein_1d([0.0], [3.0], 1) == 3.0
    assert wasserstein_1d([0.0], [3.0], 2) == 3.0
    with pytest.raises(EmptyMeasure):
        wasserstein_1d([], [1.0])
    with pytest.raises(ValueError):
        wasserstein_1d([1.0], [1.0], 3)


def test_wasserstein_brute_force_small():
    rng = np.random.default_rng(1)
    for n in range(1, 7):
        a, b = rng.normal(size=n), rng.normal(size=n)
        for p in (1, 2):
            best = min(np.mean(np.abs(a - b[list(perm)]) ** p)
                       for perm in itertools.permutations(range(n))) ** (1 / p)
            assert wasserstein_1d(a, b, p) == pytest.approx(best, rel=1e-12, abs=1e-14)


def test_wasserstein_unequal_sizes():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=12), rng.normal(1.0, 2.0, size=8)
    assert wasserstein_1d(a, b, 1) == pytest.approx(wasserstein_distance(a, b), rel=1e-12)
    # replicate atoms to a common size and use the equal-size coupling
    L = math.lcm(12, 8)
    ra, rb = np.repeat(np.sort(a), L // 12), np.repeat(np.sort(b), L // 8)
    assert wasserstein_1d(a, b, 2) == pytest.approx(np.sqrt(np.mean((ra - rb) ** 2)),
                                                    rel=1e-12)


def test_quantile_integrals_match_direct():
    rng = np.random.default_rng(3)
    ref = rng.normal(size=(600, 4))
    samples = rng.normal(0.5, 1.2, size=(3, 40, 4))
    fast = _QuantileIntegrals(ref).w2sq(samples)
    for r in range(3):
        for k in range(4):
            assert fast[r, k] == pytest.approx(
                wasserstein_1d(samples[r, :, k], ref[:, k], 2) ** 2, rel=1e-9)


MV_GRID = TimeGrid(2.0, 0.01, 200)


def mf_spec(rho, x0=1.0, theta=1.0):
    return ModelSpec(1, lambda t, x, u: -theta * x + u, 1.0,
                     meanfield_drift=lambda x, m, u: -theta * x + rho * m + u,
                     initial_states=x0)


def test_no_measure_dependence_one_iteration():
    flow = solve_mckean_vlasov(mf_spec(0.0), PolicySpec.affine(), MV_GRID, 2000,
                               FixedPointConfig(init="constant"), seed=1)
    assert flow.converged and flow.iterations == 1


def test_mean_ode_constant():
    flow = solve_mckean_vlasov(mf_spec(1.0, 0.7), PolicySpec.affine(), MV_GRID, 10_000,
                               seed=2)
    assert np.all(np.abs(flow.mean - 0.7) <= 3 * flow.mean_se + 1e-12)


@pytest.mark.parametrize("init", ["particle", "constant"])
def test_mean_ode_half_decay(init):
    flow = solve_mckean_vlasov(mf_spec(0.5), PolicySpec.affine(), MV_GRID, 10_000,
                               FixedPointConfig(init=init), seed=3)
    assert flow.converged and flow.iterations <= 10
    t = MV_GRID.times
    assert np.all(np.abs(flow.mean - np.exp(-0.5 * t)) <= 3 * flow.mean_se[...] + 1e-12)
    assert flow.diffs[-1] < 1e-3


def test_fixed_point_stability():
    spec = mf_spec(0.5)
    fp = FixedPointConfig(init="constant")
    flow = solve_mckean_vlasov(spec, PolicySpec.affine(), MV_GRID, 4000, fp, seed=4)
    again = solve_mckean_vlasov(spec, PolicySpec.affine(), MV_GRID, 4000, fp, seed=4,
                                initial_flow=flow)
    assert again.iterations == 1
    assert np.max(np.abs(np.sort(again.cloud, 0) - np.sort(flow.cloud, 0)).mean(0)) < fp.tol


def test_not_converged_strict():
    fp = FixedPointConfig(tol=1e-12, max_iter=2, init="constant", strict=True)
    with pytest.raises(NotConverged):
        solve_mckean_vlasov(mf_spec(0.5), PolicySpec.affine(), MV_GRID, 500, fp, seed=0)
    flow = solve_mckean_vlasov(mf_spec(0.5), PolicySpec.affine(), MV_GRID, 500,
                               FixedPointConfig(tol=1e-12, max_iter=2, init="constant"))
    assert not flow.converged and flow.iterations == 2


def test_requires_meanfield_drift():
    with pytest.raises(ModelError):
        solve_mckean_vlasov(ModelSpec(1, lambda t, x, u: u), PolicySpec.affine(), MV_GRID, 10)


def test_measure_lipschitz():
    assert measure_lipschitz(mf_spec(0.5)) == pytest.approx(0.5)


@pytest.fixture(scope="module")
def flow():
    return solve_mckean_vlasov(mf_spec(0.5), PolicySpec.affine(), MV_GRID, 10_000, seed=5)


def test_concentration_decreasing(flow):
    rep = concentration_probe(mf_spec(0.5), PolicySpec.affine(), MV_GRID, [8, 16, 32, 64],
                              16, flow, seed=6)
    assert np.all(rep.means > 0) and rep.decreasing
    assert rep.slope <= -0.5
    assert rep.integrated_w2sq.shape == (4, 16)
    assert np.allclose(rep.kl_rate_bound, 0.25 / 2 * rep.integrated_w2sq)
    assert len(list(rep.rows())) == 64


def test_concentration_same_noise(flow):
    rep = concentration_probe(mf_spec(0.5), PolicySpec.affine(), MV_GRID,
                              [flow.cloud_size], 1, flow, same_noise=True)
    assert rep.integrated_w2sq[0, 0] < 1e-12


def test_particle_system_shapes():
    states, controls = particle_system(mf_spec(0.5), PolicySpec.affine(0, -0.1), MV_GRID,
                                       5, 3, 0)
    assert states.shape == (3, 5, 201) and controls.shape == (3, 5, 200)


def test_decoupled_bound_assembly(flow):
    spec = mf_spec(0.5)
    coupled = meanfield_coupled_model(spec, flow)
    cost = CostSpec(lambda x, u, xb, ub: x * x, "mean_field_symmetric")
    reps = certify_bound_meanfield(coupled, PolicySpec.affine(), cost, [8, 16], 1.0,
                                   MCConfig(2000, 7, MV_GRID))
    assert all(r.passed for r in reps)
    # the coupled model's true dynamics are the interacting particle system
    assert reps[1].kl_term.value < reps[0].kl_term.value
