import numpy as np
import pytest

from riskcouple.errors import AlphaZero, NonFiniteCost
from riskcouple.risk import (CostSpec, TiltFamily, dv_gap, estimate_risk_neutral,
                             log_entropy_moment,
                             estimate_risk_sensitive, estimate_tilted, evaluate_cost,
                             running_cost_rates)
from riskcouple.sde import ModelSpec, PolicySpec, TimeGrid, map_paths, simulate


def test_constant_integrand():
    grid = TimeGrid(2.0, 0.01, 200)
    b = simulate(ModelSpec(2, lambda t, x, u: -x, 1.0), PolicySpec.affine(), grid, 5, 0)
    c = evaluate_cost(b, CostSpec(lambda x, u: np.ones_like(x), "decoupled"))
    assert np.allclose(c, 2.0, rtol=1e-14)


def test_frozen_quadratic():
    grid = TimeGrid(1.0, 0.01, 100)
    spec = ModelSpec(1, lambda t, x, u: 0.0 * x, 1.0, initial_states=3.0)
    b = simulate(spec, PolicySpec.affine(), grid, 3, 0, disable_diffusion=True)
    assert np.allclose(evaluate_cost(b, CostSpec(lambda x, u: x * x)), 9.0, rtol=1e-14)


def test_mean_field_symmetric_identical_agents(unit_grid):
    spec = ModelSpec(4, lambda t, x, u: -x + u, 1.0)
    b = simulate(spec, PolicySpec.affine(0, -0.3), unit_grid, 6, 9, shared_agent_noise=True)
    cost = CostSpec(lambda x, u, xb, ub: (x - xb) ** 2, "mean_field_symmetric")
    assert np.all(evaluate_cost(b, cost) == 0.0)


def test_general_and_terminal_costs(unit_grid):
    spec = ModelSpec(3, lambda t, x, u: -x + u, 1.0)
    b = simulate(spec, PolicySpec.affine(), unit_grid, 8, 2)
    per_agent = CostSpec(lambda x, u: x * x, "decoupled")
    joint = CostSpec(lambda X, U: np.mean(X * X, axis=-1), "general")
    assert np.allclose(evaluate_cost(b, per_agent), evaluate_cost(b, joint), rtol=1e-13)
    assert running_cost_rates(b, joint).shape == (8, 100)
    term = CostSpec(None, "decoupled", lambda xT: xT.mean(axis=-1))
    assert np.allclose(evaluate_cost(b, term), b.states[:, :, -1].mean(axis=1))


def test_non_finite_cost_location(unit_grid):
    b = simulate(ModelSpec(1, lambda t, x, u: u, 1.0), PolicySpec.affine(), unit_grid, 3, 0)

    def g(x, u):
        out = np.zeros_like(x)
        out[1, 0] = np.nan if np.all(x[0] == x[0]) else 0.0
        return out
    with pytest.raises(NonFiniteCost) as exc:
        evaluate_cost(b, CostSpec(g))
    assert exc.value.step == 0 and exc.value.path == 1


def test_risk_neutral_examples():
    e = estimate_risk_neutral([1, 1, 1, 1])
    assert (e.value, e.se, e.ess) == (1.0, 0.0, 4.0)
    e = estimate_risk_neutral([0, 2])
    assert (e.value, e.se) == (1.0, 1.0)


def test_ou_second_moment_oracle():
    # exact Euler recursion for E[X_k^2]: m_{k+1} = (1 - dt)^2 m_k + dt, m_0 = 1
    grid = TimeGrid(1.0, 0.01, 100)
    spec = ModelSpec(1, lambda t, x, u: -x + u, 1.0, initial_states=1.0)
    c = map_paths(lambda b: evaluate_cost(b, CostSpec(lambda x, u: x * x)), spec,
                  PolicySpec.affine(), grid, 20_000, 6)
    m, total = 1.0, 0.0
    for _ in range(100):
        total += m * 0.01
        m = (1 - 0.01) ** 2 * m + 0.01
    # continuous value 0.5 + 0.25 (1 - e^{-2}) differs by O(dt)
    assert total == pytest.approx(0.5 + 0.25 * (1 - np.exp(-2)), abs=0.01)
    e = estimate_risk_neutral(c)
    assert abs(e.value - total) <= 3 * e.se


def test_risk_sensitive_constant_collapse():
    for a in (-50.0, 1e-6, 0.3, 2.0, 700.0):
        e = estimate_risk_sensitive(np.full(1000, 3.0), a, scale_n=16)
        assert e.value == 3.0 and e.se == 0.0


def test_risk_sensitive_gaussian():
    c = np.random.default_rng(0).normal(1.0, 0.5, 100_000)
    e = estimate_risk_sensitive(c, 2.0)
    assert abs(e.value - 1.25) <= 3 * e.se


def test_risk_sensitive_small_alpha():
    c = np.random.default_rng(1).exponential(1.0, 10_000)
    e = estimate_risk_sensitive(c, 1e-6)
    m = estimate_risk_neutral(c)
    assert abs(e.value - m.value) <= 10 * m.se


def test_risk_sensitive_scale_n():
    c = np.random.default_rng(2).normal(0.0, 0.1, 5000)
    a = estimate_risk_sensitive(c, 0.5, scale_n=8)
    b = estimate_risk_sensitive(c, 4.0)
    assert a.value == pytest.approx(b.value, rel=1e-12)


def test_alpha_zero_rejected():
    with pytest.raises(AlphaZero):
        estimate_risk_sensitive([1.0, 2.0], 0.0)


def test_ess_flag_and_bootstrap():
    c = np.random.default_rng(3).normal(0, 1, 2000)
    e = estimate_risk_sensitive(c, 30.0)
    assert "ess_low" in e.flags and e.ess < 20 and e.se > 0
    assert 1.0 <= e.ess <= e.n_samples


def test_large_exponents_do_not_overflow():
    c = np.random.default_rng(4).uniform(0, 100, 1000)
    e = estimate_risk_sensitive(c, 50.0, scale_n=100)
    assert np.isfinite(e.value)
    assert c.max() - np.log(c.size) / 5000.0 <= e.value <= c.max()


def test_tilted_examples():
    rng = np.random.default_rng(5)
    c = rng.normal(1.0, 0.5, 200_000)
    t0 = estimate_tilted(c, 0.0)
    assert t0.value == pytest.approx(c.mean(), rel=1e-12) and t0.kl == pytest.approx(0.0,
                                                                                      abs=1e-12)
    t = estimate_tilted(c, 1.2)
    assert abs(t.value - (1.0 + 1.2 * 0.25)) <= 3 * t.mean.se
    # sample KL of the Gaussian tilt: alpha^2 s^2 / 2
    assert t.kl == pytest.approx(1.2 ** 2 * 0.25 / 2, rel=0.05)
    u = rng.uniform(0, 1, 1000)
    assert estimate_tilted(u, 1e4).value == pytest.approx(u.max(), abs=1e-3)


def test_tilt_family_profiles():
    grid = TimeGrid(1.0, 0.1, 10)
    fam = TiltFamily.constant([0.0, 1.0]) + TiltFamily([(0.5, 1.5)])
    assert len(fam) == 3
    assert np.array_equal(fam.profile(2, grid), [0.5] * 5 + [1.5] * 5)
    assert fam.kl(1, grid) == pytest.approx(0.5)
    assert fam.kl(2, grid, n_agents=2) == pytest.approx(2 * 0.5 * (0.25 + 2.25) * 0.5)
    assert fam.label(2) == "0.5|1.5"


def _brownian_setup(n_paths=20_000, dt=0.02):
    grid = TimeGrid.from_step(1.0, dt)
    spec = ModelSpec(1, lambda t, x, u: 0.0 * x, 1.0, variant="B")
    nominal = simulate(spec, PolicySpec.affine(), grid, n_paths, 31, False)
    return grid, spec, nominal


def test_dv_zero_cost():
    grid, spec, nominal = _brownian_setup(2000)
    zero = CostSpec(lambda x, u: 0.0 * x)
    rep = dv_gap(nominal, zero, TiltFamily.constant([0.0, 0.5, 1.0]), spec, PolicySpec.affine())
    assert rep.risk_sensitive.value == 0.0 and rep.best.value == 0.0
    assert rep.gap == 0.0 and rep.closed and not rep.violations


def test_dv_brownian_closure():
    grid, spec, nominal = _brownian_setup()
    cost = CostSpec(None, "decoupled", lambda xT: xT.mean(axis=-1))
    fam = TiltFamily.constant([0.0, 0.5, 1.0, 1.5]) + TiltFamily([(0.8, 1.2)])
    rep = dv_gap(nominal, cost, fam, spec, PolicySpec.affine())
    assert not rep.violations
    assert fam.label(rep.best_index) == "1"
    assert abs(rep.best.value - 0.5) <= 3 * rep.best.se
    assert rep.closed


def test_log_entropy_moment():
    assert log_entropy_moment(np.full(5, 2.0)) == pytest.approx(2.0 + np.log(2.0), rel=1e-15)
    assert log_entropy_moment(np.zeros(3)) == -np.inf
    c = np.array([-1.0, 0.5, 3.0])
    assert log_entropy_moment(c) == pytest.approx(np.log(np.mean(np.exp(c) * np.abs(c))))
