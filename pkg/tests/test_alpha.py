import numpy as np
import pytest

from riskcouple.alpha import (alpha_limit_probe, check_alpha_rule, optimize_alpha, psi_curve,
                              psi_value, stability_sweep)
from riskcouple.bounds import MCConfig
from riskcouple.errors import AlphaZero, NonVanishing
from riskcouple.risk import CostSpec, estimate_tilted
from riskcouple.sde import ModelSpec, PolicySpec, TimeGrid


@pytest.fixture(scope="module")
def gauss():
    return np.random.default_rng(11).normal(0.0, 1.0, 100_000)


def test_psi_deterministic():
    c = np.full(50, 2.0)
    for a in (0.1, 1.0, 5.0):
        assert psi_value(c, a, 0.3).value == pytest.approx(2.0 + 0.3 / a, rel=1e-14)


def test_psi_gaussian(gauss):
    for a in (0.5, 1.0, 1.5):
        e = psi_value(gauss, a, 0.5)
        assert abs(e.value - (a / 2 + 0.5 / a)) <= 3 * e.se + 0.01 * a


def test_psi_zero_budget_monotone(gauss):
    curve = psi_curve(gauss[:5000], 0.0, np.geomspace(0.01, 4, 30))
    assert np.all(np.diff(curve.psi_values) >= -1e-12)


def test_psi_alpha_zero():
    with pytest.raises(AlphaZero):
        psi_value([1.0, 2.0], 0.0, 0.1)


def test_psi_curve_invariants(gauss):
    curve = psi_curve(gauss, 0.5)
    f = np.array([e.value for e in curve.f_values])
    assert np.all(curve.psi_values >= f)
    assert curve.alphas.min() <= curve.argmin_alpha <= curve.alphas.max()
    assert curve.argmin_alpha == 1.0
    assert len(list(curve.rows())) == 7


def test_optimize_alpha_gaussian(gauss):
    cert = optimize_alpha(gauss, 0.5)
    assert cert.ok and not cert.boundary
    assert cert.alpha_star == pytest.approx(1.0, rel=0.05)
    assert cert.psi.value == pytest.approx(1.0, abs=0.02)
    assert abs(cert.tilted_kl - 0.5) <= max(3 * cert.tilted_kl_se, 0.02)
    assert cert.stationarity_gap <= 1e-4 * (1 + abs(cert.psi.value))
    # optimising never worsens the bound, and beats every grid point
    assert cert.psi.value <= psi_value(gauss, 1.0, 0.5).value + 1e-4
    assert cert.psi.value <= cert.grid_psi.min() + 1e-4


def test_optimize_alpha_tilted_consistency(gauss):
    cert = optimize_alpha(gauss, 0.2)
    t = estimate_tilted(gauss, cert.alpha_star)
    assert abs(t.value - cert.psi.value) <= 3 * t.mean.se


def test_optimize_alpha_boundaries():
    det = optimize_alpha(np.full(100, 1.5), 0.3)
    assert det.boundary and "DegenerateCosts" in det.flags
    assert det.alpha_star == np.inf and det.psi.value == 1.5
    c = np.random.default_rng(0).normal(2.0, 1.0, 1000)
    zero = optimize_alpha(c, 0.0)
    assert "ZeroBudget" in zero.flags and zero.psi.value == pytest.approx(c.mean())


def test_optimize_alpha_expands_bracket():
    c = np.random.default_rng(1).normal(0.0, 1e-3, 20_000)
    cert = optimize_alpha(c, 0.5)
    # Gaussian optimum sqrt(2R)/s = 1000 sits at the initial bracket edge
    assert cert.alpha_star == pytest.approx(1000.0, rel=0.05)
    assert "BracketBoundary" not in cert.flags


def test_limit_probes_two_point():
    c = np.repeat([0.0, 1.0], 5000)
    p = alpha_limit_probe(c)
    assert p.ok
    assert abs(p.hi - 1.0) <= 0.01 and abs(p.lo) <= 0.01


def test_limit_probes_constant():
    p = alpha_limit_probe(np.full(10, 4.0))
    assert p.lo == p.mean == p.hi == 4.0


def test_limit_probe_uniform():
    u = np.random.default_rng(2).uniform(0, 1, 100_000)
    p = alpha_limit_probe(u)
    assert p.hi >= 0.99 and p.hi <= u.max()


def test_alpha_rule_check():
    eps = [0.4, 0.2, 0.1, 0.05]
    assert check_alpha_rule(eps, lambda e: e) == pytest.approx(eps)
    with pytest.raises(NonVanishing):
        check_alpha_rule(eps, lambda e: e * e)
    with pytest.raises(NonVanishing):
        check_alpha_rule(eps, lambda e: 1.0)


OU4 = ModelSpec(4, lambda t, x, u: -x + u, 1.0,
                lambda t, z, u: 0.2 * (z.mean(axis=-1, keepdims=True) - z), initial_states=0.5)
MF_COST = CostSpec(lambda x, u, xb, ub: x * x + 0.1 * u * u, "mean_field_symmetric")


def test_stability_sweep_small():
    rep = stability_sweep(OU4, PolicySpec.affine(0, -0.5), MF_COST, [0.4, 0.2, 0.1, 0.05],
                          MCConfig(3000, 3, TimeGrid(1.0, 0.01, 100)))
    assert [r.eps for r in rep.rows] == [0.4, 0.2, 0.1, 0.05]
    assert rep.kl_ratios() == pytest.approx([0.5, 0.5, 0.5], rel=1e-12)
    assert rep.certified and rep.decreasing and rep.shrinks
    for r in rep.rows:
        # direct KL(mu_eps)/alpha tracks the formula
        assert r.kl_direct_term == pytest.approx(r.kl_formula_term, rel=0.15)


def test_stability_eps_zero_is_jensen():
    rep = stability_sweep(OU4, PolicySpec.affine(0, -0.5), MF_COST, [0.2, 0.0],
                          MCConfig(2000, 4, TimeGrid(1.0, 0.01, 100)))
    last = rep.rows[-1]
    assert last.eps == 0.0 and last.kl_formula_term == 0.0
    assert abs(last.gap) <= 3 * last.f_value.se + 1e-9
