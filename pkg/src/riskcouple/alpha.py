"""Choice of the risk parameter: the bound ``psi(alpha) = F(alpha) + R/alpha``,
its fixed-sample minimiser, the ``alpha -> 0, +-inf`` limits and the
small-interaction stability sweep.

On a fixed cost sample ``F`` is the log-moment-generating function divided by
``alpha``, so ``psi`` is computed exactly (no re-simulation across ``alpha``).
Its derivative is ``(E_tilt[C] - psi) / alpha`` where ``E_tilt`` is the mean
under the exponentially tilted weights, and the tilted relative entropy equals
``R`` exactly where that derivative vanishes; both identities are reported as
a certificate of the minimiser.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import AlphaZero, NonVanishing
from .girsanov import agent_energy, kl_divergence
from .parallel import ordered_map
from .risk import (estimate_risk_sensitive, estimate_tilted, evaluate_cost,
                   risk_sensitive_value)
from .sde import map_paths
from .stats import Estimate, joint_se, sample_mean

LIMIT_ALPHA = 1e3
SMALL_ALPHA = 1e-6


def psi_value(costs, alpha, kl_budget):
    if alpha == 0:
        raise AlphaZero("psi is defined for alpha > 0")
    if alpha < 0:
        raise ValueError("psi is defined for alpha > 0")
    f = estimate_risk_sensitive(costs, alpha)
    return Estimate(f.value + kl_budget / alpha, f.se, f.n_samples, f.ess, f.flags)


@dataclass
class PsiCurve:
    alphas: np.ndarray
    f_values: list
    kl: float
    psi_values: np.ndarray
    argmin_alpha: float

    def rows(self):
        for a, f, p in zip(self.alphas, self.f_values, self.psi_values):
            yield a, f.value, f.se, p, f.ess


def psi_curve(costs, kl_budget, alphas=None):
    if alphas is None:
        alphas = 2.0 ** np.arange(-3, 4)
    alphas = np.asarray(alphas, dtype=float)
    f = [estimate_risk_sensitive(costs, a) for a in alphas]
    psi = np.array([e.value for e in f]) + kl_budget / alphas
    return PsiCurve(alphas, f, float(kl_budget), psi, float(alphas[np.argmin(psi)]))


@dataclass
class AlphaCertificate:
    alpha_star: float
    psi: Estimate
    tilted_mean: Estimate
    tilted_kl: float
    tilted_kl_se: float
    kl_budget: float
    tol: float
    flags: tuple = ()
    grid_alphas: np.ndarray = field(default=None, repr=False)
    grid_psi: np.ndarray = field(default=None, repr=False)

    @property
    def boundary(self):
        return any(f in ("DegenerateCosts", "ZeroBudget") for f in self.flags)

    @property
    def stationarity_gap(self):
        return abs(self.tilted_mean.value - self.psi.value)

    @property
    def ok(self):
        return not any(f in ("StationarityFailed", "BudgetMismatch") for f in self.flags)

    def to_dict(self):
        return {"alpha_star": self.alpha_star, "psi": self.psi.to_dict(),
                "tilted_mean": self.tilted_mean.to_dict(), "tilted_kl": self.tilted_kl,
                "tilted_kl_se": self.tilted_kl_se, "kl_budget": self.kl_budget,
                "stationarity_gap": self.stationarity_gap, "flags": list(self.flags)}


def _exact_psi(costs, kl_budget):
    def psi(log_alpha):
        a = np.exp(log_alpha)
        return risk_sensitive_value(costs, a) + kl_budget / a
    return psi


def optimize_alpha(costs, kl_budget, tol=1e-4, bracket=(1e-3, 1e3), n_grid=61,
                   max_expand=6):
    """Minimise the fixed-sample ``psi`` over ``alpha > 0``.

    A log-spaced grid over ``bracket`` locates the minimum; the bracket is
    widened by a factor 10 on each side while the grid minimum sits on an
    end point.  Golden-section search over ``log alpha`` then refines it.
    Boundary cases return flagged solutions: ``ZeroBudget`` (``R = 0``,
    infimum at ``alpha -> 0``, value = sample mean) and ``DegenerateCosts``
    (zero spread with ``R > 0``, infimum at ``alpha -> inf``).
    """
    costs = np.asarray(costs, dtype=float).ravel()
    if kl_budget < 0:
        raise ValueError("kl_budget must be >= 0")
    n = costs.size
    if kl_budget == 0:
        m = sample_mean(costs)
        return AlphaCertificate(0.0, m, m, 0.0, 0.0, 0.0, tol, ("ZeroBudget",))
    if np.ptp(costs) == 0:
        c0 = float(costs[0])
        e = Estimate(c0, 0.0, n, float(n))
        return AlphaCertificate(np.inf, e, e, 0.0, 0.0, float(kl_budget), tol,
                                ("DegenerateCosts",))
    psi = _exact_psi(costs, kl_budget)
    lo, hi = np.log(bracket[0]), np.log(bracket[1])
    flags = []
    for _ in range(max_expand + 1):
        grid = np.linspace(lo, hi, n_grid)
        values = np.array([psi(g) for g in grid])
        i = int(np.argmin(values))
        if 0 < i < n_grid - 1:
            break
        if i == 0:
            lo -= np.log(10.0)
        else:
            hi += np.log(10.0)
    else:
        flags.append("BracketBoundary")
    if 0 < i < n_grid - 1:
        res = minimize_scalar(psi, bracket=(grid[i - 1], grid[i], grid[i + 1]),
                              method="golden", options={"xtol": 1e-10, "maxiter": 500})
        log_star = float(res.x)
    else:
        log_star = float(grid[i])
    a = float(np.exp(log_star))
    est = psi_value(costs, a, kl_budget)
    tilt = estimate_tilted(costs, a)
    if abs(tilt.value - est.value) > tol * (1 + abs(est.value)):
        flags.append("StationarityFailed")
    if abs(tilt.kl - kl_budget) > tol * (1 + kl_budget):
        flags.append("BudgetMismatch")
    return AlphaCertificate(a, est, tilt.mean, tilt.kl, tilt.kl_se, float(kl_budget), tol,
                            tuple(flags), np.exp(grid), values)


@dataclass
class LimitProbe:
    lo: float
    mean: float
    hi: float
    mean_se: float
    sample_min: float
    sample_max: float
    sample_mean: float
    tolerance: float

    @property
    def hi_ok(self):
        return abs(self.hi - self.sample_max) <= self.tolerance

    @property
    def lo_ok(self):
        return abs(self.lo - self.sample_min) <= self.tolerance

    @property
    def mean_ok(self):
        return abs(self.mean - self.sample_mean) <= 10 * self.mean_se + 1e-12

    @property
    def ok(self):
        return self.hi_ok and self.lo_ok and self.mean_ok

    def to_dict(self):
        return dict(self.__dict__, hi_ok=self.hi_ok, lo_ok=self.lo_ok, mean_ok=self.mean_ok)


def alpha_limit_probe(costs, alpha_limit=LIMIT_ALPHA, alpha_small=SMALL_ALPHA):
    """``F`` at ``-alpha_limit``, ``alpha_small`` and ``+alpha_limit``.

    The 1% tolerance of the limit checks is taken relative to the sample
    range ``max - min``, which keeps it meaningful when an extreme is 0.
    """
    costs = np.asarray(costs, dtype=float).ravel()
    hi = estimate_risk_sensitive(costs, alpha_limit).value
    lo = estimate_risk_sensitive(costs, -alpha_limit).value
    mid = estimate_risk_sensitive(costs, alpha_small)
    m = sample_mean(costs)
    return LimitProbe(lo, mid.value, hi, m.se, float(costs.min()), float(costs.max()),
                      m.value, 0.01 * float(np.ptp(costs)))


@dataclass
class StabilityRow:
    eps: float
    alpha: float
    lhs: Estimate
    f_value: Estimate
    kl_formula_term: float
    kl_formula_se: float
    kl_direct_term: float
    kl_direct_se: float
    gap: float
    gap_se: float

    @property
    def rhs(self):
        return self.f_value.value + self.kl_formula_term

    def row(self):
        return (self.eps, self.alpha, self.lhs.value, self.lhs.se, self.f_value.value,
                self.f_value.se, self.kl_formula_term, self.kl_direct_term, self.rhs,
                self.gap, self.gap_se, self.gap >= -3 * self.gap_se)


STABILITY_HEADER = ("epsilon", "alpha", "lhs", "lhs_se", "f_value", "f_se", "kl_term",
                    "kl_direct_term", "rhs", "gap", "gap_se", "certified")


@dataclass
class StabilityReport:
    rows: list
    kl_unit: Estimate

    def kl_ratios(self):
        """Successive ratios of the entropy part of the bound."""
        kl = [r.kl_formula_term for r in self.rows]
        return [b / a for a, b in zip(kl[:-1], kl[1:])]

    @property
    def decreasing(self):
        """Each gap is below the previous one up to 3 joint standard errors."""
        return all(b.gap <= a.gap + 3 * joint_se(a.gap_se, b.gap_se)
                   for a, b in zip(self.rows[:-1], self.rows[1:]))

    @property
    def shrinks(self):
        return self.rows[-1].gap < self.rows[0].gap / 4

    @property
    def certified(self):
        return all(r.gap >= -3 * r.gap_se for r in self.rows)

    def to_dict(self):
        return {"kl_unit": self.kl_unit.to_dict(), "kl_ratios": self.kl_ratios(),
                "decreasing": self.decreasing, "shrinks": self.shrinks,
                "certified": self.certified,
                "rows": [dict(zip(STABILITY_HEADER, r.row())) for r in self.rows]}


def check_alpha_rule(eps_schedule, alpha_rule):
    """Check ``alpha(eps) -> 0`` and ``eps^2/alpha(eps) -> 0`` along the
    schedule: both must decrease strictly as ``eps`` decreases."""
    eps = sorted((float(e) for e in eps_schedule if e > 0), reverse=True)
    alphas = [float(alpha_rule(e)) for e in eps]
    if any(a <= 0 for a in alphas):
        raise NonVanishing("alpha_rule must be positive for eps > 0")
    ratios = [e * e / a for e, a in zip(eps, alphas)]
    for i in range(1, len(eps)):
        if not alphas[i] < alphas[i - 1]:
            raise NonVanishing(f"alpha does not decrease with eps at eps={eps[i]}")
        if not ratios[i] < ratios[i - 1] * (1 - 1e-9):
            raise NonVanishing(f"eps^2/alpha does not decrease at eps={eps[i]} "
                               f"(ratio {ratios[i]:.6g})")
    return ratios


def _influence_f(costs, alpha):
    z = alpha * (costs - costs.max())
    w = np.exp(z)
    return (w / w.mean() - 1.0) / alpha


def stability_sweep(spec, policy, cost, eps_schedule, mc, alpha_rule=None):
    """Bound ``E_{mu_eps}[C] <= F(alpha) + (eps^2/alpha) KL(mu_1 || mu_0)`` for
    interaction ``eps * v`` along a decreasing schedule of ``eps``.

    The nominal ensemble is simulated once; each ``eps`` runs the true model
    with the same seed, so the gap uses paired (common random number)
    standard errors.  ``KL(mu_1 || mu_0)`` comes from a separate ``eps = 1``
    run.  The directly estimated ``KL(mu_eps || mu_0)/alpha`` is reported
    next to the scaled term.
    """
    if alpha_rule is None:
        alpha_rule = lambda e: e
    check_alpha_rule(eps_schedule, alpha_rule)
    grid, n_paths, seed = mc.grid, mc.n_paths, mc.seed
    c_nom = map_paths(lambda b: evaluate_cost(b, cost), spec.without_interaction(),
                      policy, grid, n_paths, seed, False)
    kl_unit = kl_divergence(spec, policy, grid, n_paths, seed + 1)

    def cell(eps):
        eps = float(eps)
        a = float(alpha_rule(eps)) if eps > 0 else SMALL_ALPHA
        s = spec.scaled_interaction(eps)
        if eps > 0 and s.interaction is not None:
            c_true, energy = map_paths(
                lambda b: (evaluate_cost(b, cost), agent_energy(b, s).sum(axis=1)),
                s, policy, grid, n_paths, seed, True)
        else:
            c_true, energy = c_nom, np.zeros(n_paths)
        f = estimate_risk_sensitive(c_nom, a)
        lhs = sample_mean(c_true)
        kl_term = eps * eps / a * kl_unit.total_kl
        kl_se = eps * eps / a * kl_unit.se
        direct = sample_mean(energy)
        infl = _influence_f(c_nom, a) - (c_true - c_true.mean())
        gap_se = joint_se(float(infl.std(ddof=1) / np.sqrt(n_paths)), kl_se)
        gap = f.value + kl_term - lhs.value
        return StabilityRow(eps, a, lhs, f, kl_term, kl_se, direct.value / a,
                            direct.se / a, gap, gap_se)

    rows = ordered_map(cell, sorted(eps_schedule, reverse=True), mc.workers)
    return StabilityReport(rows, Estimate(kl_unit.total_kl, kl_unit.se, n_paths,
                                          float(n_paths)))
