"""Robustness certificates: true-model cost against nominal risk-sensitive
cost plus a relative-entropy penalty.

Each certificate compares

    lhs = E_mu[c_N]                       (interacting model)
    rhs = rs_term + kl_term               (nominal model + interaction energy)

and reports ``slack = rhs - lhs`` with a joint standard error.  Three forms
are provided:

* symmetric mean-field interaction (``MeanFieldA``), where
  ``rs_term = (1/(N alpha)) log E[exp(alpha N c_N)]`` and
  ``kl_term = (1/(2 sigma^2 alpha)) E int v_1^2``; the variant B version
  (``ModelB_Corollary``) drops the ``sigma`` factor;
* arbitrary coupling with finite total energy (``GeneralCoupling``), with the
  unscaled ``(1/alpha) log E[exp(alpha C)] + KL/alpha``.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from .errors import ModelError, NonConstantSigma, SearchDiverged
from .girsanov import agent_energy
from .parallel import ordered_map
from .risk import estimate_risk_sensitive, evaluate_cost
from .rng import derive_seed
from .sde import PolicySpec, TimeGrid, map_paths
from .stats import Estimate, joint_se, sample_mean

CSV_HEADER = ("theorem_tag", "N", "alpha", "lhs", "lhs_se", "rs_term", "rs_se",
              "kl_term", "rhs", "slack", "ess_flag", "seed", "kl_se", "slack_se")


@dataclass(frozen=True)
class MCConfig:
    n_paths: int = 10_000
    seed: int = 0
    grid: TimeGrid = field(default_factory=lambda: TimeGrid(1.0, 0.01, 100))
    workers: int = 1


@dataclass(frozen=True)
class BoundReport:
    theorem_tag: str
    n_agents: int
    alpha: float
    lhs: Estimate
    rs_term: Estimate
    kl_term: Estimate
    seed: int
    n_paths: int
    extras: dict = field(default_factory=dict)

    @property
    def rhs(self):
        return self.rs_term.value + self.kl_term.value

    @property
    def slack(self):
        return self.rhs - self.lhs.value

    @property
    def slack_se(self):
        if "slack_se" in self.extras:
            return self.extras["slack_se"]
        return joint_se(self.lhs.se, self.rs_term.se, self.kl_term.se)

    @property
    def ess_flag(self):
        return bool(self.rs_term.flags)

    @property
    def passed(self):
        return self.slack >= -3.0 * self.slack_se

    def row(self):
        return (self.theorem_tag, self.n_agents, self.alpha, self.lhs.value, self.lhs.se,
                self.rs_term.value, self.rs_term.se, self.kl_term.value, self.rhs,
                self.slack, self.ess_flag, self.seed, self.kl_term.se, self.slack_se)

    def to_dict(self):
        d = dict(zip(CSV_HEADER, self.row()))
        d["passed"] = self.passed
        d.update(self.extras)
        return d


def write_reports(path, reports):
    from .io import write_csv
    return write_csv(path, CSV_HEADER, (r.row() for r in reports))


def tail_trend(reports, alpha):
    """Finite-``N`` sequence at one ``alpha`` with the running maxima of lhs
    and rhs (the finite surrogate of a limsup over ``N``)."""
    rows = sorted((r for r in reports if r.alpha == alpha), key=lambda r: r.n_agents)
    lhs = np.array([r.lhs.value for r in rows])
    rhs = np.array([r.rhs for r in rows])
    return {"N": [r.n_agents for r in rows], "lhs": lhs, "rhs": rhs,
            "lhs_running_max": np.maximum.accumulate(lhs) if len(rows) else lhs,
            "rhs_running_max": np.maximum.accumulate(rhs) if len(rows) else rhs}


def _true_run(spec, policy, cost, grid, n_paths, seed):
    def reduce(b):
        return evaluate_cost(b, cost), agent_energy(b, spec)
    if spec.interaction is None:
        c = map_paths(lambda b: evaluate_cost(b, cost), spec, policy, grid, n_paths, seed)
        return c, np.zeros((n_paths, spec.n_agents))
    return map_paths(reduce, spec, policy, grid, n_paths, seed, True)


def _nominal_costs(spec, policy, cost, grid, n_paths, seed):
    return map_paths(lambda b: evaluate_cost(b, cost), spec.without_interaction(),
                     policy, grid, n_paths, seed, False)


def _check_symmetric(spec, policy, cost):
    if cost.variant == "general":
        raise ModelError("the mean-field bound needs a per-agent (symmetric) cost")
    if not policy.shared:
        raise ModelError("the mean-field bound needs shared policy parameters")
    if spec.variant == "A" and spec.constant_sigma is None:
        raise NonConstantSigma("the mean-field bound for variant A needs constant sigma")


def certify_bound_meanfield(spec, policy, cost, n_list, alpha, mc):
    """Certify the symmetric mean-field bound for every ``N`` in ``n_list``
    and every ``alpha`` (a number or a sequence).

    Per ``N`` one true-model and one nominal-model ensemble are simulated
    from independent derived seeds; all ``alpha`` values reuse them.  The
    per-agent energy is averaged over agents, which for a symmetric model
    estimates ``E int v_1^2`` with lower variance than agent 1 alone.
    """
    _check_symmetric(spec, policy, cost)
    alphas = [float(a) for a in np.atleast_1d(alpha)]
    if any(a <= 0 for a in alphas):
        raise ValueError("certification needs alpha > 0")
    tag = "MeanFieldA" if spec.variant == "A" else "ModelB_Corollary"

    def cell(n):
        s = spec.with_agents(n)
        true_seed = derive_seed(mc.seed, "true", n)
        nom_seed = derive_seed(mc.seed, "nominal", n)
        c_true, energy = _true_run(s, policy, cost, mc.grid, mc.n_paths, true_seed)
        c_nom = _nominal_costs(s, policy, cost, mc.grid, mc.n_paths, nom_seed)
        lhs = sample_mean(c_true)
        per_agent = sample_mean(energy.mean(axis=1))
        out = []
        for a in alphas:
            rs = estimate_risk_sensitive(c_nom, a, scale_n=n)
            kl = Estimate(per_agent.value / a, per_agent.se / a, mc.n_paths,
                          float(mc.n_paths))
            out.append(BoundReport(tag, n, a, lhs, rs, kl, mc.seed, mc.n_paths,
                                   {"true_seed": true_seed, "nominal_seed": nom_seed,
                                    "kl_per_agent": per_agent.value,
                                    "kl_per_agent_se": per_agent.se}))
        return out

    cells = ordered_map(cell, [int(n) for n in n_list], mc.workers)
    return [r for c in cells for r in c]


def certify_bound_general(spec, policy, cost, alpha, mc):
    """Unscaled bound ``E_mu[C] <= (1/alpha) log E_mu0[e^{alpha C}] + KL/alpha``
    for a variant B model whose interaction has finite total energy."""
    if spec.variant != "B":
        raise ModelError("the general-coupling bound is stated for variant B models")
    if alpha <= 0:
        raise ValueError("certification needs alpha > 0")
    true_seed = derive_seed(mc.seed, "true", spec.n_agents)
    nom_seed = derive_seed(mc.seed, "nominal", spec.n_agents)
    c_true, energy = _true_run(spec, policy, cost, mc.grid, mc.n_paths, true_seed)
    c_nom = _nominal_costs(spec, policy, cost, mc.grid, mc.n_paths, nom_seed)
    total = sample_mean(energy.sum(axis=1))
    kl = Estimate(total.value / alpha, total.se / alpha, mc.n_paths, float(mc.n_paths))
    return BoundReport("GeneralCoupling", spec.n_agents, float(alpha), sample_mean(c_true),
                       estimate_risk_sensitive(c_nom, alpha), kl, mc.seed, mc.n_paths,
                       {"true_seed": true_seed, "nominal_seed": nom_seed,
                        "kl_total": total.value, "per_agent_kl": energy.mean(axis=0)})


def compare_local_policies(spec, policy, cost, alpha, mc, spreads=(0.1, 0.2), draws=4):
    """Right-hand side of the mean-field bound for a shared local policy and
    for asymmetric perturbations of it.

    Each perturbation adds zero-mean per-agent offsets of size ``spread`` to
    the feedback gain ``theta1``.  The right-hand side is written in its
    per-agent form ``(1/(N alpha)) (log E[exp(alpha N c_N)] + KL)``, which
    reduces to the symmetric certificate when the policy is shared.  All
    policies reuse the same two seeds, so differences between rows are
    paired.  This is a numerical illustration that the symmetric policy is
    not beaten, not a proof.  Returns ``(label, spread, gains, rhs, lhs)``
    rows with the shared policy first.
    """
    _check_symmetric(spec, policy, cost)
    n = spec.n_agents
    base = policy.params
    rng = np.random.default_rng(derive_seed(mc.seed, "perturb", n))
    cands = [("shared", 0.0, np.tile(base, (n, 1)))]
    for s in spreads:
        for d in range(draws):
            off = rng.standard_normal(n)
            off = s * (off - off.mean()) / (off.std() or 1.0)
            g = np.tile(base, (n, 1))
            g[:, 1] += off
            cands.append((f"spread{s:g}_{d}", float(s), g))
    true_seed = derive_seed(mc.seed, "true", n)
    nom_seed = derive_seed(mc.seed, "nominal", n)
    rows = []
    for label, s, g in cands:
        pol = PolicySpec(g, policy.u_min, policy.u_max)
        c_true, energy = _true_run(spec, pol, cost, mc.grid, mc.n_paths, true_seed)
        c_nom = _nominal_costs(spec, pol, cost, mc.grid, mc.n_paths, nom_seed)
        rs = estimate_risk_sensitive(c_nom, alpha, scale_n=n)
        kl = sample_mean(energy.sum(axis=1))
        rhs = Estimate(rs.value + kl.value / (n * alpha),
                       joint_se(rs.se, kl.se / (n * alpha)), mc.n_paths, rs.ess, rs.flags)
        rows.append((label, s, tuple(g[:, 1]), rhs, sample_mean(c_true)))
    return rows


@dataclass(frozen=True)
class SearchConfig:
    """Box-constrained Nelder-Mead over shared affine gains ``(theta0, theta1)``."""

    initial: tuple = (0.0, 0.0)
    lower: tuple = (-5.0, -5.0)
    upper: tuple = (5.0, 5.0)
    u_min: float = -np.inf
    u_max: float = np.inf
    max_iter: int = 400
    xatol: float = 1e-4
    fatol: float = 1e-7
    n_paths: int = 2000
    seed: int = 0
    grid: Optional[TimeGrid] = None


def _objective_fn(spec, cost, objective, search):
    grid = search.grid or TimeGrid(1.0, 0.01, 100)
    if objective == "risk_neutral_true":
        model, flag, alpha = spec, True, None
    elif isinstance(objective, tuple) and objective[0] == "risk_sensitive_nominal":
        model, flag, alpha = spec.without_interaction(), False, float(objective[1])
    else:
        raise ValueError(f"unknown objective {objective!r}")
    scale = 1 if cost.variant == "general" else spec.n_agents

    def estimate(theta):
        pol = PolicySpec.affine(theta[0], theta[1], search.u_min, search.u_max)
        c = map_paths(lambda b: evaluate_cost(b, cost), model, pol, grid,
                      search.n_paths, search.seed, flag)
        if alpha is None:
            return sample_mean(c)
        return estimate_risk_sensitive(c, alpha, scale_n=scale)

    return estimate


def optimize_policy(spec, cost, objective, search):
    """Search shared affine feedback gains minimising ``objective``.

    ``objective`` is ``"risk_neutral_true"`` or
    ``("risk_sensitive_nominal", alpha)``.  Every evaluation reuses the same
    seed (common random numbers), so the search sees a deterministic
    function.  Returns ``(policy, estimate)``; the initial point is returned
    unless the search strictly improves on it.
    """
    estimate = _objective_fn(spec, cost, objective, search)
    x0 = np.asarray(search.initial, dtype=float)
    start = estimate(x0)

    def f(theta):
        return estimate(theta).value

    res = minimize(f, x0, method="Nelder-Mead",
                   bounds=list(zip(search.lower, search.upper)),
                   options={"maxiter": search.max_iter, "xatol": search.xatol,
                            "fatol": search.fatol})
    if not (np.all(np.isfinite(res.x)) and np.isfinite(res.fun)):
        raise SearchDiverged(f"search ended at non-finite point {res.x}")
    lo, hi = np.asarray(search.lower), np.asarray(search.upper)
    if np.any(res.x < lo - 1e-12) or np.any(res.x > hi + 1e-12):
        raise SearchDiverged(f"simplex left the parameter box at {res.x}")
    best, best_est = (res.x, estimate(res.x)) if res.fun < start.value else (x0, start)
    return (PolicySpec.affine(best[0], best[1], search.u_min, search.u_max), best_est)
