"""Cost functionals and risk-neutral / risk-sensitive estimators.

Risk-sensitive values are computed as
``(1/(s*alpha)) log mean exp(s*alpha*C)`` with ``s`` an optional ensemble-size
scaling, always shifted by the extreme sample so that large exponents neither
overflow nor lose the exact value on deterministic costs.
"""

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .errors import AlphaZero, NonFiniteCost
from .sde import simulate
from .stats import Estimate, ess, joint_se, logmeanexp, sample_mean

VARIANTS = ("general", "mean_field_symmetric", "decoupled")
ESS_FRACTION = 0.01
BOOTSTRAP_RESAMPLES = 200


@dataclass(frozen=True, eq=False)
class CostSpec:
    """Running cost ``g`` integrated over the horizon, plus an optional
    terminal cost ``h(x_T)`` returning one value per path.

    Call signatures of ``g`` on per-step arrays of shape ``(paths, agents)``:

    * ``general``: ``g(x, u)`` -> ``(paths,)``, a joint cost over all agents;
    * ``mean_field_symmetric``: ``g(x, u, xbar, ubar)`` -> ``(paths, agents)``
      with ``xbar``, ``ubar`` the ensemble means, shape ``(paths, 1)``;
    * ``decoupled``: ``g(x, u)`` -> ``(paths, agents)``.

    The last two are averaged over agents with equal weights ``1/N``.
    """

    running_cost: Optional[Callable]
    variant: str = "decoupled"
    terminal_cost: Optional[Callable] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown cost variant {self.variant!r}")


def running_cost_rates(bundle, cost):
    """Running-cost rate at each left endpoint.

    Shape ``(paths, agents, n_steps)`` for the per-agent variants and
    ``(paths, n_steps)`` for ``general``.
    """
    P, N, n1 = bundle.states.shape
    n = n1 - 1
    per_agent = cost.variant != "general"
    out = np.empty((P, N, n) if per_agent else (P, n))
    if cost.running_cost is None:
        out[...] = 0.0
        return out
    g = cost.running_cost
    for k in range(n):
        x = bundle.states[:, :, k]
        u = bundle.controls[:, :, k]
        if cost.variant == "mean_field_symmetric":
            val = g(x, u, x.mean(axis=1, keepdims=True), u.mean(axis=1, keepdims=True))
        else:
            val = g(x, u)
        out[..., k] = val
    if not np.all(np.isfinite(out)):
        bad = np.argwhere(~np.isfinite(out))[0]
        raise NonFiniteCost(int(bad[-1]), bundle.first_path + int(bad[0]))
    return out


def evaluate_cost(bundle, cost):
    """Per-path cost ``c_N``: left-endpoint quadrature of the running cost
    (averaged over agents for the per-agent variants) plus terminal cost."""
    rates = running_cost_rates(bundle, cost)
    dt = bundle.grid.dt
    if cost.variant == "general":
        c = rates.sum(axis=1) * dt
    else:
        c = rates.sum(axis=2).mean(axis=1) * dt
    if cost.terminal_cost is not None:
        c = c + np.asarray(cost.terminal_cost(bundle.states[:, :, -1]), dtype=float)
    return c


def estimate_risk_neutral(costs):
    costs = np.asarray(costs, dtype=float)
    if costs.size == 0:
        raise ValueError("no cost samples")
    return sample_mean(costs)


def _shifted_lme(costs, a):
    ref = costs.max() if a > 0 else costs.min()
    return ref, logmeanexp(a * (costs - ref))


def risk_sensitive_value(costs, alpha, scale_n=1):
    """Point value of :func:`estimate_risk_sensitive` without error analysis."""
    a = float(scale_n) * float(alpha)
    if a == 0:
        raise AlphaZero("alpha = 0 is the risk-neutral case; use estimate_risk_neutral")
    ref, lme = _shifted_lme(np.asarray(costs, dtype=float).ravel(), a)
    return float(ref + lme / a)


def estimate_risk_sensitive(costs, alpha, scale_n=1, bootstrap_seed=0):
    """``(1/(s*alpha)) log mean exp(s*alpha*C)`` with ``s = scale_n``.

    The standard error is the delta-method SE of the log-mean; when the
    exponential weights are degenerate (ESS below 1% of the samples) the
    ``ess_low`` flag is raised and a 200-resample bootstrap SE is used.
    """
    if alpha == 0:
        raise AlphaZero("alpha = 0 is the risk-neutral case; use estimate_risk_neutral")
    if scale_n < 1:
        raise ValueError("scale_n must be >= 1")
    costs = np.asarray(costs, dtype=float).ravel()
    n = costs.size
    a = float(scale_n) * float(alpha)
    ref, lme = _shifted_lme(costs, a)
    value = ref + lme / a
    log_w = a * (costs - ref)
    w = np.exp(log_w)
    ess_val = ess(log_w)
    flags = ()
    if n > 1:
        se = w.std(ddof=1) / np.sqrt(n) / w.mean() / abs(a)
    else:
        se = 0.0
    if ess_val < ESS_FRACTION * n:
        flags = ("ess_low",)
        rng = np.random.default_rng(bootstrap_seed)
        boot = np.empty(BOOTSTRAP_RESAMPLES)
        for i in range(BOOTSTRAP_RESAMPLES):
            boot[i] = logmeanexp(log_w[rng.integers(0, n, n)]) / a
        se = boot.std(ddof=1)
    return Estimate(float(value), float(se), n, ess_val, flags)


def log_entropy_moment(costs):
    """Sample ``log E[e^C |C|]``, the moment whose finiteness the variational
    formula assumes.  Reported for information only: a finite sample value
    says nothing about the population moment."""
    c = np.asarray(costs, dtype=float).ravel()
    a = np.abs(c)
    if not np.any(a > 0):
        return -np.inf
    ref = c.max()
    return float(ref + np.log(np.mean(np.exp(c - ref) * a)))


@dataclass(frozen=True)
class TiltedEstimate:
    """Mean of the costs under the exponentially tilted measure and the
    sample relative entropy of that measure w.r.t. the empirical one."""

    mean: Estimate
    kl: float
    kl_se: float

    @property
    def value(self):
        return self.mean.value


def estimate_tilted(costs, alpha):
    costs = np.asarray(costs, dtype=float).ravel()
    n = costs.size
    z = alpha * costs
    log_w = z - z.max()
    log_w = log_w - np.log(np.exp(log_w).sum())
    w = np.exp(log_w)
    m = float(np.sum(w * costs))
    se = float(np.sqrt(np.sum(w**2 * (costs - m) ** 2)))
    kl = float(np.sum(w * (log_w + np.log(n))))
    # influence of each sample on alpha*E_w[C] - log mean e^{alpha C}
    kl_se = float(abs(alpha) * np.sqrt(np.sum(w**2 * (costs - m) ** 2)))
    return TiltedEstimate(Estimate(m, se, n, 1.0 / np.sum(w**2)), kl, kl_se)


class TiltFamily:
    """Finite family of deterministic drift shifts ``theta(t)`` defining
    candidate measures equivalent to the nominal law.

    Each member is a scalar (constant shift) or a tuple of levels applied on
    equal consecutive pieces of the horizon.
    """

    def __init__(self, members):
        self.members = [m if np.isscalar(m) else tuple(float(x) for x in m)
                        for m in members]

    @classmethod
    def constant(cls, levels):
        return cls([float(x) for x in levels])

    def __len__(self):
        return len(self.members)

    def __add__(self, other):
        return TiltFamily(self.members + other.members)

    def profile(self, i, grid):
        m = self.members[i]
        if np.isscalar(m):
            return np.full(grid.n_steps, float(m))
        pieces = np.array(m)
        idx = (np.arange(grid.n_steps) * len(pieces)) // grid.n_steps
        return pieces[idx]

    def kl(self, i, grid, n_agents=1):
        """Exact relative entropy of member ``i`` (applied to every agent)."""
        th = self.profile(i, grid)
        return 0.5 * n_agents * float(np.sum(th * th)) * grid.dt

    def label(self, i):
        m = self.members[i]
        return f"{m:g}" if np.isscalar(m) else "|".join(f"{x:g}" for x in m)


def tilted_spec(spec, profile, grid):
    """Nominal model shifted in noise space by the deterministic ``profile``."""
    dt = grid.dt
    n = grid.n_steps

    def shift(t, z, u):
        return profile[min(int(round(t / dt)), n - 1)]

    return replace(spec, interaction=shift, variant="B")


@dataclass
class GapReport:
    tilt_labels: list
    tilt_values: list
    tilt_kl: list
    risk_sensitive: Estimate
    best_index: int
    gap: float
    gap_se: float
    violations: list
    closed: bool

    @property
    def best(self):
        return self.tilt_values[self.best_index]

    def rows(self):
        """One row per tilt: its value, the deficit ``log E[e^C] - value`` and
        the family gap (deficit of the best tilt), repeated on every row."""
        rs = self.risk_sensitive
        for i, (lab, val, kl) in enumerate(zip(self.tilt_labels, self.tilt_values,
                                                self.tilt_kl)):
            yield (i, lab, val.value, val.se, kl, rs.value, rs.se, rs.value - val.value,
                   self.gap, self.gap_se, i in self.violations)


def dv_gap(nominal_bundle, cost, tilts, spec, policy):
    """Lower certificate of the variational formula on a finite tilt family.

    For each tilt ``nu`` the ensemble is re-simulated under ``nu`` with the
    nominal bundle's own increments, and ``E_nu[C] - KL(nu || mu0)`` is
    compared with ``log E_mu0[e^C]`` estimated from the nominal bundle.
    """
    grid = nominal_bundle.grid
    base = spec.without_interaction()
    c0 = evaluate_cost(nominal_bundle, cost)
    rs = estimate_risk_sensitive(c0, 1.0)
    values, kls, labels = [], [], []
    for i in range(len(tilts)):
        prof = tilts.profile(i, grid)
        b = simulate(tilted_spec(base, prof, grid), policy, grid,
                     nominal_bundle.n_paths, nominal_bundle.seed, True,
                     increments=nominal_bundle.brownian_increments)
        est = sample_mean(evaluate_cost(b, cost))
        kl = tilts.kl(i, grid, spec.n_agents)
        values.append(Estimate(est.value - kl, est.se, est.n_samples, est.ess))
        kls.append(kl)
        labels.append(tilts.label(i))
        del b
    best = int(np.argmax([v.value for v in values]))
    violations = [i for i, v in enumerate(values)
                  if v.value > rs.value + 3 * joint_se(v.se, rs.se)]
    gap = rs.value - values[best].value
    gap_se = joint_se(values[best].se, rs.se)
    return GapReport(labels, values, kls, rs, best, gap, gap_se, violations,
                     abs(gap) <= 3 * gap_se)
