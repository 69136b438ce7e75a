"""Girsanov densities between the true and nominal path laws.

For an interaction ``v`` the normalised shift is ``r = v / sigma`` for variant A
and ``r = v`` for variant B.  On a nominal path driven by increments ``dW``
(``v`` evaluated along that path) the log density of the true law is::

    log dmu/dmu0 = sum r dW - 1/2 sum r^2 dt

and its nominal-measure mean of ``exp`` is one.  Along a true path the
nominal-coordinate noise is ``dW + r dt``, which turns the correction into
``+1/2 sum r^2 dt``; the true-measure mean of that quantity is the relative
entropy ``1/2 sum_n E_mu[int r_n^2 dt]``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import MissingInteractionRecord
from .sde import map_paths
from .stats import Estimate, ess, joint_se, logmeanexp, normalized_weights


@dataclass(frozen=True, eq=False)
class LogWeightVector:
    values: np.ndarray
    seed: int
    grid: object
    first_path: int = 0
    on_true_paths: bool = False

    def normalized(self):
        return normalized_weights(self.values)

    @property
    def ess(self):
        return ess(self.values)

    def mean_exp(self):
        """Raw Monte Carlo mean of ``exp(log weight)`` with its standard error."""
        lw = self.values
        shift = lw.max()
        w = np.exp(lw - shift)
        n = w.size
        with np.errstate(over="ignore"):
            scale = np.exp(shift)
        se = w.std(ddof=1) / np.sqrt(n) * scale if n > 1 else 0.0
        return Estimate(float(w.mean() * scale), float(se), n, self.ess)


@dataclass(frozen=True, eq=False)
class KLEstimate:
    total_kl: float
    per_agent_kl: np.ndarray
    standard_error: float
    n_paths: int
    per_agent_se: np.ndarray = None
    debug_log_weight_mean: float = None

    @property
    def se(self):
        return self.standard_error

    def per_agent_mean(self):
        """``KL / N`` with its standard error (the symmetric-case quantity)."""
        n = len(self.per_agent_kl)
        return Estimate(self.total_kl / n, self.standard_error / n, self.n_paths,
                        float(self.n_paths))

    def to_dict(self):
        return {"total_kl": self.total_kl, "per_agent_kl": self.per_agent_kl,
                "se": self.standard_error, "n": self.n_paths}


def _shift_ratio(bundle, spec):
    if bundle.interaction_values is None:
        if spec.interaction is None:
            return np.zeros_like(bundle.brownian_increments)
        raise MissingInteractionRecord("bundle carries no interaction record")
    v = bundle.interaction_values
    if spec.variant == "B":
        return v
    return v / spec.sigma(bundle.states[:, :, :-1])


def log_rn_derivative(bundle, spec):
    """Per-path ``log dmu/dmu0`` evaluated at the bundle's paths.

    Works on nominal bundles (reweighting nominal paths to the true law) and
    on true bundles (the integrand of the relative entropy).
    """
    r = _shift_ratio(bundle, spec)
    dt = bundle.grid.dt
    stoch = np.sum(r * bundle.brownian_increments, axis=(1, 2))
    energy = 0.5 * np.sum(r * r, axis=(1, 2)) * dt
    values = stoch + energy if bundle.with_interaction else stoch - energy
    return LogWeightVector(values, bundle.seed, bundle.grid, bundle.first_path,
                           bundle.with_interaction)


def agent_energy(bundle, spec):
    """``1/2 int r_n^2 dt`` per path and agent, shape ``(paths, agents)``."""
    r = _shift_ratio(bundle, spec)
    return 0.5 * np.sum(r * r, axis=2) * bundle.grid.dt


def kl_from_energy(energy, log_weights=None):
    """Assemble a :class:`KLEstimate` from per-path, per-agent energies."""
    n = energy.shape[0]
    total = energy.sum(axis=1)
    se = float(total.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    agent_se = energy.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(energy.shape[1])
    per_agent = energy.mean(axis=0)
    return KLEstimate(float(per_agent.sum()), per_agent, se, n, agent_se,
                      None if log_weights is None else float(np.mean(log_weights)))


def kl_divergence(spec, policy, grid, n_paths, seed, debug=False):
    """Relative entropy of the true path law w.r.t. the nominal one.

    Simulates the true model and averages ``1/2 sum_n int r_n^2 dt``.  With
    ``debug`` the mean log density along the true paths is also recorded; it
    estimates the same quantity by a different route.
    """
    if spec.interaction is None:
        return KLEstimate(0.0, np.zeros(spec.n_agents), 0.0, n_paths,
                          np.zeros(spec.n_agents), 0.0 if debug else None)

    def reduce(b):
        e = agent_energy(b, spec)
        if debug:
            return e, log_rn_derivative(b, spec).values
        return e

    out = map_paths(reduce, spec, policy, grid, n_paths, seed, True)
    if debug:
        return kl_from_energy(*out)
    return kl_from_energy(out)


@dataclass(frozen=True)
class NovikovReport:
    sample_sizes: tuple
    estimates: tuple
    log_estimates: tuple
    flag: str
    note: str = ("heuristic: finiteness of an expectation cannot be established "
                 "from samples")

    def to_dict(self):
        return {"sample_sizes": list(self.sample_sizes),
                "estimates": [e.to_dict() for e in self.estimates],
                "log_estimates": list(self.log_estimates), "flag": self.flag}


def novikov_diagnostic(spec, policy, grid, n_paths_schedule, seed):
    """Monte Carlo ``E[exp(1/2 sum_n int r_n^2 dt)]`` on nested samples.

    The schedule's sample sizes are prefixes of one true-model ensemble.  The
    flag is ``"Stable"`` when every estimate agrees with the largest-sample
    one within 3 joint standard errors and the exponential weights are not
    degenerate (ESS at least 1% of the sample), ``"Suspect"`` otherwise.
    """
    sizes = tuple(sorted(int(n) for n in n_paths_schedule))
    if spec.interaction is None:
        exps = np.zeros(sizes[-1])
    else:
        exps = map_paths(lambda b: agent_energy(b, spec).sum(axis=1),
                         spec, policy, grid, sizes[-1], seed, True)
    estimates, logs = [], []
    for n in sizes:
        lw = LogWeightVector(exps[:n], seed, grid)
        est = lw.mean_exp()
        flags = ("ess_low",) if est.ess < 0.01 * n else ()
        estimates.append(Estimate(est.value, est.standard_error, n, est.ess, flags))
        logs.append(float(logmeanexp(exps[:n])))
    ref = estimates[-1]
    stable = all(abs(e.value - ref.value) <= 3 * joint_se(e.se, ref.se) for e in estimates)
    stable = stable and not any(e.flags for e in estimates)
    return NovikovReport(sizes, tuple(estimates), tuple(logs),
                         "Stable" if stable else "Suspect")
