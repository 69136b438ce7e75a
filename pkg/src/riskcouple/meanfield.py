"""Empirical measures, 1D Wasserstein distances and McKean-Vlasov flows.

Measure dependence is through the mean only: ``meanfield_drift(x, m, u)``
receives the population mean ``m``.  The McKean-Vlasov flow is represented by
a particle cloud on the time grid.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import EmptyMeasure, ModelError, NotConverged
from .parallel import ordered_map
from .rng import brownian_increments, derive_seed


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Equal-weight atoms, stored sorted."""

    atoms: np.ndarray

    def __post_init__(self):
        a = np.sort(np.asarray(self.atoms, dtype=float).ravel())
        if a.size and not np.all(np.isfinite(a)):
            raise ValueError("atoms must be finite")
        a.flags.writeable = False
        object.__setattr__(self, "atoms", a)

    def __len__(self):
        return self.atoms.size

    @property
    def mean(self):
        return float(self.atoms.mean())


def _atoms(m):
    a = m.atoms if isinstance(m, EmpiricalMeasure) else np.sort(np.asarray(m, float).ravel())
    if a.size == 0:
        raise EmptyMeasure("measure has no atoms")
    return a


def wasserstein_1d(a, b, order=1):
    """Order-``p`` Wasserstein distance between two empirical measures.

    Equal sizes use the sorted coupling.  Unequal sizes integrate
    ``|Q_a(t) - Q_b(t)|^p`` exactly over the merged breakpoints of the two
    quantile functions (no resampling).
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    x, y = _atoms(a), _atoms(b)
    n, m = x.size, y.size
    if n == m:
        d = np.abs(x - y)
        return float(np.mean(d ** order) ** (1.0 / order))
    t = np.union1d(np.arange(1, n + 1) / n, np.arange(1, m + 1) / m)
    widths = np.diff(np.concatenate([[0.0], t]))
    mid = t - 0.5 * widths
    qx = x[np.minimum((mid * n).astype(int), n - 1)]
    qy = y[np.minimum((mid * m).astype(int), m - 1)]
    return float(np.sum(widths * np.abs(qx - qy) ** order) ** (1.0 / order))


class _QuantileIntegrals:
    """Prefix integrals of a reference quantile function and of its square,
    for fast ``W_2^2`` from many small samples to one large cloud."""

    def __init__(self, ref):
        self.ref = np.sort(ref, axis=0)  # (M, steps)
        self.m = self.ref.shape[0]
        zero = np.zeros((1, self.ref.shape[1]))
        self.c1 = np.concatenate([zero, np.cumsum(self.ref, axis=0)]) / self.m
        self.c2 = np.concatenate([zero, np.cumsum(self.ref ** 2, axis=0)]) / self.m

    def _integral(self, cum, vals, s, k):
        pos = s * self.m
        j = np.minimum(np.floor(pos).astype(int), self.m - 1)
        frac = (pos - j) / self.m
        return cum[j, k] + frac * vals[j, k]

    def w2sq(self, samples):
        """``W_2^2`` between each row-sample and the reference, per step.

        ``samples`` has shape ``(reps, N, steps)``; returns ``(reps, steps)``.
        """
        z = np.sort(samples, axis=1)
        reps, n, steps = z.shape
        s = np.arange(n + 1) / n
        k = np.arange(steps)[None, :]
        sq = self.ref ** 2
        i1 = self._integral(self.c1, self.ref, s[:, None], k)  # (n+1, steps)
        i2 = self._integral(self.c2, sq, s[:, None], k)
        d1 = np.diff(i1, axis=0)[None]
        d2 = np.diff(i2, axis=0)[None]
        out = np.sum(z * z / n - 2 * z * d1 + d2, axis=1)
        return np.maximum(out, 0.0)


@dataclass(frozen=True)
class FixedPointConfig:
    tol: float = 1e-3
    max_iter: int = 50
    damping: float = 0.5
    init: str = "particle"
    strict: bool = False


@dataclass(frozen=True, eq=False)
class MeasureFlow:
    """Particle cloud ``(M, n_steps + 1)`` of the McKean-Vlasov law with the
    mean flow that drives it.

    ``driving_mean`` is the frozen flow the last cloud was simulated
    against; ``mean`` and ``var`` are the cloud's own summaries.
    """

    grid: object
    cloud: np.ndarray
    driving_mean: np.ndarray
    iterations: int
    converged: bool
    diffs: tuple
    seed: int

    @property
    def cloud_size(self):
        return self.cloud.shape[0]

    @property
    def mean(self):
        return self.cloud.mean(axis=0)

    @property
    def var(self):
        return self.cloud.var(axis=0, ddof=1)

    @property
    def mean_se(self):
        return np.sqrt(self.var / self.cloud_size)

    def marginal(self, k):
        return EmpiricalMeasure(self.cloud[:, k])

    def mean_at(self, t):
        dt, n = self.grid.dt, self.grid.n_steps
        return self.driving_mean[min(max(int(round(t / dt)), 0), n)]

    def rows(self):
        for k, t in enumerate(self.grid.times):
            yield t, self.mean[k], self.var[k], self.mean_se[k], self.driving_mean[k]


FLOW_HEADER = ("t", "mean", "var", "mean_se", "driving_mean")


def _cloud_run(spec, policy, grid, dW, x0, flow_mean=None):
    """Cloud driven by the frozen ``flow_mean`` or, when it is None, by its
    own empirical mean (the interacting-particle approximation)."""
    M, n = dW.shape
    dt = grid.dt
    x = np.array(x0, dtype=float)
    cloud = np.empty((M, n + 1))
    cloud[:, 0] = x
    sig_const = spec.constant_sigma
    for k in range(n):
        m = x.mean() if flow_mean is None else flow_mean[k]
        u = policy.controls(x)
        s = sig_const if sig_const is not None else spec.sigma(x)
        x = x + spec.meanfield_drift(x, m, u) * dt + s * dW[:, k]
        cloud[:, k + 1] = x
    if not np.all(np.isfinite(cloud)):
        raise FloatingPointError("non-finite McKean-Vlasov cloud")
    return cloud


def _sup_w1(a, b):
    return float(np.max(np.mean(np.abs(np.sort(a, axis=0) - np.sort(b, axis=0)), axis=0)))


def _cloud_x0(spec, cloud_size):
    x0 = spec.x0
    return np.resize(x0, cloud_size) if x0.size > 1 else np.full(cloud_size, x0[0])


def solve_mckean_vlasov(spec, policy, grid, cloud_size, fp=None, seed=0,
                        initial_flow=None):
    """Damped Picard iteration on the mean flow.

    Each iteration first sets ``flow <- damping * flow + (1 - damping) * m``
    with ``m`` the previous cloud's mean, then simulates the cloud (fixed
    noise) against the frozen flow.
    Convergence is declared when the largest per-step ``W_1`` between
    successive clouds falls below ``fp.tol``.  The starting flow is the
    interacting-particle approximation of the same cloud (``init="particle"``),
    the constant initial mean (``init="constant"``), or ``initial_flow``.
    """
    if spec.meanfield_drift is None:
        raise ModelError("solve_mckean_vlasov needs a meanfield_drift")
    fp = fp or FixedPointConfig()
    dW = brownian_increments(seed, 1, cloud_size, grid.n_steps, grid.dt)[0]
    x0 = _cloud_x0(spec, cloud_size)
    if initial_flow is not None:
        prev = initial_flow.cloud if isinstance(initial_flow, MeasureFlow) else None
        flow = np.asarray(initial_flow.driving_mean if isinstance(initial_flow, MeasureFlow)
                          else initial_flow, dtype=float)
        if prev is None:
            prev = _cloud_run(spec, policy, grid, dW, x0, flow)
    elif fp.init == "particle":
        prev = _cloud_run(spec, policy, grid, dW, x0)
        flow = prev.mean(axis=0)
    elif fp.init == "constant":
        flow = np.full(grid.n_steps + 1, x0.mean())
        prev = _cloud_run(spec, policy, grid, dW, x0, flow)
    else:
        raise ValueError(f"unknown init {fp.init!r}")
    diffs = []
    converged = False
    it = 0
    cloud = prev
    for it in range(1, fp.max_iter + 1):
        flow = fp.damping * flow + (1 - fp.damping) * prev.mean(axis=0)
        cloud = _cloud_run(spec, policy, grid, dW, x0, flow)
        diffs.append(_sup_w1(cloud, prev))
        prev = cloud
        if diffs[-1] < fp.tol:
            converged = True
            break
    if not converged and fp.strict:
        raise NotConverged(f"Picard iteration did not reach tol {fp.tol}",
                           it, diffs[-1] if diffs else None)
    cloud.flags.writeable = False
    return MeasureFlow(grid, cloud, flow, it, converged, tuple(diffs), seed)


def flow_mean_spread(spec, policy, grid, cloud_size, fp=None, seed=0, reps=16, workers=1):
    """Standard deviation of the converged flow mean across ``reps``
    independently seeded solves, per time step.

    ``MeasureFlow.mean_se`` treats the particles as independent draws around
    a fixed flow.  At the fixed point the flow is the cloud's own mean, so its
    sampling error feeds back through the measure argument of the drift and
    the naive figure understates the error of the flow itself.
    """
    def one(r):
        return solve_mckean_vlasov(spec, policy, grid, cloud_size, fp,
                                   derive_seed(seed, "flow_rep", r)).mean
    means = np.array(ordered_map(one, range(reps), workers))
    return means.std(axis=0, ddof=1)


@dataclass
class ConcentrationReport:
    n_list: list
    integrated_w2sq: np.ndarray  # (len(n_list), reps)
    kl_rate_bound: np.ndarray
    kl_direct: np.ndarray
    slope: float
    envelope: float
    measure_lipschitz: float

    @property
    def means(self):
        return self.integrated_w2sq.mean(axis=1)

    @property
    def ses(self):
        r = self.integrated_w2sq.shape[1]
        return self.integrated_w2sq.std(axis=1, ddof=1) / np.sqrt(r) if r > 1 else \
            np.zeros(len(self.n_list))

    @property
    def decreasing(self):
        """Each mean lies below the previous one, also after widening both
        by 3 standard errors in the unfavourable direction."""
        m, s = self.means, self.ses
        return bool(np.all(m[1:] + 3 * s[1:] < m[:-1] + 3 * s[:-1]) and np.all(np.diff(m) < 0))

    @property
    def strictly_decreasing_ci(self):
        m, s = self.means, self.ses
        return bool(np.all(m[1:] + 3 * s[1:] < m[:-1] - 3 * s[:-1]))

    def rows(self):
        for i, n in enumerate(self.n_list):
            for r, v in enumerate(self.integrated_w2sq[i]):
                yield (n, r, v, self.ses[i], self.kl_rate_bound[i, r],
                       self.kl_direct[i, r], self.slope)


CONCENTRATION_HEADER = ("N", "rep", "integrated_W2sq", "se", "kl_rate_bound",
                        "kl_direct", "slope_fit")


def measure_lipschitz(spec, probe=(-5.0, 5.0), n_probe=401, seed=0):
    """Sampled Lipschitz constant of ``meanfield_drift`` in its mean argument."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(*probe, n_probe)
    m1 = rng.uniform(*probe, n_probe)
    m2 = rng.uniform(*probe, n_probe)
    u = np.zeros(n_probe)
    d = np.abs(spec.meanfield_drift(x, m1, u) - spec.meanfield_drift(x, m2, u))
    ok = m1 != m2
    return float(np.max(d[ok] / np.abs(m1 - m2)[ok]))


def particle_system(spec, policy, grid, n_agents, reps, seed):
    """Interacting ``N``-particle system driven by the empirical mean;
    states ``(reps, N, n_steps + 1)``, controls ``(reps, N, n_steps)``."""
    dW = brownian_increments(seed, reps, n_agents, grid.n_steps, grid.dt)
    return _particles(spec, policy, grid, dW)


def _particles(spec, policy, grid, dW):
    reps, n_agents, n = dW.shape
    x = np.broadcast_to(_cloud_x0(spec, n_agents), (reps, n_agents)).copy()
    states = np.empty((reps, n_agents, n + 1))
    controls = np.empty((reps, n_agents, n))
    states[:, :, 0] = x
    for k in range(n):
        u = policy.controls(x)
        controls[:, :, k] = u
        m = x.mean(axis=1, keepdims=True)
        x = x + spec.meanfield_drift(x, m, u) * grid.dt + spec.sigma(x) * dW[:, :, k]
        states[:, :, k + 1] = x
    return states, controls


def concentration_probe(spec, policy, grid, n_list, reps, flow, seed=0,
                        lipschitz=None, same_noise=False, workers=1):
    """Time-integrated ``E[W_2^2(zeta^N_t, mu_t)]`` against the reference cloud.

    For each ``N`` the interacting system is simulated ``reps`` times; the
    log-log slope of the rep-averaged integrals against ``N`` is fitted by
    least squares.  Also reported per rep: the entropy-rate bound
    ``C^2/(2 sigma^2) int W_2^2`` (``C`` the Lipschitz constant of the drift
    in the measure) and the direct energy ``1/(2 sigma^2) int v^2`` averaged
    over agents, with ``v`` the drift deviation caused by using the
    empirical instead of the limiting mean.

    ``same_noise`` reuses the flow's own noise (requires ``N`` equal to the
    cloud size and one rep), reproducing the reference cloud exactly when
    the flow was started from the particle approximation.
    """
    sigma = spec.constant_sigma
    if sigma is None:
        raise ModelError("concentration_probe needs a constant sigma")
    C = measure_lipschitz(spec) if lipschitz is None else float(lipschitz)
    qi = _QuantileIntegrals(flow.cloud[:, :-1])
    dt = grid.dt
    mu_mean = flow.driving_mean[:-1]

    def cell(n):
        n = int(n)
        if same_noise:
            states, controls = particle_system(spec, policy, grid, n, 1, flow.seed)
        else:
            states, controls = particle_system(spec, policy, grid, n, reps,
                                               derive_seed(seed, "concentration", n))
        x = states[:, :, :-1]
        w2 = qi.w2sq(x).sum(axis=1) * dt
        emp = x.mean(axis=1, keepdims=True)
        v = spec.meanfield_drift(x, emp, controls) - spec.meanfield_drift(
            x, mu_mean[None, None, :], controls)
        energy = 0.5 * np.sum(v * v, axis=2).mean(axis=1) * dt / sigma ** 2
        return w2, C * C / (2 * sigma ** 2) * w2, energy

    cells = ordered_map(cell, n_list, workers)
    w2 = np.array([c[0] for c in cells])
    bound = np.array([c[1] for c in cells])
    direct = np.array([c[2] for c in cells])
    means = w2.mean(axis=1)
    ns = np.asarray(n_list, dtype=float)
    if len(ns) > 1 and np.all(means > 0):
        slope, icpt = np.polyfit(np.log(ns), np.log(means), 1)
    else:
        slope, icpt = np.nan, np.nan
    envelope = float(np.max(means * np.sqrt(ns)))
    return ConcentrationReport([int(n) for n in n_list], w2, bound, direct, float(slope),
                               envelope, C)


def meanfield_coupled_model(spec, flow):
    """Interacting ``N``-system written against the McKean-Vlasov nominal model.

    The nominal drift is ``b(x, mu_t, u)`` with ``mu_t`` the flow mean; the
    interaction is ``v = b(x, zeta^N_t, u) - b(x, mu_t, u)`` (variant A), so
    the result plugs directly into the mean-field certificate.
    """
    b = spec.meanfield_drift

    def drift(t, x, u):
        return b(x, flow.mean_at(t), u)

    def interaction(t, x, u):
        m = flow.mean_at(t)
        return b(x, x.mean(axis=-1, keepdims=True), u) - b(x, m, u)

    return replace(spec, drift=drift, interaction=interaction, variant="A",
                   name=(spec.name or "meanfield") + "-vs-mckean-vlasov")
