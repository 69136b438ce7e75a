"""Risk-sensitive ergodic control of a scalar diffusion by its principal
eigenvalue problem

    min_u { A_u phi + c(., u) phi } = lambda phi,   phi(0) = 1,

discretised on a truncated interval with finite differences (central for
the drift where the cell Peclet number allows it, upwinded elsewhere) and
reflecting ends, and solved by policy iteration around a shifted inverse
power method.  Every frozen-policy operator ``L_u + diag(c)`` has
nonnegative off-diagonals, so its principal eigenvector is positive and
``sI - L_u - diag(c)`` is an M-matrix for ``s`` above the principal
eigenvalue; the tridiagonal solves are then stable without pivoting.

Arithmetic is in extended precision: with quadratic costs ``phi`` grows
like ``exp(beta x^2)`` and reaches ~1e4 at the domain ends, and the residual
is measured in absolute terms.
"""

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .bounds import BoundReport
from .errors import ModelError, NonConstantSigma, NonPositiveEigenfunction, NotConverged
from .risk import CostSpec, estimate_risk_sensitive, evaluate_cost, running_cost_rates
from .sde import PolicySpec, TimeGrid, map_paths
from .stats import Estimate, sample_mean

LD = np.longdouble


@dataclass(frozen=True)
class HjbGrid:
    x_min: float
    x_max: float
    h: float
    u_min: float = 0.0
    u_max: float = 0.0
    n_controls: int = 41
    controls: Optional[tuple] = None

    def __post_init__(self):
        if not self.x_min < 0 < self.x_max:
            raise ModelError("the state grid must contain 0 in its interior")
        if not self.h > 0:
            raise ModelError("h must be positive")
        if self.u_min > self.u_max:
            raise ModelError("empty action interval")

    @property
    def nodes(self):
        return int(round((self.x_max - self.x_min) / self.h)) + 1

    @property
    def xs(self):
        return self.x_min + self.h * np.arange(self.nodes)

    @property
    def control_grid(self):
        if self.controls is not None:
            return np.sort(np.asarray(self.controls, dtype=float))
        if self.u_min == self.u_max:
            return np.array([float(self.u_min)])
        return np.linspace(self.u_min, self.u_max, self.n_controls)

    @property
    def origin(self):
        return int(np.argmin(np.abs(self.xs)))


@dataclass(frozen=True, eq=False)
class SpectralSolution:
    lambda_star: float
    phi: np.ndarray
    policy_table: np.ndarray
    iterations: int
    residual: float
    xs: np.ndarray
    lambda_history: tuple = ()
    inner_iterations: int = 0
    cost: Optional[Callable] = field(default=None, repr=False)

    def policy(self):
        return PolicySpec.from_table(self.xs, self.policy_table)

    def rows(self):
        return zip(self.xs, self.phi, self.policy_table)

    def to_dict(self):
        return {"lambda_star": self.lambda_star, "residual": self.residual,
                "iterations": self.iterations, "inner_iterations": self.inner_iterations,
                "lambda_history": list(self.lambda_history),
                "phi_min": float(self.phi.min())}


EIGEN_HEADER = ("x", "phi", "u_star")


def _coefficients(spec, cost, grid):
    """Per-control tridiagonal bands ``(lower, diag, upper)``, each of shape
    ``(n_controls, nodes)``; ``lower[:, i]`` multiplies ``phi[i-1]``."""
    xs = grid.xs
    us = grid.control_grid
    h = LD(grid.h)
    sig = spec.sigma(xs)
    if np.min(sig) <= 0:
        raise ModelError("sigma must be positive on the grid")
    a = LD(0.5) * np.asarray(sig, dtype=LD) ** 2 / (h * h)
    lo, di, up = [], [], []
    for u in us:
        uu = np.full_like(xs, u)
        b = np.asarray(spec.drift(0.0, xs, uu), dtype=LD)
        c = np.asarray(cost(xs, uu), dtype=LD)
        if not np.all(np.isfinite(c)):
            raise ModelError("running cost is not finite on the grid")
        # central differences where the cell Peclet number |b| h / sigma^2
        # is at most 1 (off-diagonals stay nonnegative), upwind elsewhere
        central = np.abs(b) * h <= 2 * a * h * h
        low = np.where(central, a - b / (2 * h), a + np.maximum(-b, 0) / h)
        upp = np.where(central, a + b / (2 * h), a + np.maximum(b, 0) / h)
        low[0] = 0
        upp[-1] = 0
        lo.append(low)
        up.append(upp)
        di.append(c - (low + upp))
    return np.array(lo), np.array(di), np.array(up)


def _apply(lo, di, up, phi):
    out = di * phi
    out[..., 1:] += lo[..., 1:] * phi[:-1]
    out[..., :-1] += up[..., :-1] * phi[1:]
    return out


def _solve_shifted(lo, di, up, s, rhs):
    """Thomas algorithm for ``(s I - M) y = rhs`` with ``M`` tridiagonal."""
    n = rhs.size
    a = -lo
    b = s - di
    c = -up
    cp = np.empty(n, dtype=LD)
    dp = np.empty(n, dtype=LD)
    a_l, b_l, c_l, r_l = a.tolist(), b.tolist(), c.tolist(), rhs.tolist()
    cp_prev = LD(0)
    dp_prev = LD(0)
    for i in range(n):
        denom = b_l[i] - a_l[i] * cp_prev
        cp_prev = c_l[i] / denom
        dp_prev = (r_l[i] - a_l[i] * dp_prev) / denom
        cp[i] = cp_prev
        dp[i] = dp_prev
    y = np.empty(n, dtype=LD)
    y[-1] = dp[-1]
    for i in range(n - 2, -1, -1):
        y[i] = dp[i] - cp[i] * y[i + 1]
    return y


def _principal_pair(lo, di, up, phi, origin, tol, max_iter):
    """Shifted inverse iteration for a frozen policy, warm-started at ``phi``.

    The shift is the Collatz-Wielandt upper bound ``max (M phi)/phi`` plus
    one, which always exceeds the principal eigenvalue.
    """
    best = (np.inf, None, None)
    stall = 0
    lam_prev = None
    for it in range(1, max_iter + 1):
        mphi = _apply(lo, di, up, phi)
        s = np.max(mphi / phi) + 1
        y = _solve_shifted(lo, di, up, s, phi)
        if np.any(y <= 0):
            raise NonPositiveEigenfunction("inverse iteration produced a non-positive vector")
        lam = s - phi.sum() / y.sum()
        phi = y / y[origin]
        res = float(np.max(np.abs(_apply(lo, di, up, phi) - lam * phi)))
        if res < best[0]:
            best = (res, lam, phi)
        # the eigenvalue has stopped moving: the residual is at its rounding floor
        if lam_prev is not None and abs(lam - lam_prev) <= 1e3 * np.finfo(LD).eps * max(1, abs(lam)):
            stall += 1
        else:
            stall = 0
        lam_prev = lam
        if res < 0.01 * tol or stall >= 3:
            break
    res, lam, phi = best
    return lam, phi, res, it


def solve_principal_eigen(spec, cost, grid, tol=1e-8, max_iter=50, max_inner=500):
    """Principal eigenpair and optimal feedback table for the ergodic
    risk-sensitive problem of a single scalar diffusion.

    ``cost(x, u)`` is the running cost.  Policy iteration alternates the
    frozen-policy eigenpair with nodewise minimisation of
    ``(A_u phi)_i + c(x_i, u) phi_i`` over the control grid (ties go to the
    smallest action) until the policy repeats and the residual is below
    ``tol``.
    """
    lo, di, up = _coefficients(spec, cost, grid)
    n = grid.nodes
    origin = grid.origin
    phi = np.ones(n, dtype=LD)
    idx = np.arange(n)
    policy = _improve(_apply(lo, di, up, phi))
    lambdas = []
    inner_total = 0
    res = np.inf
    for it in range(1, max_iter + 1):
        l, d, u = lo[policy, idx], di[policy, idx], up[policy, idx]
        lam, phi, res, inner = _principal_pair(l, d, u, phi, origin, tol, max_inner)
        inner_total += inner
        lambdas.append(float(lam))
        values = _apply(lo, di, up, phi)
        new = _improve(values)
        if np.array_equal(new, policy):
            res = float(np.max(np.abs(values.min(axis=0) - lam * phi)))
            break
        policy = new
    else:
        raise NotConverged(f"policy iteration did not settle in {max_iter} steps",
                           max_iter, float(res))
    if not res < tol:
        raise NotConverged(f"eigen-residual {res:.3g} above tol {tol:.3g}", it, res)
    if np.min(phi) <= 0:
        raise NonPositiveEigenfunction("principal eigenfunction is not positive; "
                                       "refine the grid")
    return SpectralSolution(float(lam), np.asarray(phi, dtype=float),
                            grid.control_grid[policy], it, res, grid.xs, tuple(lambdas),
                            inner_total, cost)


def _improve(values):
    """Nodewise argmin over controls; among actions within rounding of the
    minimum the smallest one wins, which keeps the policy deterministic."""
    best = values.min(axis=0)
    slack = 64 * np.finfo(LD).eps * (np.abs(values).max(axis=0) + 1)
    return np.argmax(values <= best + slack, axis=0)


def validate_lambda_mc(spec, solution, T, n_paths, seed, dt=0.01, x0=0.0):
    """``(1/T) log mean exp(int_0^T c dt)`` for one agent under the table
    policy, started at ``x0``."""
    grid = TimeGrid.from_step(T, dt)
    single = spec.with_agents(1).without_interaction()
    single = replace(single, initial_states=float(x0))
    cost = CostSpec(solution.cost, "decoupled")
    costs = map_paths(lambda b: evaluate_cost(b, cost), single, solution.policy(), grid,
                      n_paths, seed, False)
    est = estimate_risk_sensitive(costs, 1.0)
    return Estimate(est.value / T, est.se / T, est.n_samples, est.ess, est.flags)


def certify_bound_decoupled(spec, hjb, mc, window=0.5, sensitivity=(0.25, 0.5, 0.75)):
    """Ergodic bound ``long-run cost <= lambda* + (1/(2 sigma^2)) lim (1/T) E int v^2``
    for the coupled model under the HJB feedback applied by every agent.

    Both time averages are taken over the tail window ``[window * T, T]`` and
    averaged over agents; per-path differences give a paired standard error
    for the slack.  The same quantities on the ``sensitivity`` windows are
    reported in ``extras["window_sensitivity"]``.
    """
    sigma = spec.constant_sigma
    if sigma is None:
        raise NonConstantSigma("the ergodic bound needs constant sigma")
    grid = mc.grid
    n = grid.n_steps
    starts = sorted(set([window, *sensitivity]))
    ks = [int(round(w * n)) for w in starts]
    cost = CostSpec(hjb.cost, "decoupled")

    def reduce(b):
        rates = running_cost_rates(b, cost)
        v = b.interaction_values
        e = v * v / (2 * sigma ** 2) if v is not None else np.zeros_like(rates)
        c_avg = np.stack([rates[:, :, k:].mean(axis=(1, 2)) for k in ks], axis=1)
        e_avg = np.stack([e[:, :, k:].mean(axis=(1, 2)) for k in ks], axis=1)
        return c_avg, e_avg

    c_avg, e_avg = map_paths(reduce, spec, hjb.policy(), grid, mc.n_paths, mc.seed, True)
    j = starts.index(window)
    lhs = sample_mean(c_avg[:, j])
    kl = sample_mean(e_avg[:, j])
    paired = sample_mean(e_avg[:, j] - c_avg[:, j])
    sens = {f"{w:g}": {"lhs": float(c_avg[:, i].mean()), "kl_rate": float(e_avg[:, i].mean())}
            for i, w in enumerate(starts)}
    rs = Estimate(hjb.lambda_star, 0.0, mc.n_paths, float(mc.n_paths))
    return BoundReport("ErgodicHJB", spec.n_agents, 1.0, lhs, rs, kl, mc.seed, mc.n_paths,
                       {"slack_se": paired.se, "window": window,
                        "window_sensitivity": sens})
