"""Controlled diffusion ensembles and their Euler-Maruyama simulation.

Agents carry scalar states.  The true (interacting) model adds a perturbation
``v`` to each agent's drift, either directly (variant ``"A"``) or scaled by
the diffusion coefficient (variant ``"B"``)::

    A:  dX^i = (b(X^i, U^i) + v^i) dt + sigma(X^i) dB^i
    B:  dX^i = (b(X^i, U^i) + sigma(X^i) v^i) dt + sigma(X^i) dB^i

Dropping ``v`` gives the nominal model of non-interacting agents.  Both models
are driven by the same counter-based noise for a given seed, so a true and a
nominal bundle with equal seeds form a coupled pair.
"""

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import (EmptyEnsemble, GridMismatch, ModelError,
                     NonPositiveDiffusion, NumericOverflow)
from .rng import brownian_increments

# elements (paths * agents * steps) simulated per chunk
DEFAULT_CHUNK_ELEMENTS = 1 << 21


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    dt: float
    n_steps: int

    def __post_init__(self):
        if not self.dt > 0:
            raise GridMismatch(f"dt must be positive, got {self.dt}")
        if self.n_steps < 1:
            raise GridMismatch(f"n_steps must be >= 1, got {self.n_steps}")
        if abs(self.n_steps * self.dt - self.horizon) > np.spacing(self.horizon):
            raise GridMismatch(
                f"n_steps * dt = {self.n_steps * self.dt!r} != horizon {self.horizon!r}")

    @classmethod
    def from_step(cls, horizon, dt):
        n = int(round(horizon / dt))
        return cls(float(n * dt) if abs(n * dt - horizon) <= np.spacing(horizon)
                   else float(horizon), float(dt), n)

    @property
    def times(self):
        return np.arange(self.n_steps + 1) * self.dt


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Interacting ensemble of ``n_agents`` scalar controlled diffusions.

    ``drift(t, x, u)`` and ``diffusion(x)`` act elementwise on arrays of shape
    ``(paths, agents)``; ``diffusion`` may also be a plain number.
    ``interaction(t, z, u)`` returns the per-agent perturbation rate, where
    ``z`` is the ensemble state for variant A and the running noise record
    (Brownian path in the nominal coordinates) for variant B.
    ``meanfield_drift(x, m, u)`` is the drift with an explicit measure summary
    ``m`` (the ensemble or population mean), used by :mod:`riskcouple.meanfield`.
    """

    n_agents: int
    drift: Callable
    diffusion: object = 1.0
    interaction: Optional[Callable] = None
    variant: str = "A"
    meanfield_drift: Optional[Callable] = None
    initial_states: object = 0.0
    name: str = ""

    def __post_init__(self):
        if self.variant not in ("A", "B"):
            raise ModelError(f"variant must be 'A' or 'B', got {self.variant!r}")

    @property
    def x0(self):
        x0 = np.atleast_1d(np.asarray(self.initial_states, dtype=float))
        if x0.size == 1:
            return np.full(self.n_agents, x0[0])
        return x0

    @property
    def constant_sigma(self):
        if callable(self.diffusion):
            return None
        return float(self.diffusion)

    def sigma(self, x):
        if callable(self.diffusion):
            return np.broadcast_to(np.asarray(self.diffusion(x), dtype=float), np.shape(x))
        return np.full(np.shape(x), float(self.diffusion))

    def with_agents(self, n_agents):
        x0 = np.atleast_1d(np.asarray(self.initial_states, dtype=float))
        if x0.size > 1:
            x0 = np.resize(x0, n_agents)
        return replace(self, n_agents=int(n_agents), initial_states=x0)

    def scaled_interaction(self, eps):
        """Same model with ``v`` replaced by ``eps * v``."""
        if self.interaction is None:
            return self
        base = self.interaction
        return replace(self, interaction=lambda t, z, u: eps * base(t, z, u))

    def without_interaction(self):
        return replace(self, interaction=None)


@dataclass(frozen=True, eq=False)
class PolicySpec:
    """Deterministic Markov feedback, clamped to ``[u_min, u_max]``.

    Affine form: ``u^i = theta0 + theta1 * x^i`` for local information, and
    ``u^i = theta0 + theta1 * x^i + theta2 * mean(x)`` for global information.
    ``params`` has shape ``(k,)`` when shared by all agents (symmetric policy)
    or ``(n_agents, k)`` otherwise.  A lookup table ``(x_nodes, u_values)``
    with nearest-node evaluation may be given instead of affine parameters.
    """

    params: np.ndarray = field(default_factory=lambda: np.zeros(2))
    u_min: float = -np.inf
    u_max: float = np.inf
    information: str = "local"
    table: Optional[tuple] = None

    def __post_init__(self):
        if self.u_min > self.u_max:
            raise ModelError(f"empty action interval [{self.u_min}, {self.u_max}]")
        if self.information not in ("local", "global"):
            raise ModelError(f"information must be 'local' or 'global'")
        params = np.asarray(self.params, dtype=float)
        k = params.shape[-1]
        if self.information == "local" and k != 2:
            raise ModelError("local affine policies take exactly (theta0, theta1)")
        if self.information == "global" and k != 3:
            raise ModelError("global affine policies take (theta0, theta1, theta2)")
        object.__setattr__(self, "params", params)

    @classmethod
    def affine(cls, theta0=0.0, theta1=0.0, u_min=-np.inf, u_max=np.inf):
        return cls(np.array([theta0, theta1], dtype=float), u_min, u_max)

    @classmethod
    def constant(cls, u):
        return cls.affine(u, 0.0)

    @classmethod
    def from_table(cls, x_nodes, u_values):
        x_nodes = np.asarray(x_nodes, dtype=float)
        u_values = np.asarray(u_values, dtype=float)
        return cls(np.zeros(2), float(u_values.min()), float(u_values.max()),
                   table=(x_nodes, u_values))

    @property
    def shared(self):
        return self.params.ndim == 1

    def check_agents(self, n_agents):
        if not self.shared and self.params.shape[0] != n_agents:
            raise ModelError(
                f"per-agent policy has {self.params.shape[0]} rows for {n_agents} agents")

    def controls(self, x):
        """Actions for ensemble states ``x`` of shape ``(paths, agents)``."""
        if self.table is not None:
            nodes, values = self.table
            mid = 0.5 * (nodes[1:] + nodes[:-1])
            return values[np.searchsorted(mid, x)]
        p = self.params
        u = p[..., 0] + p[..., 1] * x
        if self.information == "global":
            u = u + p[..., 2] * x.mean(axis=-1, keepdims=True)
        return np.clip(u, self.u_min, self.u_max)


@dataclass(frozen=True, eq=False)
class PathBundle:
    """Simulated ensemble; arrays are read-only.

    Shapes: ``states`` (paths, agents, n_steps + 1); ``controls``,
    ``brownian_increments`` and ``interaction_values`` (paths, agents, n_steps).
    ``interaction_values`` holds ``v`` evaluated along the simulated path; in a
    nominal bundle it is recorded but not applied.
    """

    seed: int
    grid: TimeGrid
    states: np.ndarray
    controls: np.ndarray
    brownian_increments: np.ndarray
    interaction_values: Optional[np.ndarray]
    with_interaction: bool
    variant: str = "A"
    first_path: int = 0

    def __post_init__(self):
        for name in ("states", "controls", "brownian_increments", "interaction_values"):
            arr = getattr(self, name)
            if arr is not None:
                arr.flags.writeable = False

    @property
    def n_paths(self):
        return self.states.shape[0]

    @property
    def n_agents(self):
        return self.states.shape[1]

    def to_csv(self, path):
        """Columnar dump, one row per (path, agent, step); step ``n_steps``
        carries the terminal state and empty per-step columns."""
        from .io import write_csv
        P, N, n1 = self.states.shape
        n = n1 - 1
        v = self.interaction_values
        rows = []
        for p in range(P):
            for a in range(N):
                for k in range(n1):
                    if k < n:
                        rows.append((self.first_path + p, a, k, k * self.grid.dt,
                                     self.states[p, a, k], self.controls[p, a, k],
                                     self.brownian_increments[p, a, k],
                                     v[p, a, k] if v is not None else ""))
                    else:
                        rows.append((self.first_path + p, a, k, self.grid.horizon,
                                     self.states[p, a, k], "", "", ""))
        header = ("path", "agent", "step", "t", "state", "control", "increment",
                  "interaction")
        return write_csv(path, header, rows)


@dataclass
class ValidationReport:
    checks: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def ok(self):
        return all(passed for _, passed, _ in self.checks)

    def add(self, name, passed, message=""):
        self.checks.append((name, bool(passed), message))


def validate_model(spec, grid, policy=None, probe=(-10.0, 10.0), n_probe=201):
    """Structural checks on a model; raises on violations, warns otherwise.

    The diffusion coefficient is probed at the initial states and on an
    evenly spaced grid over ``probe``.
    """
    report = ValidationReport()
    if spec.n_agents < 1:
        raise EmptyEnsemble(f"n_agents must be >= 1, got {spec.n_agents}")
    report.add("n_agents", True)
    if spec.x0.shape != (spec.n_agents,):
        raise ModelError(
            f"{spec.x0.size} initial states for {spec.n_agents} agents")
    if abs(grid.n_steps * grid.dt - grid.horizon) > np.spacing(grid.horizon):
        raise GridMismatch("n_steps * dt differs from the horizon")
    report.add("grid", True)
    xs = np.concatenate([spec.x0, np.linspace(probe[0], probe[1], n_probe)])
    sig = spec.sigma(xs)
    if not np.all(np.isfinite(sig)) or sig.min() <= 0:
        raise NonPositiveDiffusion(
            f"diffusion must be bounded below by a positive constant; min {sig.min()!r}")
    report.add("diffusion", True, f"sigma_min={sig.min():.6g}")
    if policy is not None:
        policy.check_agents(spec.n_agents)
        report.add("policy", True)
    x = spec.x0[None, :]
    u = np.zeros_like(x) if policy is None else policy.controls(x)
    b = np.asarray(spec.drift(0.0, x, u), dtype=float)
    if not np.all(np.isfinite(b)):
        report.warnings.append("drift is not finite at the initial state")
    if spec.interaction is None:
        report.warnings.append("no interaction term: true and nominal models coincide")
    return report


def _simulate_block(spec, policy, grid, seed, first_path, n_paths, with_interaction,
                    increments, disable_diffusion, shared_agent_noise, record):
    N, n, dt = spec.n_agents, grid.n_steps, grid.dt
    if increments is None:
        dW = brownian_increments(seed, n_paths, N, n, dt, first_path=first_path,
                                 shared_agents=shared_agent_noise)
    else:
        dW = np.asarray(increments, dtype=float)[first_path:first_path + n_paths]
        if dW.shape != (n_paths, N, n):
            raise GridMismatch(f"increments shape {dW.shape} != {(n_paths, N, n)}")

    x = np.broadcast_to(spec.x0, (n_paths, N)).copy()
    noise = np.zeros((n_paths, N))
    states = np.empty((n_paths, N, n + 1))
    states[:, :, 0] = x
    controls = np.empty((n_paths, N, n))
    v_rec = np.empty((n_paths, N, n)) if spec.interaction is not None else None
    variant_b = spec.variant == "B"
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n):
            t = k * dt
            u = policy.controls(x)
            controls[:, :, k] = u
            s = spec.sigma(x)
            incr = spec.drift(t, x, u) * dt
            if v_rec is not None:
                v = np.broadcast_to(spec.interaction(t, noise if variant_b else x, u),
                                    (n_paths, N))
                v_rec[:, :, k] = v
                if with_interaction:
                    incr = incr + (s * v if variant_b else v) * dt
                    if variant_b:
                        noise = noise + v * dt
            noise = noise + dW[:, :, k]
            if not disable_diffusion:
                incr = incr + s * dW[:, :, k]
            x = x + incr
            if not np.all(np.isfinite(x)):
                bad = np.argwhere(~np.isfinite(x))[0]
                raise NumericOverflow(k + 1, first_path + int(bad[0]))
            states[:, :, k + 1] = x
    if not record:
        return states, controls, dW, v_rec
    return PathBundle(seed, grid, states, controls, dW, v_rec, with_interaction,
                      spec.variant, first_path)


def simulate(spec, policy, grid, n_paths, seed, with_interaction=True, *,
             increments=None, disable_diffusion=False, shared_agent_noise=False,
             first_path=0):
    """Euler-Maruyama ensemble with left-endpoint (Ito) evaluation.

    With ``with_interaction=False`` the interaction term is dropped from the
    dynamics (nominal model) but still evaluated and recorded along the path.
    Output is a pure function of ``(spec, policy, grid, n_paths, seed)``.

    Test hooks: ``increments`` overrides the generated noise (shape
    ``(n_paths, agents, n_steps)``); ``disable_diffusion`` freezes the noise
    term; ``shared_agent_noise`` gives every agent agent 0's stream.
    """
    policy.check_agents(spec.n_agents)
    if increments is not None:
        first_path = 0
    return _simulate_block(spec, policy, grid, seed, first_path, int(n_paths),
                           with_interaction, increments, disable_diffusion,
                           shared_agent_noise, True)


def iter_bundles(spec, policy, grid, n_paths, seed, with_interaction=True, *,
                 chunk_paths=None, increments=None, **hooks):
    """Yield the ensemble of ``simulate`` in consecutive path chunks."""
    if chunk_paths is None:
        chunk_paths = max(1, DEFAULT_CHUNK_ELEMENTS // (spec.n_agents * grid.n_steps))
    policy.check_agents(spec.n_agents)
    for start in range(0, n_paths, chunk_paths):
        count = min(chunk_paths, n_paths - start)
        yield _simulate_block(spec, policy, grid, seed, start, count, with_interaction,
                              increments, hooks.get("disable_diffusion", False),
                              hooks.get("shared_agent_noise", False), True)


def map_paths(fn, spec, policy, grid, n_paths, seed, with_interaction=True, **kw):
    """Apply ``fn(bundle)`` chunk by chunk and concatenate along paths.

    ``fn`` returns an array (or a tuple of arrays) whose first axis is the
    chunk's paths.  Use this for ensembles too large to hold in memory.
    """
    parts = [fn(b) for b in iter_bundles(spec, policy, grid, n_paths, seed,
                                         with_interaction, **kw)]
    if isinstance(parts[0], tuple):
        return tuple(np.concatenate(p, axis=0) for p in zip(*parts))
    return np.concatenate(parts, axis=0)


@dataclass
class RegularityReport:
    radii: np.ndarray
    lipschitz: np.ndarray
    growth: np.ndarray
    lipschitz_flag: bool
    growth_flag: bool
    note: str = ("sampled diagnostic only: bounded ratios on finite probes do not "
                 "prove global Lipschitz continuity or affine growth")


def _grows(ratios, factor):
    return bool(np.all(ratios[1:] > factor * ratios[:-1]))


def check_regularity(spec, domain=(-10.0, 10.0), n_probe=2000, seed=0,
                     u_range=(-1.0, 1.0), levels=3, growth_factor=1.5):
    """Probe the Lipschitz and affine-growth conditions on nested domains.

    Reports, for each nested radius around the domain centre, the maximum of
    ``|b(x,u) - b(y,u)| / |x - y|`` and of
    ``(|b(x,u) x| + sigma(x)^2) / (1 + x^2)`` over random samples.  A ratio
    that keeps growing by more than ``growth_factor`` per doubling of the
    radius is flagged.
    """
    lo, hi = domain
    if not hi > lo:
        raise ModelError("empty probe domain")
    rng = np.random.default_rng(seed)
    centre, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    radii = half / 2.0 ** np.arange(levels - 1, -1, -1)
    lip, grow = [], []
    for r in radii:
        x = centre + r * rng.uniform(-1, 1, n_probe)
        y = centre + r * rng.uniform(-1, 1, n_probe)
        u = rng.uniform(u_range[0], u_range[1], n_probe)
        bx = np.asarray(spec.drift(0.0, x, u), dtype=float)
        by = np.asarray(spec.drift(0.0, y, u), dtype=float)
        dx = np.abs(x - y)
        ok = dx > 0
        lip.append(np.max(np.abs(bx - by)[ok] / dx[ok]))
        s = spec.sigma(x)
        grow.append(np.max((np.abs(bx * x) + s**2) / (1 + x**2)))
    lip, grow = np.array(lip), np.array(grow)
    return RegularityReport(radii, lip, grow, _grows(lip, growth_factor),
                            _grows(grow, growth_factor))
