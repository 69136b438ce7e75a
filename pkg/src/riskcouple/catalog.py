"""Named model, interaction and cost forms usable from scenario files.

Each form has numeric parameters with defaults and valid ranges; a scenario
selects a form by ``name`` and overrides parameters by key.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Param:
    default: float
    lo: float = -np.inf
    hi: float = np.inf
    lo_open: bool = False
    doc: str = ""

    def check(self, value):
        if not np.isfinite(value) and np.isfinite(self.lo) and np.isfinite(self.hi):
            return False
        if self.lo_open:
            ok = value > self.lo
        else:
            ok = value >= self.lo
        return ok and value <= self.hi

    def describe(self):
        lb = "(" if self.lo_open else "["
        return f"{lb}{self.lo:g}, {self.hi:g}]"


@dataclass(frozen=True)
class Form:
    name: str
    kind: str
    params: dict
    build: object
    doc: str
    variant: str = ""


def _ou(p):
    th = p["theta"]
    return lambda t, x, u: -th * x + u


def _linear(p):
    a = p["a"]
    return lambda t, x, u: a * x + u


def _sine(p):
    return lambda t, x, u: np.sin(x) + u


def _quadratic_drift(p):
    return lambda t, x, u: x * x + u


def _zero_drift(p):
    return lambda t, x, u: u + 0.0 * x


def _mf_linear(p):
    th, rho = p["theta"], p["rho"]
    return lambda x, m, u: -th * x + rho * m + u


def _sigma_const(p):
    return float(p["sigma"])


def _sigma_mod(p):
    s, d = p["sigma"], p["delta"]
    return lambda x: s * (1.0 + d * np.sin(x))


def _v_constant(p):
    c = p["value"]
    return lambda t, z, u: np.full(np.shape(z), c)


def _v_decaying(p):
    scale, ratio = p["scale"], p["ratio"]

    def v(t, z, u):
        i = np.arange(1, np.shape(z)[-1] + 1)
        return np.broadcast_to(scale * ratio ** i, np.shape(z))
    return v


def _v_attraction(p):
    k = p["kappa"]
    return lambda t, z, u: k * (z.mean(axis=-1, keepdims=True) - z)


def _v_linear_state(p):
    c = p["coefficient"]
    return lambda t, z, u: c * z


def _c_quadratic(p):
    q, r = p["q"], p["r"]
    return lambda x, u: q * x * x + r * u * u


def _c_mean_deviation(p):
    q = p["q"]
    return lambda x, u, xbar, ubar: q * (x - xbar) ** 2


def _c_zero(p):
    return lambda x, u: 0.0 * x


def _c_constant(p):
    c = p["value"]
    return lambda x, u: np.full(np.shape(x), c)


def _c_joint_quadratic(p):
    q, r = p["q"], p["r"]
    return lambda X, U: np.mean(q * X * X + r * U * U, axis=-1)


def _c_linear_terminal(p):
    lam = p["lam"]
    return lambda xT: lam * xT.mean(axis=-1)


_FORMS = [
    Form("ou", "drift", {"theta": Param(1.0, 0.0, 100.0, doc="mean reversion")}, _ou,
         "b(x, u) = -theta x + u"),
    Form("linear", "drift", {"a": Param(-1.0, -100.0, 100.0)}, _linear, "b(x, u) = a x + u"),
    Form("zero", "drift", {}, _zero_drift, "b(x, u) = u"),
    Form("sine", "drift", {}, _sine, "b(x, u) = sin(x) + u"),
    Form("quadratic", "drift", {}, _quadratic_drift,
         "b(x, u) = x^2 + u (not Lipschitz; regularity-diagnostic demo)"),
    Form("meanfield_linear", "meanfield_drift",
         {"theta": Param(1.0, 0.0, 100.0), "rho": Param(0.5, -100.0, 100.0)}, _mf_linear,
         "b(x, m, u) = -theta x + rho m + u with m the population mean"),
    Form("constant", "diffusion", {"sigma": Param(1.0, 0.0, 100.0, lo_open=True)},
         _sigma_const, "sigma(x) = sigma"),
    Form("modulated", "diffusion",
         {"sigma": Param(1.0, 0.0, 100.0, lo_open=True), "delta": Param(0.5, 0.0, 0.99)},
         _sigma_mod, "sigma(x) = sigma (1 + delta sin x)"),
    Form("none", "interaction", {}, None, "no interaction (true model = nominal model)"),
    Form("constant", "interaction", {"value": Param(0.3, -100.0, 100.0)}, _v_constant,
         "v = value for every agent"),
    Form("decaying", "interaction",
         {"scale": Param(0.5, -100.0, 100.0), "ratio": Param(0.5, 0.0, 1.0, lo_open=True)},
         _v_decaying, "v^i = scale * ratio^i, i = 1..N (finite total energy)"),
    Form("meanfield_attraction", "interaction", {"kappa": Param(0.2, -100.0, 100.0)},
         _v_attraction, "v^i = kappa (mean_m z^m - z^i)"),
    Form("linear_state", "interaction", {"coefficient": Param(1.0, -100.0, 100.0)},
         _v_linear_state, "v^i = coefficient * z^i"),
    Form("quadratic", "cost", {"q": Param(1.0, 0.0, 1e6), "r": Param(0.1, 0.0, 1e6)},
         _c_quadratic, "g(x, u) = q x^2 + r u^2 per agent", "decoupled"),
    Form("mean_deviation", "cost", {"q": Param(1.0, 0.0, 1e6)}, _c_mean_deviation,
         "g = q (x - mean x)^2 per agent", "mean_field_symmetric"),
    Form("zero", "cost", {}, _c_zero, "g = 0", "decoupled"),
    Form("constant", "cost", {"value": Param(1.0, -1e6, 1e6)}, _c_constant, "g = value",
         "decoupled"),
    Form("joint_quadratic", "cost", {"q": Param(1.0, 0.0, 1e6), "r": Param(0.1, 0.0, 1e6)},
         _c_joint_quadratic, "g(X, U) = mean_i (q x_i^2 + r u_i^2), a joint cost", "general"),
    Form("linear_terminal", "cost", {"lam": Param(1.0, -100.0, 100.0)}, _c_linear_terminal,
         "no running cost; terminal cost lam * mean_i x_i(T)", "decoupled"),
]

CATALOG = {(f.kind, f.name): f for f in _FORMS}
KINDS = ("drift", "meanfield_drift", "diffusion", "interaction", "cost")


def lookup(kind, name):
    return CATALOG.get((kind, name))


def names(kind):
    return sorted(n for k, n in CATALOG if k == kind)


def catalog_lines():
    lines = []
    for kind in KINDS:
        lines.append(f"{kind}:")
        for f in sorted((f for f in _FORMS if f.kind == kind), key=lambda f: f.name):
            ps = ", ".join(f"{k}={p.default:g} {p.describe()}" for k, p in f.params.items())
            lines.append(f"  {f.name:<22} {f.doc}" + (f"  [{ps}]" if ps else ""))
    return lines
