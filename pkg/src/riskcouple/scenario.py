"""Scenario files: strict parsing, model assembly and orchestration.

A scenario is a YAML mapping with a ``kind`` and the blocks ``model``,
``policy``, ``cost``, ``mc``, ``output`` plus the kind-specific ``alpha``,
``hjb``, ``meanfield`` or ``dv`` blocks.  Unknown keys are errors, and all
problems in a document are reported together.
"""

import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from . import __version__
from . import catalog
from .alpha import STABILITY_HEADER, optimize_alpha, psi_curve, stability_sweep
from .bounds import (CSV_HEADER, MCConfig, certify_bound_general, certify_bound_meanfield,
                     tail_trend)
from .errors import RiskCoupleError
from .girsanov import kl_divergence
from .hjb import (EIGEN_HEADER, HjbGrid, certify_bound_decoupled, solve_principal_eigen,
                  validate_lambda_mc)
from .io import write_csv, write_json
from .meanfield import (CONCENTRATION_HEADER, FLOW_HEADER, FixedPointConfig,
                        concentration_probe, meanfield_coupled_model, solve_mckean_vlasov)
from .risk import CostSpec, TiltFamily, dv_gap, evaluate_cost, log_entropy_moment
from .sde import ModelSpec, PolicySpec, TimeGrid, map_paths, simulate, validate_model

KINDS = ("BoundMeanField", "BoundGeneral", "AlphaOpt", "Stability", "MeanFieldLimit",
         "HjbErgodic", "DvCheck")

KIND_ALIASES = {"bound_meanfield": "BoundMeanField", "bound_general": "BoundGeneral",
                "alpha_opt": "AlphaOpt", "stability": "Stability",
                "meanfield_limit": "MeanFieldLimit", "hjb_ergodic": "HjbErgodic",
                "dv_check": "DvCheck"}

INF = float("inf")


# --------------------------------------------------------------------------- errors

@dataclass(frozen=True)
class ConfigIssue:
    code: str
    path: str
    message: str
    line: int = None

    def __str__(self):
        where = f"line {self.line}: " if self.line is not None else ""
        return f"{self.code} at {self.path or '<root>'}: {where}{self.message}"


class ScenarioError(RiskCoupleError, ValueError):
    """All problems found in a scenario document."""

    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("\n".join(str(i) for i in self.issues))

    @property
    def codes(self):
        return [i.code for i in self.issues]


class ParseError(ScenarioError):
    def __init__(self, line, message):
        self.line = line
        super().__init__([ConfigIssue("ParseError", "", message, line)])


# --------------------------------------------------------------------------- schema

def _num(lo=-INF, hi=INF, lo_open=False, integer=False, default=None, required=False):
    return {"type": "int" if integer else "num", "lo": lo, "hi": hi, "lo_open": lo_open,
            "default": default, "required": required}


def _list(lo=-INF, hi=INF, lo_open=False, integer=False, default=None, min_len=1):
    return {"type": "list", "integer": integer, "lo": lo, "hi": hi, "lo_open": lo_open,
            "default": default, "min_len": min_len, "required": False}


def _choice(options, default=None):
    return {"type": "choice", "options": options, "default": default, "required": False}


ALPHA_GRID = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0]

MC_SCHEMA = {
    "n_paths": _num(1, 10 ** 8, integer=True, default=10_000),
    "seed": _num(0, 2 ** 64 - 1, integer=True, required=True),
    "horizon": _num(0, 1e6, lo_open=True, default=1.0),
    "dt": _num(0, 1e3, lo_open=True, default=0.01),
    "n_list": _list(1, 10 ** 6, integer=True, default=[2, 4, 8, 16]),
    "alphas": _list(0, 1e6, lo_open=True, default=ALPHA_GRID),
    "eps": _list(0, 1e3, default=[0.4, 0.2, 0.1, 0.05]),
}

POLICY_SCHEMA = {
    "theta0": _num(-1e6, 1e6, default=0.0),
    "theta1": _num(-1e6, 1e6, default=0.0),
    "u_min": _num(default=-INF),
    "u_max": _num(default=INF),
    "table": _choice(["hjb"], default=None),
}

MODEL_BLOCK_KEYS = ("drift", "meanfield_drift", "diffusion", "interaction")

MODEL_SCHEMA = {
    "agents": _num(1, 10 ** 6, integer=True, default=1),
    "initial_state": _num(-1e6, 1e6, default=0.0),
}

ALPHA_SCHEMA = {
    "kl_budget": _num(0, 1e6, default=None),
    "tol": _num(0, 1, lo_open=True, default=1e-4),
}

HJB_SCHEMA = {
    "x_min": _num(-1e3, 0, default=-6.0),
    "x_max": _num(0, 1e3, default=6.0),
    "h": _num(0, 10, lo_open=True, default=0.01),
    "u_min": _num(-1e3, 1e3, default=0.0),
    "u_max": _num(-1e3, 1e3, default=0.0),
    "n_controls": _num(1, 10 ** 4, integer=True, default=41),
    "tol": _num(0, 1, lo_open=True, default=1e-8),
    "max_iter": _num(1, 10 ** 4, integer=True, default=50),
    "max_inner": _num(1, 10 ** 5, integer=True, default=500),
    "mc_paths": _num(1, 10 ** 8, integer=True, default=100_000),
    "mc_horizon": _num(0, 1e6, lo_open=True, default=5.0),
    "window": _num(0, 1, default=0.5),
}

MEANFIELD_SCHEMA = {
    "cloud_size": _num(2, 10 ** 7, integer=True, default=10_000),
    "tol": _num(0, 1e3, lo_open=True, default=1e-3),
    "max_iter": _num(1, 10 ** 4, integer=True, default=50),
    "damping": _num(0, 1, default=0.5),
    "init": _choice(["particle", "constant"], default="particle"),
    "reps": _num(2, 10 ** 5, integer=True, default=32),
    "n_list": _list(1, 10 ** 6, integer=True, default=[8, 16, 32, 64, 128]),
    "certify_n": _list(1, 10 ** 6, integer=True, default=[16]),
    "lipschitz": _num(0, 1e6, default=None),
}

DV_SCHEMA = {
    "constants": _list(-100, 100, default=[0.125 * k for k in range(16)]),
    "piecewise": {"type": "nested", "default": [[0.5, 1.5], [1.5, 0.5], [0.8, 1.2],
                                                [1.2, 0.8]], "required": False},
}

OUTPUT_SCHEMA = {
    "directory": {"type": "str", "default": "out", "required": False},
    "formats": {"type": "formats", "default": ["csv", "json"], "required": False},
}

BLOCKS = {"mc": MC_SCHEMA, "policy": POLICY_SCHEMA, "alpha": ALPHA_SCHEMA, "hjb": HJB_SCHEMA,
          "meanfield": MEANFIELD_SCHEMA, "dv": DV_SCHEMA, "output": OUTPUT_SCHEMA}

TOP_KEYS = ("kind", "model", "policy", "cost", "mc", "alpha", "hjb", "meanfield", "dv",
            "output")


@dataclass
class ScenarioConfig:
    kind: str
    model: dict
    policy: dict
    cost: dict
    mc: dict
    alpha: dict
    hjb: dict
    meanfield: dict
    dv: dict
    output: dict

    def to_dict(self):
        return {k: getattr(self, k) for k in TOP_KEYS}

    def canonical_json(self):
        return json.dumps(_json_safe(self.to_dict()), sort_keys=True, separators=(",", ":"))

    def config_hash(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    @property
    def variant(self):
        return "B" if "model_b" in self.model else "A"


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_value(rule, value, path, issues):
    t = rule["type"]
    if t in ("num", "int"):
        if not _is_number(value):
            issues.append(ConfigIssue("TypeError", path, f"expected a number, got {value!r}"))
            return None
        if t == "int" and not float(value).is_integer():
            issues.append(ConfigIssue("TypeError", path, f"expected an integer, got {value!r}"))
            return None
        ok = value > rule["lo"] if rule["lo_open"] else value >= rule["lo"]
        if not (ok and value <= rule["hi"]) or (math.isnan(value)):
            lb = "(" if rule["lo_open"] else "["
            issues.append(ConfigIssue("OutOfRange", path,
                                      f"{value!r} not in {lb}{rule['lo']}, {rule['hi']}]"))
            return None
        return int(value) if t == "int" else float(value)
    if t == "list":
        if not isinstance(value, list) or len(value) < rule["min_len"]:
            issues.append(ConfigIssue("TypeError", path, "expected a non-empty list"))
            return None
        sub = {"type": "int" if rule["integer"] else "num", "lo": rule["lo"],
               "hi": rule["hi"], "lo_open": rule["lo_open"]}
        out = [_check_value(sub, v, f"{path}[{i}]", issues) for i, v in enumerate(value)]
        return None if any(v is None for v in out) else out
    if t == "choice":
        if value not in rule["options"]:
            issues.append(ConfigIssue("OutOfRange", path,
                                      f"{value!r} not one of {rule['options']}"))
            return None
        return value
    if t == "str":
        if not isinstance(value, str) or not value:
            issues.append(ConfigIssue("TypeError", path, "expected a non-empty string"))
            return None
        return value
    if t == "formats":
        if not isinstance(value, list) or not set(value) <= {"csv", "json"}:
            issues.append(ConfigIssue("OutOfRange", path, "formats must be a subset of "
                                      "[csv, json]"))
            return None
        return list(value)
    if t == "nested":
        if not isinstance(value, list) or not all(
                isinstance(r, list) and r and all(_is_number(x) for x in r) for r in value):
            issues.append(ConfigIssue("TypeError", path, "expected a list of number lists"))
            return None
        return [[float(x) for x in r] for r in value]
    raise AssertionError(t)


def _check_block(schema, doc, path, issues):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        issues.append(ConfigIssue("TypeError", path, "expected a mapping"))
        return {}
    out = {}
    for key in doc:
        if key not in schema:
            issues.append(ConfigIssue("UnknownKey", f"{path}.{key}",
                                      f"unknown key; allowed: {sorted(schema)}"))
    for key, rule in schema.items():
        if key in doc:
            out[key] = _check_value(rule, doc[key], f"{path}.{key}", issues)
        elif rule.get("required"):
            issues.append(ConfigIssue("MissingRequired", f"{path}.{key}", "required key"))
        else:
            d = rule.get("default")
            out[key] = list(d) if isinstance(d, list) else d
    return out


def _check_form(kind, doc, path, issues, required=True):
    if doc is None:
        if required:
            issues.append(ConfigIssue("MissingRequired", path, f"a {kind} form is required"))
        return None
    if isinstance(doc, str):
        doc = {"name": doc}
    if not isinstance(doc, dict) or "name" not in doc:
        issues.append(ConfigIssue("MissingRequired", f"{path}.name", "form needs a name"))
        return None
    form = catalog.lookup(kind, doc["name"])
    if form is None:
        issues.append(ConfigIssue("UnknownKey", f"{path}.name",
                                  f"unknown {kind} {doc['name']!r}; known: "
                                  f"{catalog.names(kind)}"))
        return None
    out = {"name": form.name}
    allowed = set(form.params) | {"name"} | ({"variant"} if kind == "cost" else set())
    for key in doc:
        if key not in allowed:
            issues.append(ConfigIssue("UnknownKey", f"{path}.{key}",
                                      f"unknown parameter for {kind} {form.name!r}"))
    for key, p in form.params.items():
        v = doc.get(key, p.default)
        if not _is_number(v):
            issues.append(ConfigIssue("TypeError", f"{path}.{key}", "expected a number"))
            continue
        if not p.check(float(v)):
            issues.append(ConfigIssue("OutOfRange", f"{path}.{key}",
                                      f"{v!r} not in {p.describe()}"))
            continue
        out[key] = float(v)
    if kind == "cost":
        variant = doc.get("variant", form.variant)
        if variant not in ("general", "mean_field_symmetric", "decoupled"):
            issues.append(ConfigIssue("OutOfRange", f"{path}.variant", f"{variant!r}"))
        elif form.variant in ("general", "mean_field_symmetric") and variant != form.variant:
            issues.append(ConfigIssue("OutOfRange", f"{path}.variant",
                                      f"cost {form.name!r} requires variant {form.variant}"))
        out["variant"] = variant
    return out


def _check_model(doc, kind, issues):
    if not isinstance(doc, dict):
        issues.append(ConfigIssue("MissingRequired" if doc is None else "TypeError", "model",
                                  "a model block is required"))
        return {}
    allowed = set(MODEL_SCHEMA) | {"model_a", "model_b"}
    base = {k: v for k, v in doc.items() if k in MODEL_SCHEMA}
    for key in doc:
        if key not in allowed:
            issues.append(ConfigIssue("UnknownKey", f"model.{key}", "unknown key"))
    out = _check_block(MODEL_SCHEMA, base, "model", issues)
    has_a, has_b = "model_a" in doc, "model_b" in doc
    if has_a and has_b:
        issues.append(ConfigIssue("MutuallyExclusive", "model",
                                  "model_a and model_b cannot both be given"))
        return out
    if not (has_a or has_b):
        issues.append(ConfigIssue("MissingRequired", "model.model_a",
                                  "one of model_a / model_b is required"))
        return out
    key = "model_a" if has_a else "model_b"
    block = doc[key] or {}
    if not isinstance(block, dict):
        issues.append(ConfigIssue("TypeError", f"model.{key}", "expected a mapping"))
        return out
    for k in block:
        if k not in MODEL_BLOCK_KEYS:
            issues.append(ConfigIssue("UnknownKey", f"model.{key}.{k}", "unknown key"))
    sub = {}
    need_mf = kind == "MeanFieldLimit"
    sub["drift"] = _check_form("drift", block.get("drift"), f"model.{key}.drift", issues,
                               required=not need_mf)
    sub["meanfield_drift"] = _check_form("meanfield_drift", block.get("meanfield_drift"),
                                         f"model.{key}.meanfield_drift", issues,
                                         required=need_mf)
    sub["diffusion"] = _check_form("diffusion", block.get("diffusion", {"name": "constant"}),
                                   f"model.{key}.diffusion", issues)
    sub["interaction"] = _check_form("interaction",
                                     block.get("interaction", {"name": "none"}),
                                     f"model.{key}.interaction", issues)
    out[key] = sub
    return out


def parse_scenario(text):
    """Parse and validate a scenario document; raise :class:`ScenarioError`
    (or :class:`ParseError` for malformed YAML) listing every problem."""
    try:
        doc = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        raise ParseError(mark.line + 1 if mark else None, str(exc.problem or exc)) from None
    except yaml.YAMLError as exc:
        raise ParseError(None, str(exc)) from None
    if not isinstance(doc, dict):
        raise ParseError(1, "scenario must be a mapping")
    issues = []
    for key in doc:
        if key not in TOP_KEYS:
            issues.append(ConfigIssue("UnknownKey", str(key), f"allowed: {list(TOP_KEYS)}"))
    kind = doc.get("kind")
    kind = KIND_ALIASES.get(kind, kind) if isinstance(kind, str) else kind
    if kind is None:
        issues.append(ConfigIssue("MissingRequired", "kind", f"one of {list(KINDS)}"))
    elif kind not in KINDS:
        issues.append(ConfigIssue("OutOfRange", "kind", f"{kind!r} not one of {list(KINDS)}"))
    model = _check_model(doc.get("model"), kind, issues)
    blocks = {name: _check_block(schema, doc.get(name), name, issues)
              for name, schema in BLOCKS.items()}
    cost = _check_form("cost", doc.get("cost"), "cost", issues,
                       required=kind not in ("MeanFieldLimit",) or "cost" in doc)
    if cost is None:
        cost = {"name": "quadratic", "q": 1.0, "r": 0.1, "variant": "mean_field_symmetric"}
    pol = blocks["policy"]
    if pol.get("u_min") is not None and pol.get("u_max") is not None \
            and pol["u_min"] > pol["u_max"]:
        issues.append(ConfigIssue("OutOfRange", "policy.u_min", "u_min > u_max"))
    h = blocks["hjb"]
    if h.get("u_min") is not None and h.get("u_max") is not None and h["u_min"] > h["u_max"]:
        issues.append(ConfigIssue("OutOfRange", "hjb.u_min", "u_min > u_max"))
    mc = blocks["mc"]
    if mc.get("horizon") and mc.get("dt") and mc["dt"] > mc["horizon"]:
        issues.append(ConfigIssue("OutOfRange", "mc.dt", "dt exceeds the horizon"))
    if kind == "Stability" and mc.get("eps") and not any(e > 0 for e in mc["eps"]):
        issues.append(ConfigIssue("OutOfRange", "mc.eps", "needs a positive epsilon"))
    if issues:
        raise ScenarioError(issues)
    return ScenarioConfig(kind, model, pol, cost, mc, blocks["alpha"], h,
                          blocks["meanfield"], blocks["dv"], blocks["output"])


def load_scenario(path):
    with open(path) as fh:
        return parse_scenario(fh.read())


# --------------------------------------------------------------------------- assembly

def _build(kind, cfg):
    if cfg is None:
        return None
    form = catalog.lookup(kind, cfg["name"])
    return form.build({k: v for k, v in cfg.items() if k not in ("name", "variant")}) \
        if form.build else None


def build_model(config, agents=None):
    m = config.model
    key = "model_b" if "model_b" in m else "model_a"
    blk = m[key]
    mf = _build("meanfield_drift", blk.get("meanfield_drift"))
    drift = _build("drift", blk.get("drift"))
    if drift is None and mf is not None:
        drift = lambda t, x, u: mf(x, x.mean(axis=-1, keepdims=True), u)
    return ModelSpec(int(agents or m["agents"]), drift, _build("diffusion", blk["diffusion"]),
                     _build("interaction", blk["interaction"]), "B" if key == "model_b" else "A",
                     mf, m["initial_state"], config.kind)


def build_policy(config):
    p = config.policy
    return PolicySpec.affine(p["theta0"], p["theta1"], p["u_min"], p["u_max"])


def build_cost(config):
    c = config.cost
    form = catalog.lookup("cost", c["name"])
    g = _build("cost", c)
    variant = c["variant"]
    if form.name == "linear_terminal":
        return CostSpec(None, variant, g)
    if form.variant == "decoupled" and variant == "mean_field_symmetric":
        base = g
        g = lambda x, u, xbar, ubar: base(x, u)
    elif form.variant == "decoupled" and variant == "general":
        base = g
        g = lambda X, U: np.mean(base(X, U), axis=-1)
    return CostSpec(g, variant)


def mc_config(config, workers=1, n_paths=None, horizon=None):
    mc = config.mc
    grid = TimeGrid.from_step(horizon or mc["horizon"], mc["dt"])
    return MCConfig(int(n_paths or mc["n_paths"]), int(mc["seed"]), grid, workers)


# --------------------------------------------------------------------------- running

@dataclass
class RunManifest:
    config_hash: str
    version: str
    kind: str
    outputs: list = field(default_factory=list)
    stages: dict = field(default_factory=dict)
    passed: bool = True
    failures: list = field(default_factory=list)

    def to_dict(self):
        return {"config_hash": self.config_hash, "version": self.version, "kind": self.kind,
                "outputs": [{"file": f, "rows": r} for f, r in self.outputs],
                "stages": self.stages, "passed": self.passed, "failures": self.failures}


class _Run:
    def __init__(self, config, out_dir, workers):
        self.config = config
        self.out = out_dir
        self.workers = workers
        self.manifest = RunManifest(config.config_hash(), __version__, config.kind)
        self._t = None
        self._stage = None
        self.summary = {"kind": config.kind, "config_hash": self.manifest.config_hash}

    def stage(self, name):
        now = time.perf_counter()
        if self._stage is not None:
            self.manifest.stages[self._stage] = now - self._t
        self._stage, self._t = name, now

    def csv(self, name, header, rows):
        if "csv" not in self.config.output["formats"]:
            return
        n = write_csv(os.path.join(self.out, name), header, rows)
        self.manifest.outputs.append((name, n))

    def fail(self, message):
        self.manifest.passed = False
        self.manifest.failures.append(message)

    def finish(self):
        self.stage(None)
        self.summary["passed"] = self.manifest.passed
        self.summary["failures"] = self.manifest.failures
        if "json" in self.config.output["formats"]:
            write_json(os.path.join(self.out, "summary.json"), self.summary)
            self.manifest.outputs.append(("summary.json", None))
        write_json(os.path.join(self.out, "manifest.json"), self.manifest.to_dict())
        return self.manifest


def _bound_rows(run, reports):
    run.csv("bounds.csv", CSV_HEADER, (r.row() for r in reports))
    for r in reports:
        if not r.passed:
            run.fail(f"{r.theorem_tag} N={r.n_agents} alpha={r.alpha:g}: slack {r.slack:.4g} "
                     f"< -3 se ({r.slack_se:.3g})")


def _run_bound_meanfield(run, cfg):
    spec, pol, cost = build_model(cfg), build_policy(cfg), build_cost(cfg)
    mc = mc_config(cfg, run.workers)
    run.stage("certify")
    reports = certify_bound_meanfield(spec, pol, cost, cfg.mc["n_list"], cfg.mc["alphas"], mc)
    _bound_rows(run, reports)
    run.summary["reports"] = [r.to_dict() for r in reports]
    run.summary["tail_trend"] = {f"{a:g}": tail_trend(reports, a) for a in cfg.mc["alphas"]}


def _run_bound_general(run, cfg):
    spec, pol, cost = build_model(cfg), build_policy(cfg), build_cost(cfg)
    mc = mc_config(cfg, run.workers)
    run.stage("certify")
    reports = [certify_bound_general(spec, pol, cost, a, mc) for a in cfg.mc["alphas"]]
    _bound_rows(run, reports)
    run.summary["reports"] = [r.to_dict() for r in reports]


def _run_alpha_opt(run, cfg):
    spec, pol, cost = build_model(cfg), build_policy(cfg), build_cost(cfg)
    mc = mc_config(cfg, run.workers)
    run.stage("nominal")
    costs = map_paths(lambda b: evaluate_cost(b, cost), spec.without_interaction(), pol,
                      mc.grid, mc.n_paths, mc.seed, False)
    budget = cfg.alpha["kl_budget"]
    if budget is None:
        run.stage("kl")
        kl = kl_divergence(spec, pol, mc.grid, mc.n_paths, mc.seed + 1)
        budget = kl.total_kl
        run.summary["kl"] = kl.to_dict()
    run.stage("optimize")
    curve = psi_curve(costs, budget, cfg.mc["alphas"])
    cert = optimize_alpha(costs, budget, cfg.alpha["tol"])
    run.csv("psi_curve.csv", ("alpha", "f_value", "f_se", "psi", "ess"), curve.rows())
    run.summary["certificate"] = cert.to_dict()
    run.summary["grid_argmin_alpha"] = curve.argmin_alpha
    if not cert.ok:
        run.fail(f"alpha certificate flags: {list(cert.flags)}")


def _run_stability(run, cfg):
    spec, pol, cost = build_model(cfg), build_policy(cfg), build_cost(cfg)
    mc = mc_config(cfg, run.workers)
    run.stage("sweep")
    rep = stability_sweep(spec, pol, cost, cfg.mc["eps"], mc)
    run.csv("stability.csv", STABILITY_HEADER, (r.row() for r in rep.rows))
    run.summary["stability"] = rep.to_dict()
    for r in rep.rows:
        if r.gap < -3 * r.gap_se:
            run.fail(f"stability eps={r.eps:g}: gap {r.gap:.4g} < -3 se")


def _run_meanfield(run, cfg):
    spec, pol = build_model(cfg), build_policy(cfg)
    mcb, mf = cfg.mc, cfg.meanfield
    grid = TimeGrid.from_step(mcb["horizon"], mcb["dt"])
    run.stage("mckean_vlasov")
    fp = FixedPointConfig(mf["tol"], mf["max_iter"], mf["damping"], mf["init"])
    flow = solve_mckean_vlasov(spec, pol, grid, mf["cloud_size"], fp, mcb["seed"])
    run.csv("flow.csv", FLOW_HEADER, flow.rows())
    run.summary["flow"] = {"iterations": flow.iterations, "converged": flow.converged,
                           "diffs": list(flow.diffs)}
    if not flow.converged:
        run.fail(f"McKean-Vlasov iteration did not converge in {flow.iterations} steps")
    run.stage("concentration")
    conc = concentration_probe(spec, pol, grid, mf["n_list"], mf["reps"], flow, mcb["seed"],
                               mf["lipschitz"], workers=run.workers)
    run.csv("concentration.csv", CONCENTRATION_HEADER, conc.rows())
    run.summary["concentration"] = {"N": conc.n_list, "mean": conc.means, "se": conc.ses,
                                    "slope": conc.slope, "envelope": conc.envelope,
                                    "decreasing": conc.decreasing,
                                    "measure_lipschitz": conc.measure_lipschitz}
    run.stage("certify")
    coupled = meanfield_coupled_model(spec, flow)
    cost = build_cost(cfg)
    mc = MCConfig(mcb["n_paths"], mcb["seed"], grid, run.workers)
    reports = certify_bound_meanfield(coupled, pol, cost, mf["certify_n"], mcb["alphas"], mc)
    _bound_rows(run, reports)
    run.summary["reports"] = [r.to_dict() for r in reports]


def _run_hjb(run, cfg):
    spec, cost = build_model(cfg), build_cost(cfg)
    h = cfg.hjb
    if cost.variant != "decoupled" or cost.running_cost is None:
        raise ScenarioError([ConfigIssue("OutOfRange", "cost",
                                         "HjbErgodic needs a decoupled running cost")])
    run.stage("eigen")
    grid = HjbGrid(h["x_min"], h["x_max"], h["h"], h["u_min"], h["u_max"], h["n_controls"])
    sol = solve_principal_eigen(spec.with_agents(1).without_interaction(), cost.running_cost,
                                grid, h["tol"], h["max_iter"], h["max_inner"])
    run.csv("eigenfunction.csv", EIGEN_HEADER, sol.rows())
    run.summary["spectral"] = sol.to_dict()
    run.stage("monte_carlo")
    est = validate_lambda_mc(spec, sol, h["mc_horizon"], h["mc_paths"], cfg.mc["seed"],
                             cfg.mc["dt"])
    run.summary["lambda_mc"] = est.to_dict()
    run.stage("certify")
    mc = mc_config(cfg, run.workers)
    rep = certify_bound_decoupled(spec, sol, mc, h["window"])
    _bound_rows(run, [rep])
    run.summary["reports"] = [rep.to_dict()]


def _run_dv(run, cfg):
    spec, pol, cost = build_model(cfg), build_policy(cfg), build_cost(cfg)
    mc = mc_config(cfg, run.workers)
    run.stage("nominal")
    nominal = simulate(spec.without_interaction(), pol, mc.grid, mc.n_paths, mc.seed, False)
    tilts = TiltFamily.constant(cfg.dv["constants"]) + TiltFamily(
        [tuple(p) for p in cfg.dv["piecewise"]])
    run.stage("tilts")
    rep = dv_gap(nominal, cost, tilts, spec, pol)
    header = ("index", "tilt", "value", "value_se", "kl", "log_mgf", "log_mgf_se", "deficit",
              "gap", "gap_se", "violation")
    run.csv("dv.csv", header, rep.rows())
    run.summary["dv"] = {"best_index": rep.best_index, "best": rep.best.to_dict(),
                         "log_mgf": rep.risk_sensitive.to_dict(), "gap": rep.gap,
                         "gap_se": rep.gap_se, "closed": rep.closed,
                         "violations": rep.violations,
                         "log_entropy_moment": log_entropy_moment(
                             evaluate_cost(nominal, cost))}
    if rep.violations:
        run.fail(f"tilts above log E[e^C] + 3 se: {rep.violations}")


RUNNERS = {"BoundMeanField": _run_bound_meanfield, "BoundGeneral": _run_bound_general,
           "AlphaOpt": _run_alpha_opt, "Stability": _run_stability,
           "MeanFieldLimit": _run_meanfield, "HjbErgodic": _run_hjb, "DvCheck": _run_dv}

DUMP_PATHS = 16


def run_scenario(config, out_dir=None, workers=1, dump_paths=False):
    """Execute ``config`` and write its outputs plus ``manifest.json`` to
    ``out_dir`` (default: the config's output directory)."""
    out_dir = out_dir or config.output["directory"]
    os.makedirs(out_dir, exist_ok=True)
    run = _Run(config, out_dir, workers)
    run.stage("validate")
    spec = build_model(config)
    grid = TimeGrid.from_step(config.mc["horizon"], config.mc["dt"])
    report = validate_model(spec, grid, build_policy(config))
    run.summary["validation"] = {"checks": report.checks, "warnings": report.warnings}
    try:
        RUNNERS[config.kind](run, config)
    except RiskCoupleError as exc:
        # keep what was written so far, record the failing stage, re-raise
        exc.stage = run._stage
        run.fail(f"{type(exc).__name__} in stage {run._stage}: {exc}")
        run.finish()
        raise
    if dump_paths:
        run.stage("dump_paths")
        b = simulate(spec, build_policy(config), grid,
                     min(DUMP_PATHS, config.mc["n_paths"]), config.mc["seed"], True)
        n = b.to_csv(os.path.join(out_dir, "paths.csv"))
        run.manifest.outputs.append(("paths.csv", n))
    return run.finish()
