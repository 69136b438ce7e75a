"""Monte Carlo certification of risk-sensitive robustness bounds for
interacting-agent diffusions."""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .sde import (ModelSpec, PathBundle, PolicySpec, TimeGrid, map_paths, simulate,
                  validate_model)
from .girsanov import kl_divergence, log_rn_derivative, novikov_diagnostic
from .risk import (CostSpec, TiltFamily, dv_gap, estimate_risk_neutral,
                   estimate_risk_sensitive, estimate_tilted, evaluate_cost)
from .stats import Estimate
from .bounds import (BoundReport, MCConfig, SearchConfig, certify_bound_general,
                     certify_bound_meanfield, optimize_policy)
from .alpha import alpha_limit_probe, optimize_alpha, psi_curve, stability_sweep
from .meanfield import (EmpiricalMeasure, FixedPointConfig, concentration_probe,
                        flow_mean_spread, solve_mckean_vlasov, wasserstein_1d)
from .hjb import (HjbGrid, certify_bound_decoupled, solve_principal_eigen,
                  validate_lambda_mc)
