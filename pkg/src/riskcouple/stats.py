"""Monte Carlo estimates and log-space reductions."""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp


@dataclass(frozen=True)
class Estimate:
    value: float
    standard_error: float
    n_samples: int
    ess: float
    flags: tuple = field(default=())

    @property
    def se(self):
        return self.standard_error

    def to_dict(self):
        return {"value": self.value, "se": self.standard_error, "n": self.n_samples,
                "ess": self.ess, "flags": list(self.flags)}


def logmeanexp(a, axis=None):
    a = np.asarray(a, dtype=float)
    n = a.size if axis is None else a.shape[axis]
    return logsumexp(a, axis=axis) - np.log(n)


def normalized_weights(log_w):
    """Self-normalised weights ``exp(log_w) / sum(exp(log_w))`` (max-shifted)."""
    log_w = np.asarray(log_w, dtype=float)
    w = np.exp(log_w - log_w.max())
    return w / w.sum()


def ess(log_w):
    """Effective sample size ``(sum w)^2 / sum w^2``."""
    log_w = np.asarray(log_w, dtype=float)
    return float(np.exp(2 * logsumexp(log_w) - logsumexp(2 * log_w)))


def sample_mean(x):
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    # centred on the first sample so a constant vector returns itself exactly
    ref = x[0]
    d = x - ref
    se = float(d.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return Estimate(float(ref + d.mean()), se, n, float(n))


def joint_se(*ses):
    return float(np.sqrt(np.sum(np.square(ses))))
