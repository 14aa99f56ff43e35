"""Initial quality distributions and their calibration to quantile data.

Two families are supported:

* ``pln`` -- the right-handed Pareto log-normal law with tail ``alpha``,
  location ``nu`` (log units) and spread ``tau``;
* ``gp`` -- the generalized Pareto law with tail ``beta``, location ``mu``
  and scale ``sigma``.

Parameters are fitted by minimising the relative root mean squared error
between model and data quantiles with a Nelder-Mead simplex run on the
log of every strictly positive parameter.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import optimize, special
from sklearn.base import BaseEstimator

from ._validation import check_is_fitted, check_positive, check_probability

FAMILIES = ("pln", "gp")
_FAMILY_ALIASES = {
    "pln": "pln",
    "paretolognormal": "pln",
    "pareto_lognormal": "pln",
    "gp": "gp",
    "generalizedpareto": "gp",
    "generalized_pareto": "gp",
}

#: bracketing limit for numeric quantile inversion
QUANTILE_BRACKET_LIMIT = 1e12


class CalibrationError(RuntimeError):
    pass


def normalize_family(family: str) -> str:
    try:
        return _FAMILY_ALIASES[family.lower().replace("-", "_")]
    except KeyError:
        raise ValueError(f"unknown distribution family {family!r}; expected one of {FAMILIES}") from None


@dataclass(frozen=True)
class ParetoLogNormalParams:
    alpha: float
    nu: float
    tau: float

    family = "pln"

    def __post_init__(self):
        check_positive(self.alpha, "alpha")
        check_positive(self.tau, "tau")
        if not math.isfinite(self.nu):
            raise ValueError("nu must be finite")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GeneralizedParetoParams:
    beta: float
    mu: float
    sigma: float

    family = "gp"

    def __post_init__(self):
        check_positive(self.beta, "beta")
        check_positive(self.sigma, "sigma")
        check_positive(self.mu, "mu", allow_zero=True)

    def to_dict(self) -> dict:
        return asdict(self)


def params_from_dict(family: str, values: dict):
    family = normalize_family(family)
    cls = ParetoLogNormalParams if family == "pln" else GeneralizedParetoParams
    return cls(**{k: float(v) for k, v in values.items()})


@dataclass(frozen=True)
class QuantileData:
    """Probability/quantile pairs, probabilities strictly increasing."""

    probs: tuple
    values: tuple

    def __post_init__(self):
        probs = tuple(float(p) for p in self.probs)
        values = tuple(float(v) for v in self.values)
        if len(probs) != len(values):
            raise ValueError("probs and values must have equal length")
        if not probs:
            raise ValueError("quantile data is empty")
        for p in probs:
            check_probability(p)
        if any(b <= a for a, b in zip(probs, probs[1:])):
            raise ValueError("probabilities must be strictly increasing")
        if any(v <= 0 for v in values):
            raise ValueError("quantile values must be > 0")
        if any(b < a for a, b in zip(values, values[1:])):
            raise ValueError("quantile values must be nondecreasing")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.probs)

    @classmethod
    def from_csv(cls, path) -> "QuantileData":
        """Read ``prob,value`` rows; a non-numeric first row is treated as a header."""
        probs, values = [], []
        with Path(path).open(encoding="utf-8", newline="") as handle:
            for row in csv.reader(handle):
                if not row or row[0].lstrip().startswith("#"):
                    continue
                try:
                    p, v = float(row[0]), float(row[1])
                except (ValueError, IndexError):
                    if probs:
                        raise ValueError(f"malformed quantile row {row!r} in {path}") from None
                    continue
                probs.append(p)
                values.append(v)
        return cls(tuple(probs), tuple(values))


#: Present value of 30-year earnings (USD thousands), 2024 Q3 full-time workers.
EARNINGS_QUANTILES = QuantileData(
    (0.10, 0.25, 0.50, 0.75, 0.90),
    (551.43, 717.67, 1058.34, 1687.90, 2627.23),
)

#: Fitted parameters as published alongside ``EARNINGS_QUANTILES``.
PUBLISHED_PLN = ParetoLogNormalParams(alpha=1.8644, nu=6.5492, tau=0.44209)
PUBLISHED_GP = GeneralizedParetoParams(beta=8.6348, mu=459.4388, sigma=835.2216)


def normal_cdf(z):
    """Standard normal CDF, ``0.5 * erfc(-z / sqrt(2))`` (relative error near machine epsilon)."""
    return special.ndtr(z) if np.ndim(z) else float(special.ndtr(float(z)))


def annuity_factor(rate: float, years: float) -> float:
    """Continuous-time annuity factor ``(1 - exp(-rate * years)) / rate``."""
    return (1.0 - math.exp(-rate * years)) / rate


def hourly_wage(present_value: float, rate: float = 0.04, years: float = 30.0,
                weeks: float = 52.0, hours: float = 40.0) -> float:
    """Convert a present value in USD thousands to an hourly wage in USD."""
    return present_value * 1000.0 / (annuity_factor(rate, years) * weeks * hours)


# -- Pareto log-normal ------------------------------------------------------

def _pln_log_scale(p: ParetoLogNormalParams) -> float:
    return p.alpha * p.nu + 0.5 * (p.alpha * p.tau) ** 2


def plognorm_pdf(p: ParetoLogNormalParams, x):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0
    lx = np.log(x[pos])
    z = (lx - p.nu - p.alpha * p.tau**2) / p.tau
    log_pdf = math.log(p.alpha) - (p.alpha + 1.0) * lx + _pln_log_scale(p) + special.log_ndtr(z)
    out[pos] = np.exp(log_pdf)
    return out if out.ndim else float(out)


def plognorm_cdf(p: ParetoLogNormalParams, x):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0
    lx = np.log(x[pos])
    z1 = (lx - p.nu) / p.tau
    z2 = z1 - p.alpha * p.tau
    tail = np.exp(-p.alpha * lx + _pln_log_scale(p) + special.log_ndtr(z2))
    out[pos] = np.clip(special.ndtr(z1) - tail, 0.0, 1.0)
    return out if out.ndim else float(out)


def plognorm_quantile(p: ParetoLogNormalParams, prob):
    if np.ndim(prob):
        return np.array([plognorm_quantile(p, q) for q in np.asarray(prob, dtype=float)])
    prob = check_probability(prob)
    # the body is log-normal; start the bracket around its quantile
    guess = math.exp(p.nu + p.tau * float(special.ndtri(prob)))
    lo, hi = guess, guess
    while plognorm_cdf(p, lo) > prob:
        lo *= 0.5
        if lo < 1e-300:
            raise CalibrationError("quantile bracket underflow")
    while plognorm_cdf(p, hi) < prob:
        hi *= 2.0
        if hi > QUANTILE_BRACKET_LIMIT:
            raise CalibrationError(
                f"quantile bracket exceeded {QUANTILE_BRACKET_LIMIT:g} for prob={prob} with {p}"
            )
    if lo == hi:
        return lo
    return optimize.brentq(lambda v: plognorm_cdf(p, v) - prob, lo, hi, xtol=1e-12, rtol=1e-13)


# -- generalized Pareto -----------------------------------------------------

def gpareto_pdf(p: GeneralizedParetoParams, y):
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y)
    above = y > p.mu
    bracket = 1.0 + (y[above] - p.mu) / (p.beta * p.sigma)
    out[above] = bracket ** (-p.beta - 1.0) / p.sigma
    return out if out.ndim else float(out)


def gpareto_cdf(p: GeneralizedParetoParams, y):
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y)
    above = y > p.mu
    out[above] = 1.0 - (1.0 + (y[above] - p.mu) / (p.beta * p.sigma)) ** (-p.beta)
    return out if out.ndim else float(out)


def gpareto_quantile(p: GeneralizedParetoParams, prob):
    prob = np.asarray(prob, dtype=float)
    if np.any((prob <= 0) | (prob >= 1)):
        raise ValueError("prob must lie in (0, 1)")
    # expm1/log1p keep the left tail accurate as prob -> 0
    q = p.mu + p.beta * p.sigma * np.expm1(-np.log1p(-prob) / p.beta)
    return q if q.ndim else float(q)


# -- family dispatch --------------------------------------------------------

def pdf(params, x):
    return plognorm_pdf(params, x) if params.family == "pln" else gpareto_pdf(params, x)


def cdf(params, x):
    return plognorm_cdf(params, x) if params.family == "pln" else gpareto_cdf(params, x)


def quantile(params, prob):
    return plognorm_quantile(params, prob) if params.family == "pln" else gpareto_quantile(params, prob)


def rrmse(model_q, data_q) -> float:
    """sqrt(mean((model - data)^2) / sum(model^2)), the calibration objective."""
    model_q = np.asarray(model_q, dtype=float)
    data_q = np.asarray(data_q, dtype=float)
    if model_q.shape != data_q.shape or model_q.ndim != 1 or model_q.size == 0:
        raise ValueError("model and data quantiles must be equal-length nonempty vectors")
    denom = float(np.sum(model_q**2))
    if denom == 0.0:
        raise ValueError("model quantiles are all zero")
    return math.sqrt(float(np.mean((model_q - data_q) ** 2)) / denom)


# -- calibration ------------------------------------------------------------

@dataclass(frozen=True)
class CalibrationResult:
    params: object
    rrmse: float
    iterations: int
    converged: bool
    initial_rrmse: float = float("nan")

    @property
    def family(self) -> str:
        return self.params.family

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "params": self.params.to_dict(),
            "rrmse": self.rrmse,
            "iterations": self.iterations,
            "converged": self.converged,
            "initial_rrmse": self.initial_rrmse,
        }


def default_initial_guess(family: str, data: QuantileData):
    family = normalize_family(family)
    probs = np.asarray(data.probs)
    values = np.asarray(data.values)
    if family == "gp":
        q10 = float(np.interp(0.10, probs, values))
        q50 = float(np.interp(0.50, probs, values))
        return GeneralizedParetoParams(beta=5.0, mu=0.8 * q10, sigma=max(q50 - q10, 1e-6 * q50))
    # log-normal moment match: log q_p = nu + tau * z_p
    z = special.ndtri(probs)
    tau, nu = np.polyfit(z, np.log(values), 1)
    return ParetoLogNormalParams(alpha=2.0, nu=float(nu), tau=float(max(tau, 1e-3)))


def _pack(params) -> np.ndarray:
    if params.family == "pln":
        return np.array([math.log(params.alpha), params.nu, math.log(params.tau)])
    # mu is allowed to be 0; keep it off the log boundary
    return np.array([math.log(params.beta), math.log(max(params.mu, 1e-300)), math.log(params.sigma)])


def _unpack(family: str, theta: np.ndarray):
    if family == "pln":
        return ParetoLogNormalParams(math.exp(theta[0]), float(theta[1]), math.exp(theta[2]))
    return GeneralizedParetoParams(math.exp(theta[0]), math.exp(theta[1]), math.exp(theta[2]))


def calibrate(family: str, data: QuantileData, init=None, *, max_iters: int = 5000,
              xtol: float = 1e-8) -> CalibrationResult:
    """Fit ``family`` to quantile ``data`` by Nelder-Mead on log-parameters.

    ``converged`` is true when the simplex diameter in log-parameter space
    (i.e. relative in the original parameters) falls below ``xtol`` within
    ``max_iters`` iterations. The returned fit never has a larger RRMSE than
    ``init``.
    """
    family = normalize_family(family)
    if len(data) < 3:
        raise ValueError("calibration needs at least 3 quantile points")
    if init is None:
        init = default_initial_guess(family, data)
    if init.family != family:
        raise ValueError(f"initial parameters are for {init.family!r}, not {family!r}")
    probs = np.asarray(data.probs)
    target = np.asarray(data.values)

    def objective(theta):
        try:
            params = _unpack(family, theta)
            return rrmse(quantile(params, probs), target)
        except (ValueError, CalibrationError, OverflowError, ZeroDivisionError):
            return math.inf

    theta0 = _pack(init)
    f0 = objective(theta0)
    if not math.isfinite(f0):
        raise ValueError(f"initial parameters {init} give a non-finite objective")
    res = optimize.minimize(
        objective, theta0, method="Nelder-Mead",
        options={"maxiter": max_iters, "maxfev": 20 * max_iters, "xatol": xtol, "fatol": math.inf},
    )
    best_theta, best_f = (res.x, float(res.fun)) if res.fun <= f0 else (theta0, f0)
    return CalibrationResult(
        params=_unpack(family, best_theta),
        rrmse=best_f,
        iterations=int(res.nit),
        converged=bool(res.success),
        initial_rrmse=f0,
    )


class _QuantileFit(BaseEstimator):
    """Shared fit/predict plumbing for the two distribution families."""

    _family = ""

    def __init__(self, init=None, max_iters: int = 5000, xtol: float = 1e-8):
        self.init = init
        self.max_iters = max_iters
        self.xtol = xtol

    def fit(self, probs, quantiles=None):
        """Fit to quantile data: ``fit(QuantileData)`` or ``fit(probs, quantiles)``."""
        data = probs if isinstance(probs, QuantileData) else QuantileData(tuple(np.ravel(probs)), tuple(np.ravel(quantiles)))
        result = calibrate(self._family, data, self.init, max_iters=self.max_iters, xtol=self.xtol)
        self.result_ = result
        self.params_ = result.params
        self.rrmse_ = result.rrmse
        self.n_iter_ = result.iterations
        self.converged_ = result.converged
        return self

    def predict(self, probs):
        """Model quantiles at ``probs``."""
        check_is_fitted(self, "params_")
        return np.asarray(quantile(self.params_, np.asarray(probs, dtype=float)), dtype=float)

    def score(self, probs, quantiles):
        """Negative RRMSE so that larger is better."""
        return -rrmse(self.predict(probs), quantiles)

    def pdf(self, x):
        check_is_fitted(self, "params_")
        return pdf(self.params_, x)

    def cdf(self, x):
        check_is_fitted(self, "params_")
        return cdf(self.params_, x)


class ParetoLogNormalFit(_QuantileFit):
    _family = "pln"


class GeneralizedParetoFit(_QuantileFit):
    _family = "gp"
