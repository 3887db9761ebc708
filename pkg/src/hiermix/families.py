"""Per-observation log-likelihoods for the built-in outcome families,
hazard quadrature for general survival models, and the user-extension
hooks.

All functions broadcast over numpy arrays; the fitting engine calls
them with (rows, time, nodes)-shaped arrays, tests mostly with scalars.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, gammaln, log_ndtr

from .basis import RcsBasis, rcs_deriv, rcs_eval

__all__ = [
    "logl_gaussian",
    "logl_poisson",
    "logl_bernoulli",
    "logl_binomial",
    "logl_beta",
    "logl_negbin",
    "surv_logl",
    "hazard_quadrature_logl",
    "gauss_legendre",
    "rp_logl",
    "register_user_family",
    "user_family_hooks",
    "Family",
    "make_family",
    "INVERSE_LINKS",
]

_LOG_2PI = math.log(2.0 * math.pi)


def _check_counts(y, what: str, upper=None):
    y = np.asarray(y, dtype=float)
    if np.any(y != np.round(y)) or np.any(y < 0):
        raise ValueError(f"{what} responses must be non-negative integers")
    if upper is not None and np.any(y > upper):
        raise ValueError(f"{what} responses must not exceed {upper}")
    return y


def logl_gaussian(y, mu, sigma):
    """Non-positive sigma yields -inf rather than raising, so an
    optimizer probing a degenerate scale simply rejects the step.
    """
    sigma = np.asarray(sigma, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (np.asarray(y, dtype=float) - mu) / sigma
        out = -0.5 * _LOG_2PI - np.log(sigma) - 0.5 * z * z
    return np.where(sigma > 0, out, -np.inf)


def logl_poisson(y, mu):
    y = _check_counts(y, "poisson")
    return -np.asarray(mu, dtype=float) + y * np.log(mu) - gammaln(y + 1.0)


def logl_bernoulli(y, mu):
    y = _check_counts(y, "bernoulli", upper=1)
    mu = np.asarray(mu, dtype=float)
    with np.errstate(divide="ignore"):
        return y * np.log(mu) + (1.0 - y) * np.log1p(-mu)


def logl_binomial(y, mu, k):
    y = _check_counts(y, "binomial", upper=k)
    mu = np.asarray(mu, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = gammaln(k + 1.0) - gammaln(y + 1.0) - gammaln(k - y + 1.0) + y * np.log(mu) + (k - y) * np.log1p(-mu)
    return out


def logl_beta(y, mu, s):
    y = np.asarray(y, dtype=float)
    if np.any((y < 0) | (y > 1)):
        raise ValueError("beta responses must lie in [0, 1]")
    s = np.asarray(s, dtype=float)
    a = mu * s
    b = s - mu * s
    with np.errstate(divide="ignore", invalid="ignore"):
        out = gammaln(s) - gammaln(a) - gammaln(b) + (a - 1.0) * np.log(y) + (b - 1.0) * np.log1p(-y)
    return np.where(s > 0, out, -np.inf)


def logl_negbin(y, mu, alpha):
    """Mean-dispersion negative binomial: variance mu*(1+alpha*mu)."""
    y = _check_counts(y, "negative binomial")
    alpha = np.asarray(alpha, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        m = 1.0 / alpha
        logp = -np.log1p(alpha * np.asarray(mu, dtype=float))
        log1mp = np.log(alpha * mu) + logp
        out = gammaln(y + m) - gammaln(y + 1.0) - gammaln(m) + m * logp + y * log1mp
    return np.where(alpha > 0, out, -np.inf)


# ---------------------------------------------------------------------------
# Parametric survival: closed forms
# ---------------------------------------------------------------------------


def _gompertz_scaled_expm1(gamma, t):
    """(exp(gamma*t) - 1)/gamma with a series near gamma = 0."""
    gamma = np.asarray(gamma, dtype=float)
    t = np.asarray(t, dtype=float)
    small = np.abs(gamma) < 1e-5
    g = np.where(small, 1.0, gamma)  # avoid 0/0; the branch is discarded
    with np.errstate(over="ignore"):
        exact = np.expm1(g * t) / g
    gt = gamma * t
    series = t * (1.0 + gt / 2.0 + gt * gt / 6.0)
    return np.where(small, series, exact)


def _surv_log_hazard(name, t, eta, anc):
    t = np.asarray(t, dtype=float)
    if name == "exponential":
        return eta + np.zeros_like(t * np.ones_like(eta))
    if name == "weibull":
        return eta + np.log(anc) + (anc - 1.0) * np.log(t)
    if name == "gompertz":
        return eta + anc * t
    if name == "lognormal":
        z = (np.log(t) - eta) / anc
        log_pdf = -0.5 * _LOG_2PI - 0.5 * z * z - np.log(anc) - np.log(t)
        return log_pdf - log_ndtr(-z)
    if name == "loglogistic":
        log_u = (eta + np.log(t)) / anc
        with np.errstate(over="ignore"):
            return log_u - np.log(anc) - np.log(t) - np.log1p(np.exp(log_u))
    raise ValueError(f"no closed-form hazard for family {name!r}")


def _surv_cum_hazard(name, t, eta, anc):
    t = np.asarray(t, dtype=float)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        if name == "exponential":
            return np.exp(eta) * t
        if name == "weibull":
            return np.exp(eta) * t**anc
        if name == "gompertz":
            return np.exp(eta) * _gompertz_scaled_expm1(anc, t)
        if name == "lognormal":
            out = np.where(t > 0, -log_ndtr(-(np.log(np.maximum(t, 1e-300)) - eta) / anc), 0.0)
            return out
        if name == "loglogistic":
            return np.where(t > 0, np.log1p(np.exp((eta + np.log(np.maximum(t, 1e-300))) / anc)), 0.0)
    raise ValueError(f"no closed-form cumulative hazard for family {name!r}")


def surv_logl(y, d, family, eta, anc=None, t0=0.0):
    """Survival log-likelihood d*log h(y) - H(y) + H(t0) for a family
    with closed-form hazards. ``anc`` is the shape/scale on the natural
    scale (Weibull/Gompertz/log-logistic gamma, log-normal sigma).
    """
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValueError("survival times must be positive")
    t0 = np.asarray(t0, dtype=float)
    if np.any(t0 >= y):
        raise ValueError("entry times must precede event times")
    d = np.asarray(d, dtype=float)
    out = -_surv_cum_hazard(family, y, eta, anc)
    out = out + np.where(t0 > 0, _surv_cum_hazard(family, np.maximum(t0, 1e-300), eta, anc), 0.0)
    event = d != 0
    if np.any(event):
        out = out + np.where(event, d * _surv_log_hazard(family, y, eta, anc), 0.0)
    return out


def gauss_legendre(q: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on (-1, 1)."""
    if q < 1:
        raise ValueError("need at least one node")
    return np.polynomial.legendre.leggauss(q)


def hazard_quadrature_logl(y, d, log_hazard, t0=0.0, q_gl: int = 30):
    """d*log h(y) minus the Gauss-Legendre approximation of the
    cumulative hazard over (0, y], plus the entry-time correction over
    (0, t0]. ``log_hazard(t)`` must broadcast over an array of times.
    """
    y = float(y)
    if y <= 0:
        raise ValueError("survival time must be positive")
    if t0 >= y:
        raise ValueError("entry time must precede the event time")
    nodes, weights = gauss_legendre(q_gl)

    def cumhaz(upper: float) -> float:
        if upper <= 0:
            return 0.0
        t = 0.5 * upper * (nodes + 1.0)
        h = np.exp(np.asarray(log_hazard(t), dtype=float))
        if not np.all(np.isfinite(h)):
            raise ValueError("hazard is not finite at a quadrature node")
        return 0.5 * upper * float(weights @ h)

    out = -cumhaz(y) + cumhaz(t0)
    if d:
        lh = float(np.asarray(log_hazard(np.asarray([y])), dtype=float).ravel()[0])
        out += d * lh
    return out


# ---------------------------------------------------------------------------
# Spline-on-log-cumulative-hazard survival model
# ---------------------------------------------------------------------------


def rp_logl(
    y,
    d,
    basis: RcsBasis,
    coefs,
    eta,
    t0=0.0,
    bhaz=0.0,
    eta_plus=None,
    eta_minus=None,
    eta_entry=None,
    log_step=None,
):
    """Survival log-likelihood on the log cumulative-hazard scale:
    log H(y) = s(log y) + eta with s a restricted cubic spline.

    With a time-constant eta the hazard uses the analytic spline
    derivative. For a time-dependent eta, pass eta evaluated at
    y*exp(+/-log_step) via ``eta_plus``/``eta_minus`` (and at the entry
    time via ``eta_entry``); the log-time derivative is then a central
    difference. ``bhaz`` is an expected reference hazard added to the
    event hazard (zero when not modelling excess hazard).

    Returns -inf where the total hazard at an event time is
    non-positive, so an optimizer can reject the step.
    """
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValueError("survival times must be positive")
    d = np.asarray(d, dtype=float)
    t0 = np.asarray(t0, dtype=float)
    coefs = np.asarray(coefs, dtype=float)
    x = np.log(y)
    s_x = rcs_eval(basis, x) @ coefs
    log_H = s_x + eta
    with np.errstate(over="ignore"):
        H = np.exp(log_H)
    if eta_plus is not None:
        if log_step is None:
            raise ValueError("time-dependent eta needs the log_step used for eta_plus/eta_minus")
        h_ = np.asarray(log_step, dtype=float)
        f_plus = rcs_eval(basis, x + h_) @ coefs + eta_plus
        f_minus = rcs_eval(basis, x - h_) @ coefs + eta_minus
        dF = (f_plus - f_minus) / (2.0 * h_)
    else:
        dF = rcs_deriv(basis, x) @ coefs
    # hazard h(y) = H(y) * dF/dlog(y) / y
    with np.errstate(over="ignore", invalid="ignore"):
        hazard = H * dF / y
        total = hazard + bhaz
        event_term = np.where(total > 0, np.log(np.maximum(total, 1e-300)), -np.inf)
    out = np.where(d != 0, d * event_term, 0.0) - H
    entry_eta = eta if eta_entry is None else eta_entry
    if np.any(t0 > 0):
        s_t0 = rcs_eval(basis, np.log(np.where(t0 > 0, t0, 1.0))) @ coefs
        with np.errstate(over="ignore"):
            out = out + np.where(t0 > 0, np.exp(s_t0 + entry_eta), 0.0)
    return out


# ---------------------------------------------------------------------------
# User-defined families
# ---------------------------------------------------------------------------

_USER_FAMILIES: dict[str, dict] = {}


def register_user_family(name=None, loglf=None, hazard=None, cumhazard=None, n_anc: int = 0):
    """Register user hooks so ``family(user, ...)`` can resolve them.

    Exactly one of ``loglf`` or a hazard pairing must be given. Hooks
    receive an evaluation context (response, linear predictors of any
    outcome, ancillary slots, times); hazard hooks additionally receive
    the times at which the hazard is needed and must return the hazard
    itself. When only the cumulative hazard is supplied, the hazard is
    recovered by numerical differentiation. Returns the FamilySpec to
    embed in a model.
    """
    from .dsl import FamilySpec

    if loglf is not None and (hazard is not None or cumhazard is not None):
        raise ValueError("give either loglf or hazard/cumhazard hooks, not both")
    if loglf is None and hazard is None and cumhazard is None:
        raise ValueError("no hook given")
    hook = loglf or hazard or cumhazard
    name = name or getattr(hook, "__name__", None)
    if not name:
        raise ValueError("anonymous hooks need an explicit name")
    _USER_FAMILIES[name] = {
        "loglf": loglf,
        "hazard": hazard,
        "cumhazard": cumhazard,
        "n_anc": n_anc,
    }
    return FamilySpec(
        name="user",
        loglf=name if loglf else None,
        hazard=name if hazard else None,
        cumhazard=name if cumhazard and not hazard else None,
        n_anc=n_anc,
        failure=None,
    )


def user_family_hooks(name: str) -> dict:
    if name not in _USER_FAMILIES:
        raise KeyError(f"no user family registered under {name!r}")
    return _USER_FAMILIES[name]


# ---------------------------------------------------------------------------
# Engine-facing family objects
# ---------------------------------------------------------------------------


INVERSE_LINKS = {
    "identity": lambda eta: eta,
    "log": np.exp,
    "logit": expit,
}


@dataclass
class Family:
    """Evaluation flavour of one outcome family.

    ``anc_info`` lists (slot name, transform, report name) for the
    ancillary parameters on the estimation scale.
    """

    name: str
    link: str = "identity"
    anc_info: tuple = ()
    is_survival: bool = False
    is_null: bool = False
    k: int | None = None
    user_loglf: object = None
    user_hazard: object = None
    user_cumhazard: object = None

    @property
    def n_anc(self) -> int:
        return len(self.anc_info)

    def inverse_link(self, eta):
        return INVERSE_LINKS[self.link](eta)

    def natural_anc(self, anc_est: np.ndarray) -> list:
        out = []
        for (name, transform, _), v in zip(self.anc_info, anc_est):
            out.append(np.exp(v) if transform == "exp" else v)
        return out

    def validate_response(self, y: np.ndarray, label: str) -> None:
        try:
            if self.name == "poisson" or self.name == "negbinomial":
                _check_counts(y, self.name)
            elif self.name == "bernoulli":
                _check_counts(y, self.name, upper=1)
            elif self.name == "binomial":
                _check_counts(y, self.name, upper=self.k)
            elif self.name == "beta":
                if np.any((y < 0) | (y > 1)):
                    raise ValueError("beta responses must lie in [0, 1]")
        except ValueError as exc:
            raise ValueError(f"{label}: {exc}") from None

    def logl(self, y, eta, anc):
        """Log-likelihood for non-survival families given the linear
        predictor; ``anc`` on the natural scale.
        """
        mu = self.inverse_link(eta)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if self.name == "gaussian":
                return logl_gaussian(y, mu, anc[0])
            if self.name == "poisson":
                return -mu + y * eta - gammaln(y + 1.0)
            if self.name == "bernoulli":
                return logl_bernoulli(y, mu)
            if self.name == "binomial":
                return logl_binomial(y, mu, self.k)
            if self.name == "beta":
                return logl_beta(y, mu, anc[0])
            if self.name == "negbinomial":
                return logl_negbin(y, mu, anc[0])
        raise ValueError(f"family {self.name!r} has no direct log-likelihood")

    # survival pieces (closed forms, time-constant linear predictor)
    def log_hazard(self, t, eta, anc):
        return _surv_log_hazard(self.name, t, eta, anc[0] if anc else None)

    def cum_hazard(self, t, eta, anc):
        return _surv_cum_hazard(self.name, t, eta, anc[0] if anc else None)

    def base_log_hazard(self, t, anc):
        """log h(t) - eta for proportional-hazards families, used when a
        time-dependent linear predictor forces hazard quadrature.
        """
        t = np.asarray(t, dtype=float)
        if self.name == "exponential":
            return np.zeros_like(t)
        if self.name == "weibull":
            g = anc[0]
            return np.log(g) + (g - 1.0) * np.log(t)
        if self.name == "gompertz":
            return anc[0] * t
        raise ValueError(
            f"family {self.name!r} does not support a time-dependent linear predictor "
            "(no proportional-hazards decomposition)"
        )


_NO_TD = ("lognormal", "loglogistic")


def make_family(fam_spec) -> Family:
    """Build the evaluation object for a parsed family specification."""
    name = fam_spec.name
    if name == "gaussian":
        return Family(name, link="identity", anc_info=(("ln_sd", "exp", "sd(resid)"),))
    if name == "poisson":
        return Family(name, link="log")
    if name == "bernoulli":
        return Family(name, link="logit")
    if name == "binomial":
        return Family(name, link="logit", k=fam_spec.k)
    if name == "beta":
        return Family(name, link="logit", anc_info=(("ln_scale", "exp", "scale"),))
    if name == "negbinomial":
        return Family(name, link="log", anc_info=(("ln_alpha", "exp", "alpha"),))
    if name == "exponential":
        return Family(name, link="log", is_survival=True)
    if name == "weibull":
        return Family(name, link="log", is_survival=True, anc_info=(("ln_gamma", "exp", "gamma"),))
    if name == "gompertz":
        return Family(name, link="log", is_survival=True, anc_info=(("gamma", "identity", "gamma"),))
    if name == "lognormal":
        return Family(name, link="identity", is_survival=True, anc_info=(("ln_sd", "exp", "sd"),))
    if name == "loglogistic":
        return Family(name, link="log", is_survival=True, anc_info=(("ln_gamma", "exp", "gamma"),))
    if name == "rp":
        return Family(name, link="log", is_survival=True)
    if name == "null":
        return Family(name, is_null=True)
    if name == "user":
        hooks = user_family_hooks(fam_spec.loglf or fam_spec.hazard or fam_spec.cumhazard)
        n_anc = fam_spec.n_anc or hooks["n_anc"]
        fam = Family(
            name,
            link="identity",
            is_survival=fam_spec.is_survival,
            anc_info=tuple((f"anc{j + 1}", "identity", f"anc{j + 1}") for j in range(n_anc)),
        )
        fam.user_loglf = hooks["loglf"]
        fam.user_hazard = hooks["hazard"]
        fam.user_cumhazard = hooks["cumhazard"]
        return fam
    raise ValueError(f"unknown family {name!r}")
