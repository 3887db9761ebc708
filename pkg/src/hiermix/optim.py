"""Newton-Raphson maximization of the marginal log-likelihood with
finite-difference score and Hessian, starting values, and the reported
fit results (estimates, delta-method standard errors, diagnostics).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "FitError",
    "SingularDesignError",
    "fd_gradient",
    "fd_hessian",
    "maximize",
    "MaxResult",
    "initial_values",
    "FitResult",
    "build_fit_result",
]

_EPS = np.finfo(float).eps
_GRAD_STEP = _EPS ** (1.0 / 3.0)
_HESS_STEP = _EPS**0.25
_Z95 = 1.959963984540054


class FitError(RuntimeError):
    pass


class SingularDesignError(FitError):
    pass


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def _probe(objective, theta, i, delta, shrinks=8):
    """Objective at theta with one entry perturbed, halving the step on
    a non-finite value up to ``shrinks`` times. Returns (value, step).
    """
    step = delta
    for _ in range(shrinks + 1):
        x = theta.copy()
        x[i] += step
        v = objective(x)
        if np.isfinite(v):
            return v, step
        step *= 0.5
    raise FitError(f"objective is not finite near parameter {i} (step {delta:g})")


def fd_gradient(objective, theta, pool=None) -> np.ndarray:
    """Central-difference gradient, step cbrt(eps)*max(|theta_i|, 1)."""
    theta = np.asarray(theta, dtype=float)
    p = len(theta)

    def one(i):
        h = _GRAD_STEP * max(abs(theta[i]), 1.0)
        up, hu = _probe(objective, theta, i, h)
        dn, hd = _probe(objective, theta, i, -h)
        if hu != -hd:  # a side had to shrink: recompute the other to match
            h = min(hu, -hd)
            up, _ = _probe(objective, theta, i, h, 0)
            dn, _ = _probe(objective, theta, i, -h, 0)
        else:
            h = hu
        return (up - dn) / (2.0 * h)

    if pool is not None:
        return np.asarray(list(pool.map(one, range(p))))
    return np.asarray([one(i) for i in range(p)])


class _NonFiniteProbe(Exception):
    pass


def fd_hessian(objective, theta, f0=None, pool=None) -> np.ndarray:
    """Hessian from central differences of the central-difference
    gradient (the four-point cross formula), symmetrized. A non-finite
    probe halves every step and retries before giving up.
    """
    theta = np.asarray(theta, dtype=float)
    if f0 is None:
        f0 = objective(theta)
    scale = 1.0
    for _ in range(6):
        try:
            return _fd_hessian_once(objective, theta, f0, pool, scale)
        except _NonFiniteProbe:
            scale *= 0.5
    raise FitError("objective is not finite near the Hessian probe points")


def _fd_hessian_once(objective, theta, f0, pool, scale) -> np.ndarray:
    p = len(theta)
    h = scale * _HESS_STEP * np.maximum(np.abs(theta), 1.0)

    def shifted(pairs):
        x = theta.copy()
        for i, s in pairs:
            x[i] += s
        v = objective(x)
        if not np.isfinite(v):
            raise _NonFiniteProbe
        return v

    jobs = []
    for i in range(p):
        jobs.append(((i, 2 * h[i]),))
        jobs.append(((i, -2 * h[i]),))
    for i in range(p):
        for j in range(i):
            jobs.append(((i, h[i]), (j, h[j])))
            jobs.append(((i, h[i]), (j, -h[j])))
            jobs.append(((i, -h[i]), (j, h[j])))
            jobs.append(((i, -h[i]), (j, -h[j])))
    vals = list(pool.map(shifted, jobs)) if pool is not None else [shifted(job) for job in jobs]
    hess = np.empty((p, p))
    pos = 0
    for i in range(p):
        up, dn = vals[pos], vals[pos + 1]
        pos += 2
        hess[i, i] = (up - 2.0 * f0 + dn) / (4.0 * h[i] * h[i])
    for i in range(p):
        for j in range(i):
            fpp, fpm, fmp, fmm = vals[pos : pos + 4]
            pos += 4
            hess[i, j] = hess[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j])
    return 0.5 * (hess + hess.T)


# ---------------------------------------------------------------------------
# Newton-Raphson
# ---------------------------------------------------------------------------


@dataclass
class MaxResult:
    theta: np.ndarray
    logl: float
    grad: np.ndarray
    hessian: np.ndarray
    iterations: int
    converged: bool
    message: str
    optimum_verified: bool
    trace: list = field(default_factory=list)  # (iteration, logl, max scaled grad, halvings)


def _neg_chol(hess, free):
    """Cholesky of the negated free-block Hessian, Levenberg-regularized
    until positive definite. Returns (chol, tau used).
    """
    b = -hess[np.ix_(free, free)]
    tau = 0.0
    eye = np.eye(b.shape[0])
    for _ in range(80):
        try:
            return np.linalg.cholesky(b + tau * eye), tau
        except np.linalg.LinAlgError:
            tau = 1e-8 if tau == 0.0 else 2.0 * tau
    raise FitError("cannot regularize the Hessian to a definite matrix")


def maximize(
    objective,
    theta0,
    refresh=None,
    max_iter: int = 300,
    logl_tol: float = 1e-7,
    grad_tol: float = 1e-5,
    max_halvings: int = 16,
    free_mask=None,
    clamp=None,
    monitor=None,
    pool=None,
) -> MaxResult:
    """Maximize by Newton steps with step halving.

    ``refresh`` (e.g. quadrature re-adaptation) runs once per iteration,
    not per objective call, keeping the objective smooth within one
    iteration. Convergence needs the relative objective change below
    ``logl_tol`` and max_i |g_i|*max(|theta_i|, 1) below ``grad_tol``;
    the final Hessian must additionally be negative definite for the
    optimum to be flagged as verified.
    """
    theta = np.asarray(theta0, dtype=float).copy()
    p = len(theta)
    free = np.ones(p, dtype=bool) if free_mask is None else np.asarray(free_mask, dtype=bool)
    if clamp is not None:
        theta = clamp(theta)
    if refresh is not None:
        refresh(theta)
    f = objective(theta)
    if not np.isfinite(f):
        raise FitError("objective is not finite at the starting values")
    trace = []
    rel_change = np.inf
    converged = False
    message = "maximum iterations reached"
    it = 0
    grad = np.zeros(p)
    for it in range(1, max_iter + 1):
        grad = fd_gradient(objective, theta, pool=pool)
        scaled = np.max(np.abs(grad[free]) * np.maximum(np.abs(theta[free]), 1.0)) if free.any() else 0.0
        if rel_change < logl_tol and scaled < grad_tol:
            converged = True
            message = "converged"
            break
        hess = fd_hessian(objective, theta, f0=f, pool=pool)
        chol, tau = _neg_chol(hess, free)
        step_free = np.linalg.solve(chol.T, np.linalg.solve(chol, grad[free]))
        step = np.zeros(p)
        step[free] = step_free
        halvings = 0
        alpha = 1.0
        f_new, theta_new = None, None
        while halvings <= max_halvings:
            cand = theta + alpha * step
            if clamp is not None:
                cand = clamp(cand)
            val = objective(cand)
            if np.isfinite(val) and val > f:
                f_new, theta_new = val, cand
                break
            alpha *= 0.5
            halvings += 1
        if f_new is None:
            if scaled < grad_tol:
                converged = True
                message = "converged (no ascent step at a stationary point)"
            else:
                message = "no ascent step found"
            break
        rel_change = abs(f_new - f) / max(abs(f_new), 1.0)
        theta = theta_new
        if refresh is not None:
            refresh(theta)
            f = objective(theta)
        else:
            f = f_new
        trace.append((it, f, scaled, halvings))
        if monitor is not None:
            monitor(it, f, scaled, halvings)
    grad = fd_gradient(objective, theta, pool=pool)
    hess = fd_hessian(objective, theta, f0=f, pool=pool)
    verified = True
    try:
        np.linalg.cholesky(-hess[np.ix_(free, free)])
    except np.linalg.LinAlgError:
        verified = False
    if converged and not verified:
        message = "converged (optimum not verified: information matrix not positive definite)"
    return MaxResult(
        theta=theta,
        logl=f,
        grad=grad,
        hessian=hess,
        iterations=it,
        converged=converged,
        message=message,
        optimum_verified=verified,
        trace=trace,
    )


# ---------------------------------------------------------------------------
# Starting values
# ---------------------------------------------------------------------------


def _glm_irls(x, y, link: str, max_iter: int = 25):
    """Small iteratively reweighted least squares for the log/logit/identity
    links, enough for starting values.
    """
    n, p = x.shape
    beta = np.zeros(p)
    if link == "identity":
        beta, *_ = np.linalg.lstsq(x, y, rcond=None)
        return beta
    mu = np.clip((y + np.mean(y)) / 2.0, 1e-3, None)
    if link == "logit":
        mu = np.clip(mu, 1e-3, 1.0 - 1e-3)
    eta = np.log(mu) if link == "log" else np.log(mu / (1.0 - mu))
    for _ in range(max_iter):
        if link == "log":
            mu = np.exp(eta)
            dmu = mu
        else:
            mu = 1.0 / (1.0 + np.exp(-eta))
            dmu = mu * (1.0 - mu)
        dmu = np.maximum(dmu, 1e-10)
        z = eta + (y - mu) / dmu
        w = dmu  # canonical links: weight = dmu/deta
        wx = x * w[:, None]
        try:
            beta_new = np.linalg.solve(x.T @ wx, wx.T @ z)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(beta_new)):
            break
        if np.max(np.abs(beta_new - beta)) < 1e-8:
            beta = beta_new
            break
        beta = beta_new
        eta = x @ beta
    return beta


def _initial_design(program, co):
    """Design columns for components free of latent effects and
    expected-value links, plus the intercept; returns (matrix, slot
    indices, column names).
    """
    cols, slots, names = [], [], []
    n = co.view.n
    for cc in co.components:
        if cc.slots is None or cc.latents or cc.evlinks:
            continue
        base = cc.cov_product(program.frame, co.view.rows)
        base = np.ones(n) if base is None else base[:, 0, 0]
        if cc.timefn is not None:
            if co.times is None:
                continue
            el, basis, log_scale = cc.timefn
            t = co.view.times.reshape(-1, 1)
            b = program.basis_at(basis, t, log_scale)[:, 0, :]
            for j, slot in enumerate(cc.slots):
                cols.append(base * b[:, j])
                slots.append(slot)
                names.append(program.slots[slot].name)
        else:
            cols.append(base)
            slots.append(cc.slots[0])
            names.append(program.slots[cc.slots[0]].name)
    if co.cons_slot is not None:
        cols.append(np.ones(n))
        slots.append(co.cons_slot)
        names.append(program.slots[co.cons_slot].name)
    if not cols:
        return None, [], []
    return np.column_stack(cols), slots, names


def initial_values(program) -> np.ndarray:
    """Starting values: outcome-wise fits ignoring the random effects
    (least squares / IRLS for the standard families, moment fits for the
    survival ancillaries), log-sd of every latent effect at log(0.5),
    cross terms and association coefficients at zero.
    """
    theta = np.zeros(program.n_params)
    for co in program.outcomes:
        fam = co.family
        if fam.is_null or co.rows.size == 0:
            continue
        if fam.is_survival:
            y = co.view.response
            d = co.view.event
            t0 = co.view.entry
            exposure = float(np.sum(y - t0))
            events = float(np.sum(d))
            base_rate = math.log(max(events, 0.5) / max(exposure, 1e-12))
            if fam.name == "lognormal":
                ly = np.log(y)
                if co.cons_slot is not None:
                    theta[co.cons_slot] = float(np.mean(ly))
                theta[co.anc_slots[0]] = math.log(max(float(np.std(ly)), 1e-3))
            elif fam.name == "loglogistic":
                if co.cons_slot is not None:
                    theta[co.cons_slot] = -math.log(max(float(np.median(y)), 1e-12))
            elif co.spec.family.name == "rp":
                theta[co.spline_slots[0]] = 1.0
                if co.cons_slot is not None:
                    theta[co.cons_slot] = base_rate
            else:
                if co.cons_slot is not None:
                    theta[co.cons_slot] = base_rate
            continue
        if fam.user_loglf is not None:
            x, slots, names = _initial_design(program, co)
            if x is not None:
                _check_design(x, names, co.label)
                beta = _glm_irls(x, co.view.response, "identity")
                theta[slots] = beta
            continue
        x, slots, names = _initial_design(program, co)
        if x is None:
            continue
        _check_design(x, names, co.label)
        y = co.view.response
        beta = _glm_irls(x, y, fam.link)
        theta[slots] = beta
        if fam.name == "gaussian":
            resid = y - x @ beta
            sigma = max(float(np.sqrt(np.mean(resid**2))), 1e-6)
            theta[co.anc_slots[0]] = math.log(sigma)
        elif fam.name == "beta":
            mbar = float(np.clip(np.mean(y), 1e-3, 1 - 1e-3))
            var = max(float(np.var(y)), 1e-6)
            s = max(mbar * (1.0 - mbar) / var - 1.0, 0.1)
            theta[co.anc_slots[0]] = math.log(s)
        elif fam.name == "negbinomial":
            mbar = max(float(np.mean(y)), 1e-6)
            var = float(np.var(y))
            alpha = max((var - mbar) / mbar**2, 0.01)
            theta[co.anc_slots[0]] = math.log(alpha)
    for co in program.outcomes:
        for cc in co.components:
            # a null-family target starts with an all-zero predictor, so a
            # zero association coefficient would sit on a stationary ray
            if cc.slots and cc.evlinks and all(program.outcomes[j].family.is_null for _, j in cc.evlinks):
                theta[cc.slots] = 1.0
    for li in program.levels:
        for j, slot in enumerate(li.re_slots):
            theta[slot] = math.log(0.5) if j < li.dim else 0.0
    return theta


def _check_design(x, names, label):
    variances = x.var(axis=0) + np.abs(x.mean(axis=0))
    dead = [names[j] for j in np.flatnonzero(variances < 1e-12)]
    if dead:
        raise SingularDesignError(f"outcome {label}: column(s) {', '.join(dead)} are identically zero")
    rank = np.linalg.matrix_rank(x)
    if rank < x.shape[1]:
        raise SingularDesignError(
            f"outcome {label}: design of ({', '.join(names)}) is rank deficient ({rank} < {x.shape[1]})"
        )


# ---------------------------------------------------------------------------
# Reported results
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    names: list[str]
    transforms: list[str]  # per-slot reporting transform tag
    theta: np.ndarray  # estimation scale
    cov: np.ndarray  # estimation scale
    logl: float
    converged: bool
    optimum_verified: bool
    iterations: int
    message: str
    grad_norm: float
    table: list[dict]  # reporting rows, natural scale where transformed
    trace: list
    settings: dict
    knots: dict
    profile: dict

    def estimate(self, name: str) -> float:
        for row in self.table:
            if row["name"] == name:
                return row["estimate"]
        raise KeyError(name)

    def se(self, name: str) -> float:
        for row in self.table:
            if row["name"] == name:
                return row["se"]
        raise KeyError(name)

    def summary(self) -> str:
        lines = [f"log-likelihood {self.logl:.6f} after {self.iterations} iterations ({self.message})"]
        width = max(len(r["name"]) for r in self.table) if self.table else 4
        lines.append(f"{'parameter':<{width}}  {'estimate':>12}  {'std.err':>12}  {'[95% conf':>12}  {'interval]':>12}")
        for r in self.table:
            se = "" if r["se"] is None else f"{r['se']:12.6g}"
            lo = "" if r["lo"] is None else f"{r['lo']:12.6g}"
            hi = "" if r["hi"] is None else f"{r['hi']:12.6g}"
            lines.append(f"{r['name']:<{width}}  {r['estimate']:12.6g}  {se:>12}  {lo:>12}  {hi:>12}")
        return "\n".join(lines)


def build_fit_result(program, plan, maxres: MaxResult, evaluator) -> FitResult:
    from .integrate import ReKernel

    theta = maxres.theta
    p = len(theta)
    neg = -maxres.hessian
    try:
        cov = np.linalg.inv(neg)
        cov = 0.5 * (cov + cov.T)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(neg)
        cov = 0.5 * (cov + cov.T)
    def safe_exp(x: float) -> float:
        return math.exp(min(x, 700.0))

    table = []
    for i, slot in enumerate(program.slots):
        est = theta[i]
        var = cov[i, i]
        se = math.sqrt(var) if var > 0 else None
        if slot.transform == "exp":
            nat = safe_exp(est)
            row = {
                "name": slot.report,
                "estimate": nat,
                "se": None if se is None else nat * se,  # delta method
                "lo": None if se is None else safe_exp(est - _Z95 * se),
                "hi": None if se is None else safe_exp(est + _Z95 * se),
                "scale": "exp",
            }
        else:
            row = {
                "name": slot.report,
                "estimate": est,
                "se": se,
                "lo": None if se is None else est - _Z95 * se,
                "hi": None if se is None else est + _Z95 * se,
                "scale": "identity",
            }
        table.append(row)
    # derived standard deviations and correlations for unstructured levels
    if program.spec.covariance == "unstructured":
        for li in program.levels:
            if li.dim < 2:
                continue
            kernel = ReKernel(li.dim, structure="unstructured")
            block_idx = np.asarray(li.re_slots)
            block = theta[block_idx]
            cov_block = cov[np.ix_(block_idx, block_idx)]

            def derived(b):
                chol = kernel.build_chol(b)
                sig = chol @ chol.T
                sds = np.sqrt(np.diag(sig))
                out = list(sds)
                for i in range(1, li.dim):
                    for j in range(i):
                        out.append(sig[i, j] / (sds[i] * sds[j]))
                return np.asarray(out)

            vals = derived(block)
            jac = np.empty((len(vals), len(block)))
            for j in range(len(block)):
                hstep = 1e-6 * max(1.0, abs(block[j]))
                bp, bm = block.copy(), block.copy()
                bp[j] += hstep
                bm[j] -= hstep
                jac[:, j] = (derived(bp) - derived(bm)) / (2.0 * hstep)
            dvar = np.diag(jac @ cov_block @ jac.T)
            names = [f"sd({nm})" for nm in li.latent_names]
            for i in range(1, li.dim):
                for j in range(i):
                    names.append(f"corr({li.latent_names[i]},{li.latent_names[j]})")
            for name, val, var in zip(names, vals, dvar):
                se = math.sqrt(var) if var > 0 else None
                table.append(
                    {
                        "name": name,
                        "estimate": float(val),
                        "se": se,
                        "lo": None if se is None else float(val) - _Z95 * se,
                        "hi": None if se is None else float(val) + _Z95 * se,
                        "scale": "derived",
                    }
                )
    settings = {name: lp.describe() for name, lp in plan.levels.items()}
    return FitResult(
        names=program.slot_names(),
        transforms=[s.transform for s in program.slots],
        theta=theta.copy(),
        cov=cov,
        logl=maxres.logl,
        converged=maxres.converged,
        optimum_verified=maxres.optimum_verified,
        iterations=maxres.iterations,
        message=maxres.message,
        grad_norm=float(np.max(np.abs(maxres.grad))),
        table=table,
        trace=maxres.trace,
        settings=settings,
        knots={k: list(v) for k, v in program.knots.items()},
        profile=evaluator.profile_report() if evaluator is not None else {},
    )
