"""Marginal log-likelihood over the cluster hierarchy.

Random effects are integrated level by level, inner levels conditional
on outer node values, with a per-level choice of adaptive Gauss-Hermite
quadrature or quasi-Monte Carlo draws from a normal or multivariate-t
kernel. Models with a single latent level run on a fully vectorized
path; deeper hierarchies recurse per unit.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .integrate import GhRule, HaltonSet, ReKernel, adapt_locations, gh_grid, gh_rule, halton, kernel_draws
from .predictor import EvalContext, OutcomeView, Program, outcome_logl

__all__ = [
    "LevelPlan",
    "IntegrationPlan",
    "default_plan",
    "LikelihoodEvaluator",
    "marginal_logl",
    "mci_logl",
    "profile_report",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class LevelPlan:
    method: str = "aghq"  # "aghq" | "qmc"
    q: int = 7
    m: int = 0
    dist: str = "normal"
    df: int | None = None
    adaptive: bool = True

    def describe(self) -> str:
        kern = self.dist if self.dist == "normal" else f"t({self.df})"
        if self.method == "aghq":
            mode = "adaptive" if self.adaptive else "non-adaptive"
            return f"aghq points {self.q} ({mode}) kernel {kern}"
        return f"qmc draws {self.m} kernel {kern}"


@dataclass
class IntegrationPlan:
    levels: dict[str, LevelPlan] = field(default_factory=dict)
    skip: int = 15

    def validate(self, program: Program) -> None:
        needed = [li.name for li in program.levels if li.dim > 0]
        missing = [n for n in needed if n not in self.levels]
        extra = [n for n in self.levels if n not in needed]
        if missing or extra:
            raise ValueError(f"integration plan must cover exactly {needed}; missing {missing}, extra {extra}")
        for name in needed:
            lp = self.levels[name]
            dim = program.level(name).dim
            if lp.method not in ("aghq", "qmc"):
                raise ValueError(f"level {name!r}: unknown method {lp.method!r}")
            if lp.dist == "t":
                if lp.df is None or lp.df < 1:
                    raise ValueError(f"level {name!r}: t kernel needs a positive df")
                if lp.method == "aghq" and dim > 2:
                    raise ValueError(
                        f"level {name!r}: the reweighted quadrature path for t kernels is limited to 2 "
                        f"random effects (level has {dim}); use qmc"
                    )
                if lp.method == "aghq" and lp.df <= 2:
                    raise ValueError(f"level {name!r}: quadrature with a t kernel needs df > 2")
            if lp.method == "aghq" and lp.q < 1:
                raise ValueError(f"level {name!r}: need at least one quadrature point")
            if lp.method == "qmc" and lp.m < 1:
                raise ValueError(f"level {name!r}: need at least one draw")


def default_plan(
    program: Program,
    points: int | dict = 7,
    draws: int | dict | None = None,
    method: str | dict | None = None,
    redistribution: str | dict | None = None,
    t_df: int | dict | None = None,
    adaptive: bool = True,
    skip: int = 15,
) -> IntegrationPlan:
    """Per-level defaults: adaptive quadrature with 7 points for normal
    kernels, quasi-Monte Carlo with 150 draws per dimension for t
    kernels. Every argument takes a single value or a per-level dict.
    """

    def per_level(value, name, fallback):
        if isinstance(value, dict):
            return value.get(name, fallback)
        return fallback if value is None else value

    spec = program.spec
    plan = IntegrationPlan(skip=skip)
    for li in program.levels:
        if li.dim == 0:
            continue
        dist = per_level(redistribution, li.name, spec.re_distribution)
        df = per_level(t_df, li.name, spec.t_df)
        meth = per_level(method, li.name, "qmc" if dist == "t" else "aghq")
        q = per_level(points, li.name, 7)
        m = per_level(draws, li.name, 0) or 150 * li.dim
        plan.levels[li.name] = LevelPlan(method=meth, q=q, m=m, dist=dist, df=df, adaptive=adaptive)
    plan.validate(program)
    return plan


# ---------------------------------------------------------------------------
# Evaluator
# ---------------------------------------------------------------------------


class _LevelState:
    """Frozen integration inputs for one latent level."""

    def __init__(self, info, plan: LevelPlan, skip: int, structure: str):
        self.info = info
        self.plan = plan
        self.kernel = ReKernel(info.dim, plan.dist, plan.df, structure=structure)
        if plan.method == "aghq":
            self.rule: GhRule = gh_rule(plan.q)
            self.nodes, self.logw = gh_grid(self.rule, info.dim)
            self.m = len(self.logw)
            self.uniforms: HaltonSet | None = None
            self.log_std = -0.5 * info.dim * _LOG_2PI - 0.5 * (self.nodes * self.nodes).sum(axis=1)
        else:
            need = info.dim + (1 if plan.dist == "t" else 0)
            self.uniforms = halton(plan.m, need, skip)
            self.m = plan.m
            self.nodes = None
            self.logw = None
            self.log_std = None


class LikelihoodEvaluator:
    """Compiled program plus frozen rules/draws and per-cluster adaptive
    transforms. Transforms are refreshed once per outer optimizer
    iteration, keeping the objective smooth between refreshes.
    """

    def __init__(self, program: Program, plan: IntegrationPlan):
        plan.validate(program)
        self.program = program
        self.plan = plan
        structure = program.spec.covariance
        self.level_states: list[_LevelState] = [
            _LevelState(li, plan.levels[li.name], plan.skip, structure) for li in program.levels if li.dim > 0
        ]
        self._prepare_segments()
        self.adapt_store: dict = {}
        self.adapt_iters: dict = {}
        self.adapt_flags: list = []
        self.n_calls = 0
        self.cond_evals = 0
        self.wall_time = 0.0

    # -- structural precomputation ------------------------------------

    def _prepare_segments(self) -> None:
        program = self.program
        h = program.hierarchy
        self.inner: _LevelState | None = self.level_states[-1] if self.level_states else None
        if self.inner is None:
            return
        inner_name = self.inner.info.name
        n_units = h.n_units(self.inner.info.lidx)
        self.n_inner_units = n_units
        self.segments: list = []  # per outcome: (reduceat starts, unit ordinal per segment)
        self.unit_views: list = []  # per outcome: dict unit ordinal -> OutcomeView
        has_rows = np.zeros(n_units, dtype=bool)
        for co in program.outcomes:
            if co.rows.size == 0:
                self.segments.append(None)
                self.unit_views.append({})
                continue
            ordinals = program.unit_index[inner_name][co.rows]
            starts = np.concatenate(([0], np.flatnonzero(np.diff(ordinals) != 0) + 1))
            stops = np.concatenate((starts[1:], [len(ordinals)]))
            seg_units = ordinals[starts]
            self.segments.append((starts, seg_units))
            views = {}
            for s, e, u in zip(starts, stops, seg_units):
                views[int(u)] = OutcomeView(co, slice(int(s), int(e)))
            self.unit_views.append(views)
            has_rows[seg_units] = True
        self.has_rows_mask = has_rows
        self.active_units = np.flatnonzero(has_rows)
        # children of each unit one integration level up, composed through
        # intermediate hierarchy levels that carry no latent effects
        self.children: list[list[np.ndarray]] = []
        for pos in range(1, len(self.level_states)):
            hi, lo = self.level_states[pos - 1].info.lidx, self.level_states[pos].info.lidx
            up = np.arange(h.n_units(lo))
            lvl = lo
            while lvl > hi:
                up = h.parent[lvl][up]
                lvl -= 1
            groups: list[list[int]] = [[] for _ in range(h.n_units(hi))]
            for child, par in enumerate(up):
                groups[par].append(child)
            self.children.append([np.asarray(g, dtype=int) for g in groups])
        # which units have any rows anywhere in their subtree
        self.subtree_rows: list[np.ndarray] = [None] * len(self.level_states)
        self.subtree_rows[-1] = has_rows
        for pos in range(len(self.level_states) - 2, -1, -1):
            mask = np.zeros(h.n_units(self.level_states[pos].info.lidx), dtype=bool)
            for par, kids in enumerate(self.children[pos]):
                mask[par] = bool(np.any(self.subtree_rows[pos + 1][kids])) if kids.size else False
            self.subtree_rows[pos] = mask

    def _n_units_at(self, st: _LevelState) -> int:
        return self.program.hierarchy.n_units(st.info.lidx)

    def level_chol(self, st: _LevelState, theta: np.ndarray) -> np.ndarray:
        return st.kernel.build_chol(theta[st.info.re_slots])

    # -- conditional log-likelihood of rows, grouped by inner unit ------

    def _unit_matrix(self, theta, latent_values: dict, b: int) -> np.ndarray:
        """Sum of conditional row log-likelihoods per inner-level unit,
        over all outcomes: (n_inner_units, b).
        """
        program = self.program
        ctx = EvalContext(program, theta, latent_values)
        out = np.zeros((self.n_inner_units, b))
        for k, co in enumerate(program.outcomes):
            if self.segments[k] is None:
                continue
            ll = outcome_logl(ctx, k)
            ll = np.where(np.isnan(ll), -np.inf, ll)
            starts, seg_units = self.segments[k]
            sums = np.add.reduceat(np.broadcast_to(ll, (ll.shape[0], b)), starts, axis=0)
            out[seg_units] += sums
        self.cond_evals += len(self.active_units) * b
        return out

    def _single_unit_vector(self, theta, latent_values: dict, b: int, unit: int) -> np.ndarray:
        """Conditional log-likelihood of one inner unit's rows: (b,)."""
        ctx = EvalContext(self.program, theta, latent_values)
        out = np.zeros(b)
        for k in range(len(self.program.outcomes)):
            view = self.unit_views[k].get(unit)
            if view is None:
                continue
            ll = outcome_logl(ctx, k, view)
            ll = np.where(np.isnan(ll), -np.inf, ll)
            out += np.broadcast_to(ll, (view.n, b)).sum(axis=0)
        self.cond_evals += b
        return out

    # -- public entry points --------------------------------------------

    def refresh(self, theta: np.ndarray) -> None:
        """Recompute the per-cluster adaptive transforms at theta."""
        theta = np.asarray(theta, dtype=float)
        self.adapt_store.clear()
        self.adapt_iters.clear()
        self.adapt_flags = []
        if not self.level_states:
            return
        if len(self.level_states) == 1:
            st = self.level_states[0]
            if st.plan.method == "aghq" and st.plan.adaptive:
                self._refresh_two_level(theta)
            return
        if any(st.plan.method == "aghq" and st.plan.adaptive for st in self.level_states):
            self._nested_total(theta, refresh=True)

    def logl(self, theta: np.ndarray) -> float:
        theta = np.asarray(theta, dtype=float)
        t_start = time.perf_counter()
        self.n_calls += 1
        try:
            if not self.level_states:
                ctx = EvalContext(self.program, theta, {})
                total = 0.0
                for k, co in enumerate(self.program.outcomes):
                    if co.rows.size == 0:
                        continue
                    ll = outcome_logl(ctx, k)
                    self.cond_evals += 1
                    if not np.all(np.isfinite(ll)):
                        return -np.inf
                    total += math.fsum(ll[:, 0].tolist())
                return total
            if len(self.level_states) == 1:
                return self._logl_two_level(theta)
            return self._nested_total(theta, refresh=False)
        finally:
            self.wall_time += time.perf_counter() - t_start

    # -- single latent level: vectorized across units --------------------

    def _node_values(self, st: _LevelState, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Node locations (U, M, r) and log-corrections (U, M) such that
        a unit's marginal is logsumexp(corr + conditional).
        """
        u = self.n_inner_units
        chol = self.level_chol(st, theta)
        r = st.info.dim
        if st.plan.method == "qmc":
            draws = kernel_draws(st.kernel, st.uniforms, chol)  # (M, r)
            x = np.broadcast_to(draws[None], (u, st.m, r))
            corr = np.full((u, st.m), -math.log(st.m))
            return x, corr
        a, logw = st.nodes, st.logw
        if st.plan.adaptive and self.adapt_store:
            mu = self.adapt_store[("mu", 0)]
            lam = self.adapt_store[("lam", 0)]
            x = mu[:, None, :] + np.einsum("mr,usr->ums", a, lam)
            logdet = np.log(np.diagonal(lam, axis1=1, axis2=2)).sum(axis=1)
            corr = logw[None] + st.kernel.log_density(x, chol) - st.log_std[None] + logdet[:, None]
            return x, corr
        x = np.broadcast_to((a @ chol.T)[None], (u, st.m, r))
        if st.plan.dist == "normal":
            corr = np.broadcast_to(logw[None], (u, st.m))
        else:
            logdet = float(np.log(np.diag(chol)).sum())
            corr = logw[None] + st.kernel.log_density(x, chol) - st.log_std[None] + logdet
        return x, corr

    def _logl_two_level(self, theta: np.ndarray) -> float:
        st = self.level_states[0]
        if st.plan.method == "aghq" and st.plan.adaptive and not self.adapt_store:
            self.refresh(theta)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            x, corr = self._node_values(st, theta)
            vals = {name: x[:, :, j] for j, name in enumerate(st.info.latent_names)}
            ll = self._unit_matrix(theta, vals, st.m)
            per_unit = logsumexp(corr + ll, axis=1)
        act = per_unit[self.active_units]
        if not np.all(np.isfinite(act)):
            return -np.inf
        return math.fsum(act.tolist())

    def _refresh_two_level(self, theta: np.ndarray) -> None:
        st = self.level_states[0]
        u, r, mg = self.n_inner_units, st.info.dim, st.m
        chol = self.level_chol(st, theta)
        a, logw = st.nodes, st.logw
        mu = np.zeros((u, r))
        lam = np.broadcast_to(chol[None], (u, r, r)).copy()
        iters = np.zeros(u, dtype=int)
        flagged = np.zeros(u, dtype=bool)
        active = self.has_rows_mask.copy()
        for _ in range(20):
            if not np.any(active):
                break
            x = mu[:, None, :] + np.einsum("mr,usr->ums", a, lam)
            vals = {name: x[:, :, j] for j, name in enumerate(st.info.latent_names)}
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                ll = self._unit_matrix(theta, vals, mg)
                logpost = logw[None] + ll + st.kernel.log_density(x, chol) - st.log_std[None]
            finite_top = np.max(np.where(np.isfinite(logpost), logpost, -np.inf), axis=1)
            bad = ~np.isfinite(finite_top)
            w = np.exp(logpost - np.where(bad, 0.0, finite_top)[:, None])
            w = np.where(np.isfinite(w), w, 0.0)
            norm = w.sum(axis=1)
            bad |= norm <= 0
            w = w / np.where(norm > 0, norm, 1.0)[:, None]
            mu_new = np.einsum("um,umr->ur", w, x)
            centred = x - mu_new[:, None, :]
            cov = np.einsum("um,umr,ums->urs", w, centred, centred)
            lam_new = lam.copy()
            for g in np.flatnonzero(active & ~bad):
                try:
                    lam_new[g] = np.linalg.cholesky(cov[g])
                except np.linalg.LinAlgError:
                    bad[g] = True
            newly_bad = bad & active
            if np.any(newly_bad):
                mu_new[newly_bad] = 0.0
                lam_new[newly_bad] = chol
                flagged |= newly_bad
                active &= ~newly_bad
            delta = np.maximum(np.max(np.abs(mu_new - mu), axis=1), np.max(np.abs(lam_new - lam), axis=(1, 2)))
            mu = np.where(active[:, None], mu_new, mu)
            lam = np.where(active[:, None, None], lam_new, lam)
            iters[active] += 1
            active &= delta >= 1e-8
        self.adapt_store[("mu", 0)] = mu
        self.adapt_store[("lam", 0)] = lam
        self.adapt_iters = {int(g): int(iters[g]) for g in self.active_units}
        self.adapt_flags = [int(g) for g in np.flatnonzero(flagged)]

    # -- general nested path ---------------------------------------------

    def _nested_total(self, theta: np.ndarray, refresh: bool) -> float:
        top = self.level_states[0]
        n_top = self._n_units_at(top)
        out = []
        for unit in range(n_top):
            if not self.subtree_rows[0][unit]:
                continue  # no observations anywhere below: the integral is 1
            out.append(self._nested_unit(theta, 0, unit, {}, (), refresh))
        if not np.all(np.isfinite(out)):
            return -np.inf
        return math.fsum(out)

    def _nested_unit(self, theta, pos: int, unit: int, outer_vals: dict, outer_key: tuple, refresh: bool) -> float:
        st = self.level_states[pos]
        chol = self.level_chol(st, theta)
        n_units = self._n_units_at(st)
        innermost = pos == len(self.level_states) - 1

        def with_own(x: np.ndarray) -> dict:
            vals = dict(outer_vals)
            for j, name in enumerate(st.info.latent_names):
                col = np.zeros((n_units, x.shape[0]))
                col[unit] = x[:, j]
                vals[name] = col
            return vals

        def conditional(x: np.ndarray) -> np.ndarray:
            mg = x.shape[0]
            if innermost:
                if self.has_rows_mask[unit]:
                    return self._single_unit_vector(theta, with_own(x), mg, unit)
                return np.zeros(mg)
            kids = self.children[pos][unit]
            kids = kids[self.subtree_rows[pos + 1][kids]] if kids.size else kids
            out = np.zeros(mg)
            for m in range(mg):
                vals_m = with_own(x[m : m + 1, :])
                out[m] = math.fsum(
                    self._nested_unit(theta, pos + 1, int(c), vals_m, outer_key + (unit, m), refresh) for c in kids
                )
            return out

        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            if st.plan.method == "qmc":
                draws = kernel_draws(st.kernel, st.uniforms, chol)
                s = conditional(draws)
                return float(logsumexp(s) - math.log(st.m))
            a, logw = st.nodes, st.logw
            if st.plan.adaptive:
                key = (pos, unit, outer_key)
                if refresh or key not in self.adapt_store:
                    res = adapt_locations(lambda x: np.asarray(conditional(x), dtype=float), st.kernel, chol, st.rule)
                    self.adapt_store[key] = res
                    self.adapt_iters[key] = res.iterations
                    if res.flagged:
                        self.adapt_flags.append(key)
                res = self.adapt_store[key]
                x = res.shift + a @ res.chol.T
                logdet = float(np.log(np.diag(res.chol)).sum())
                corr = logw + st.kernel.log_density(x, chol) - st.log_std + logdet
                return float(logsumexp(corr + conditional(x)))
            x = a @ chol.T
            if st.plan.dist == "normal":
                corr = logw
            else:
                corr = logw + st.kernel.log_density(x, chol) - st.log_std + float(np.log(np.diag(chol)).sum())
            return float(logsumexp(corr + conditional(x)))

    # -- diagnostics ------------------------------------------------------

    def profile_report(self) -> dict:
        levels = {}
        for st in self.level_states:
            levels[st.info.name] = {
                "method": st.plan.method,
                "kernel": st.plan.dist if st.plan.dist == "normal" else f"t({st.plan.df})",
                "dim": st.info.dim,
                "nodes": st.m,
            }
        per_call = self.cond_evals / self.n_calls if self.n_calls else 0
        return {
            "levels": levels,
            "likelihood_calls": self.n_calls,
            "conditional_evaluations": self.cond_evals,
            "conditional_evaluations_per_call": per_call,
            "adaptation_iterations": dict(self.adapt_iters),
            "adaptation_fallbacks": list(self.adapt_flags),
            "wall_time_s": self.wall_time,
        }


# ---------------------------------------------------------------------------
# Functional wrappers
# ---------------------------------------------------------------------------


def marginal_logl(program: Program, plan: IntegrationPlan, theta) -> float:
    """One-shot marginal log-likelihood (fresh rules and draws)."""
    ev = LikelihoodEvaluator(program, plan)
    ev.refresh(np.asarray(theta, dtype=float))
    return ev.logl(theta)


def mci_logl(program: Program, plan: IntegrationPlan, theta) -> float:
    """Marginal log-likelihood where at least one level integrates by
    Monte Carlo over frozen Halton draws.
    """
    if not any(lp.method == "qmc" for lp in plan.levels.values()):
        raise ValueError("plan has no qmc level")
    return marginal_logl(program, plan, theta)


def profile_report(program: Program, plan: IntegrationPlan, theta) -> dict:
    ev = LikelihoodEvaluator(program, plan)
    ev.refresh(np.asarray(theta, dtype=float))
    ev.logl(theta)
    return ev.profile_report()
