"""Numerical integration machinery for random effects.

Gauss-Hermite rules are normalized against the standard normal kernel,
Halton sets provide deterministic quasi-Monte Carlo uniforms, and
ReKernel maps a flat parameter block to a Cholesky scale for either a
normal or a multivariate-t random-effect distribution. Mean-variance
adaptation recentres a rule on the per-cluster posterior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import chdtri, gammaln, ndtri

__all__ = [
    "GhRule",
    "HaltonSet",
    "ReKernel",
    "AdaptResult",
    "gh_rule",
    "gh_grid",
    "halton",
    "kernel_draws",
    "adapt_locations",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GhRule:
    """One-dimensional Gauss-Hermite rule with N(0,1) weighting.

    Weights sum to 1 and integrate x^2 to 1 exactly.
    """

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def q(self) -> int:
        return len(self.nodes)


def gh_rule(q: int) -> GhRule:
    """Nodes/weights via the symmetric tridiagonal Jacobi matrix for the
    e^{-x^2} weight, rescaled to the standard normal kernel (nodes by
    sqrt(2), weights by 1/sqrt(pi)).
    """
    if q < 1:
        raise ValueError("need at least one quadrature point")
    if q == 1:
        return GhRule(np.zeros(1), np.ones(1))
    off = np.sqrt(np.arange(1, q) / 2.0)
    jac = np.diag(off, 1) + np.diag(off, -1)
    vals, vecs = np.linalg.eigh(jac)
    weights = vecs[0] ** 2  # already normalized: sum of squared first components is 1
    nodes = vals * math.sqrt(2.0)
    order = np.argsort(nodes)
    nodes, weights = nodes[order], weights[order]
    # enforce exact symmetry of the computed rule
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    if q % 2 == 1:
        nodes[q // 2] = 0.0
    return GhRule(nodes, weights)


def gh_grid(rule: GhRule, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor-product grid over r dimensions: (Q^r, r) nodes and (Q^r,)
    log-weights.
    """
    if r == 0:
        return np.zeros((1, 0)), np.zeros(1)
    grids = np.meshgrid(*([rule.nodes] * r), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    logw = np.log(rule.weights)
    wgrids = np.meshgrid(*([logw] * r), indexing="ij")
    logws = sum(g.ravel() for g in wgrids)
    return nodes, logws


def _first_primes(r: int) -> list[int]:
    primes: list[int] = []
    n = 2
    while len(primes) < r:
        if all(n % p for p in primes):
            primes.append(n)
        n += 1
    return primes


def _radical_inverse(indices: np.ndarray, base: int) -> np.ndarray:
    out = np.zeros(len(indices), dtype=float)
    denom = np.ones(len(indices), dtype=float)
        # peel digits until every index is exhausted
    rem = indices.astype(np.int64).copy()
    while np.any(rem > 0):
        denom *= base
        rem, digit = np.divmod(rem, base)
        out += digit / denom
    return out


@dataclass(frozen=True)
class HaltonSet:
    """Deterministic low-discrepancy uniforms in (0,1)^r."""

    values: np.ndarray  # (M, r)
    bases: tuple[int, ...]
    skip: int

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def r(self) -> int:
        return self.values.shape[1]


def halton(m: int, r: int, skip: int = 0) -> HaltonSet:
    """First m Halton points in r dimensions, bases the first r primes,
    starting after ``skip`` burn-in points.
    """
    if m < 1 or r < 1:
        raise ValueError("need m >= 1 draws and r >= 1 dimensions")
    bases = _first_primes(r)
    idx = np.arange(skip + 1, skip + m + 1)
    cols = [_radical_inverse(idx, b) for b in bases]
    return HaltonSet(np.stack(cols, axis=-1), tuple(bases), skip)


class ReKernel:
    """Random-effect distribution at one level.

    Parameterized by a Cholesky factor with log-scale diagonal; the
    sub-diagonal is free when the structure is unstructured and absent
    when independent. ``dist`` is "normal" or "t" (with ``df`` > 0; the
    adaptive/quadrature paths additionally require df > 2).
    """

    def __init__(self, dim: int, dist: str = "normal", df: int | None = None, structure: str = "independent"):
        if dist not in ("normal", "t"):
            raise ValueError(f"unknown random-effect distribution {dist!r}")
        if dist == "t":
            if df is None or df < 1:
                raise ValueError("t distribution needs a positive integer df")
        if structure not in ("independent", "unstructured"):
            raise ValueError(f"unknown covariance structure {structure!r}")
        self.dim = dim
        self.dist = dist
        self.df = df
        self.structure = structure

    @property
    def n_params(self) -> int:
        if self.structure == "independent":
            return self.dim
        return self.dim + self.dim * (self.dim - 1) // 2

    def build_chol(self, block: np.ndarray) -> np.ndarray:
        """Lower-triangular scale factor from the flat parameter block:
        exp of the first ``dim`` entries on the diagonal, remaining
        entries filling the sub-diagonal row by row.
        """
        block = np.asarray(block, dtype=float)
        chol = np.diag(np.exp(block[: self.dim]))
        if self.structure == "unstructured":
            pos = self.dim
            for i in range(1, self.dim):
                chol[i, :i] = block[pos : pos + i]
                pos += i
        return chol

    def log_density(self, b: np.ndarray, chol: np.ndarray) -> np.ndarray:
        """Log density of points b (..., dim) under the kernel with the
        given Cholesky scale.
        """
        b = np.asarray(b, dtype=float)
        z = np.linalg.solve(chol, b[..., None])[..., 0] if self.dim > 1 else b / chol[0, 0]
        quad = np.sum(z * z, axis=-1)
        logdet = float(np.sum(np.log(np.diag(chol))))
        r = self.dim
        if self.dist == "normal":
            return -0.5 * r * _LOG_2PI - logdet - 0.5 * quad
        df = float(self.df)
        return (
            gammaln((df + r) / 2.0)
            - gammaln(df / 2.0)
            - 0.5 * r * math.log(df * math.pi)
            - logdet
            - 0.5 * (df + r) * np.log1p(quad / df)
        )


def kernel_draws(kernel: ReKernel, uniforms: HaltonSet, chol: np.ndarray | None = None) -> np.ndarray:
    """Transform uniform draws into mean-zero kernel draws (M, dim).

    Normal kernels consume dim columns; t kernels one extra column that
    drives the chi-squared mixing variable.
    """
    need = kernel.dim + (1 if kernel.dist == "t" else 0)
    if uniforms.r < need:
        raise ValueError(f"{kernel.dist} kernel in {kernel.dim} dims needs {need} uniform columns, got {uniforms.r}")
    if chol is None:
        chol = np.eye(kernel.dim)
    z = ndtri(uniforms.values[:, : kernel.dim])
    if kernel.dist == "t":
        w = chdtri(kernel.df, 1.0 - uniforms.values[:, kernel.dim])
        z = z * np.sqrt(kernel.df / w)[:, None]
    return z @ chol.T


@dataclass
class AdaptResult:
    shift: np.ndarray  # (dim,)
    chol: np.ndarray  # (dim, dim) posterior scale factor
    iterations: int
    flagged: bool = False


def _std_normal_logpdf(a: np.ndarray) -> np.ndarray:
    return -0.5 * a.shape[-1] * _LOG_2PI - 0.5 * np.sum(a * a, axis=-1)


def adapt_locations(
    log_conditional,
    kernel: ReKernel,
    chol: np.ndarray,
    rule: GhRule,
    tol: float = 1e-8,
    max_iter: int = 20,
) -> AdaptResult:
    """Iteratively recentre/rescale a Gauss-Hermite grid on the posterior
    of one cluster's random effects.

    ``log_conditional`` maps node locations (M, dim) to the cluster's
    conditional log-likelihood (M,). Non-finite posterior moments fall
    back to (0, prior scale) with ``flagged`` set.
    """
    if kernel.dist == "t" and kernel.df is not None and kernel.df <= 2:
        raise ValueError("mean-variance adaptation needs t df > 2")
    r = kernel.dim
    nodes, logw = gh_grid(rule, r)
    mu = np.zeros(r)
    lam = np.array(chol, dtype=float)
    it = 0
    for it in range(1, max_iter + 1):
        x = mu + nodes @ lam.T
        with np.errstate(invalid="ignore", over="ignore"):
            logpost = logw + log_conditional(x) + kernel.log_density(x, chol) - _std_normal_logpdf(nodes)
        if not np.any(np.isfinite(logpost)):
            return AdaptResult(np.zeros(r), np.array(chol, dtype=float), it, flagged=True)
        top = np.max(logpost[np.isfinite(logpost)])
        w = np.exp(np.where(np.isfinite(logpost), logpost - top, -np.inf))
        w /= w.sum()
        mu_new = w @ x
        centred = x - mu_new
        cov = (w[:, None] * centred).T @ centred
        if not (np.all(np.isfinite(mu_new)) and np.all(np.isfinite(cov))):
            return AdaptResult(np.zeros(r), np.array(chol, dtype=float), it, flagged=True)
        try:
            lam_new = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            return AdaptResult(np.zeros(r), np.array(chol, dtype=float), it, flagged=True)
        delta = max(np.max(np.abs(mu_new - mu)), np.max(np.abs(lam_new - lam)))
        mu, lam = mu_new, lam_new
        if delta < tol:
            break
    return AdaptResult(mu, lam, it)
