"""Nonlinear least squares and Poisson estimators.

The fitter is a damped Gauss-Newton: normal equations regularized with a
Levenberg-style factor that adapts by 10x after each accepted/rejected
step, Jacobians from central finite differences, box bounds enforced by
projection.  That is deliberately simple; every model fitted in this
package has a well-separated optimum and a sane initialization, so no
global search machinery is needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import gammaln

from .core import FitResult

__all__ = [
    "ModelSpec",
    "PoissonFit",
    "fit_nlls",
    "finite_diff_jacobian",
    "poisson_mle",
    "ztp_mle",
    "ztp_conditional_mean",
    "ztp_lambda_from_mean",
    "lorentzian_model",
    "poisson_histogram_model",
]

MAX_ITERATIONS = 200
REL_DECREASE_TOL = 1e-10
GRAD_TOL = 1e-8
LAMBDA_INIT = 1e-3
LAMBDA_FACTOR = 10.0
LAMBDA_MAX = 1e12
FD_STEP = 1e-6


@dataclass(frozen=True)
class ModelSpec:
    """A parametric curve y = eval(params, x).

    Parameters
    ----------
    name : str
        Identifier used in reports.
    param_names : sequence of str
        One name per parameter; defines the parameter order.
    eval : callable
        ``eval(params, x) -> y`` with ``params`` a 1-d array of length
        ``arity`` and ``x`` an array of abscissae.
    bounds : optional
        Per-parameter ``(lo, hi)`` pairs; ``None`` entries are unbounded.
    jac : optional
        Analytic Jacobian ``jac(params, x) -> (len(x), arity)`` array.
        Used only for cross-checks; the fitter always differentiates
        numerically.
    """

    name: str
    param_names: tuple[str, ...]
    eval: Callable[[np.ndarray, np.ndarray], np.ndarray]
    bounds: tuple[tuple[float | None, float | None], ...] | None = None
    jac: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None

    @property
    def arity(self) -> int:
        return len(self.param_names)


@dataclass(frozen=True)
class PoissonFit:
    """Poisson (or zero-truncated Poisson) maximum-likelihood estimate."""

    lambda_hat: float
    stderr: float
    truncated: bool
    loglik: float
    n: int
    degenerate: bool = False


def _project(p: np.ndarray, bounds) -> np.ndarray:
    if bounds is None:
        return p
    q = p.copy()
    for j, b in enumerate(bounds):
        if b is None:
            continue
        lo, hi = b
        if lo is not None:
            q[j] = max(q[j], lo)
        if hi is not None:
            q[j] = min(q[j], hi)
    return q


def finite_diff_jacobian(model: ModelSpec, params: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Central-difference Jacobian, step max(1e-6, 1e-6*|p_j|) per parameter."""
    params = np.asarray(params, dtype=float)
    jac = np.empty((len(xs), params.size))
    for j in range(params.size):
        h = max(FD_STEP, FD_STEP * abs(params[j]))
        up = params.copy()
        dn = params.copy()
        up[j] += h
        dn[j] -= h
        jac[:, j] = (model.eval(up, xs) - model.eval(dn, xs)) / (2.0 * h)
    return jac


def fit_nlls(
    model: ModelSpec,
    p0: Sequence[float],
    xs,
    ys,
    sigmas=None,
) -> FitResult:
    """Weighted nonlinear least squares for ``model`` on (xs, ys).

    Returns a local optimum with ``converged`` set when the relative
    decrease of the residual norm drops below 1e-10 or the gradient
    norm below 1e-8 within 200 iterations.  Standard errors come from
    the inverse Gauss-Newton Hessian scaled by the reduced chi-square.
    Weights are 1/sigma**2; the default is unweighted (sigma = 1).
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    p = np.asarray(p0, dtype=float).copy()
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("xs and ys must be 1-d arrays of equal length")
    if p.size != model.arity:
        raise ValueError(f"expected {model.arity} parameters for {model.name}, got {p.size}")
    if xs.size < model.arity:
        raise ValueError(f"need at least {model.arity} points to fit {model.name}")
    if sigmas is None:
        weights = np.ones_like(ys)
    else:
        sigmas = np.asarray(sigmas, dtype=float)
        if np.any(sigmas <= 0):
            raise ValueError("sigmas must be > 0")
        weights = 1.0 / sigmas
    p = _project(p, model.bounds)

    def residuals(params: np.ndarray) -> np.ndarray:
        return (model.eval(params, xs) - ys) * weights

    r = residuals(p)
    if not np.all(np.isfinite(r)):
        raise ValueError(f"model {model.name} is not finite at the starting point")
    cost = float(r @ r)

    lam = LAMBDA_INIT
    converged = False
    message = "max iterations reached"
    iterations = 0
    jac = None
    for iterations in range(1, MAX_ITERATIONS + 1):
        jac = finite_diff_jacobian(model, p, xs) * weights[:, None]
        grad = jac.T @ r
        if np.linalg.norm(grad, ord=np.inf) < GRAD_TOL:
            converged = True
            message = "gradient norm below tolerance"
            break
        jtj = jac.T @ jac
        diag = np.diag(jtj).copy()
        diag[diag <= 0] = 1.0
        # Inner loop: escalate damping until a step reduces the cost.
        stepped = False
        while lam <= LAMBDA_MAX:
            try:
                delta = np.linalg.solve(jtj + lam * np.diag(diag), -grad)
            except np.linalg.LinAlgError:
                message = "singular normal equations"
                break
            trial = _project(p + delta, model.bounds)
            r_trial = residuals(trial)
            cost_trial = float(r_trial @ r_trial) if np.all(np.isfinite(r_trial)) else np.inf
            if cost_trial < cost:
                rel_decrease = (cost - cost_trial) / max(cost, 1e-300)
                p, r, cost = trial, r_trial, cost_trial
                lam = max(lam / LAMBDA_FACTOR, 1e-12)
                stepped = True
                if rel_decrease < REL_DECREASE_TOL:
                    converged = True
                    message = "relative residual decrease below tolerance"
                break
            lam *= LAMBDA_FACTOR
        if converged:
            break
        if not stepped:
            if message == "max iterations reached":
                message = "no descent step found (damping exhausted)"
            break

    if jac is None:  # pragma: no cover - defensive, loop always runs once
        jac = finite_diff_jacobian(model, p, xs) * weights[:, None]
    stderr = _standard_errors(jac, cost, xs.size, model.arity)
    params = dict(zip(model.param_names, (float(v) for v in p)))
    errors = dict(zip(model.param_names, (float(v) for v in stderr)))
    return FitResult(
        params=params,
        stderr=errors,
        residual_norm=cost,
        converged=converged,
        iterations=iterations,
        message=message,
    )


def _standard_errors(jac: np.ndarray, cost: float, n: int, k: int) -> np.ndarray:
    dof = max(n - k, 1)
    scale = cost / dof
    jtj = jac.T @ jac
    # pinv tolerates the singular case (unidentifiable parameter); the
    # corresponding stderr then comes out 0 rather than blowing up.
    cov = np.linalg.pinv(jtj) * scale
    var = np.clip(np.diag(cov), 0.0, None)
    return np.sqrt(var)


def poisson_mle(counts) -> PoissonFit:
    """Closed-form Poisson MLE: lambda_hat is the sample mean.

    ``counts`` are the observations themselves (one non-negative integer
    per site), not a binned frequency table.
    """
    data = np.asarray(counts, dtype=float)
    if data.size == 0:
        raise ValueError("poisson_mle needs a nonempty sample")
    if np.any(data < 0) or np.any(data != np.floor(data)):
        raise ValueError("observations must be non-negative integers")
    n = data.size
    lam = float(np.mean(data))
    if lam == 0.0:
        return PoissonFit(0.0, 0.0, truncated=False, loglik=0.0, n=n, degenerate=True)
    loglik = float(np.sum(data * math.log(lam) - lam - gammaln(data + 1.0)))
    return PoissonFit(lam, math.sqrt(lam / n), truncated=False, loglik=loglik, n=n)


def ztp_conditional_mean(lam: float) -> float:
    """Mean of a Poisson(lam) conditioned on being >= 1: lam / (1 - exp(-lam))."""
    if lam <= 0:
        raise ValueError("lambda must be > 0")
    return lam / -math.expm1(-lam)


def ztp_lambda_from_mean(mbar: float) -> float:
    """Invert the zero-truncated conditional mean by safeguarded Newton.

    Solves mbar = lam / (1 - exp(-lam)) for lam to a relative tolerance
    of 1e-12; requires mbar > 1, below which the equation has no
    positive root.
    """
    if mbar <= 1.0:
        raise ValueError(
            f"conditional mean {mbar} is <= 1; a zero-truncated Poisson always exceeds 1"
        )
    # Bracket: lam/(1-exp(-lam)) <= lam + 1 gives lam >= mbar - 1, and the
    # conditional mean always exceeds lam, so lam <= mbar.
    lo, hi = max(mbar - 1.0, 1e-300), mbar
    lam = mbar - math.exp(-mbar) * mbar  # first-order start, inside the bracket
    lam = min(max(lam, lo), hi)
    for _ in range(100):
        em1 = -math.expm1(-lam)  # 1 - exp(-lam)
        f = lam / em1 - mbar
        if f > 0:
            hi = lam
        else:
            lo = lam
        deriv = (em1 - lam * math.exp(-lam)) / (em1 * em1)
        candidate = lam - f / deriv
        if not (lo < candidate < hi):
            candidate = 0.5 * (lo + hi)
        if abs(candidate - lam) <= 1e-12 * max(1.0, abs(lam)):
            return candidate
        lam = candidate
    return lam


def ztp_mle(nonzero_counts) -> PoissonFit:
    """Zero-truncated Poisson MLE.

    The MLE condition equates the sample mean with the truncated
    conditional mean, so this reduces to ``ztp_lambda_from_mean``.
    Rejects samples with mean <= 1, which no zero-truncated Poisson can
    produce.
    """
    data = np.asarray(nonzero_counts, dtype=float)
    if data.size == 0:
        raise ValueError("ztp_mle needs a nonempty sample")
    if np.any(data < 1) or np.any(data != np.floor(data)):
        raise ValueError("zero-truncated observations must be integers >= 1")
    n = data.size
    mbar = float(np.mean(data))
    if mbar <= 1.0:
        raise ValueError(
            f"sample mean {mbar} is <= 1; a zero-truncated Poisson has conditional mean > 1"
        )
    lam = ztp_lambda_from_mean(mbar)
    em1 = -math.expm1(-lam)
    loglik = float(
        np.sum(data * math.log(lam) - lam - gammaln(data + 1.0) - math.log(em1))
    )
    # Fisher information per observation for the truncated likelihood.
    mu = lam / em1
    fisher = mu / lam**2 - math.exp(-lam) / em1**2
    stderr = 1.0 / math.sqrt(n * fisher) if fisher > 0 else 0.0
    return PoissonFit(lam, stderr, truncated=True, loglik=loglik, n=n)


def lorentzian_model() -> ModelSpec:
    """Lorentzian line on a constant offset: y = c + A*(w/2)^2 / ((x-f0)^2 + (w/2)^2).

    Parameters are {A, f0, w, c}; the peak value is c + A at x = f0 and
    the half-maximum of the peak sits at x = f0 +/- w/2.
    """

    def evaluate(params: np.ndarray, x: np.ndarray) -> np.ndarray:
        amp, f0, width, offset = params
        half_sq = (width / 2.0) ** 2
        return offset + amp * half_sq / ((x - f0) ** 2 + half_sq)

    def jacobian(params: np.ndarray, x: np.ndarray) -> np.ndarray:
        amp, f0, width, offset = params
        half_sq = (width / 2.0) ** 2
        denom = (x - f0) ** 2 + half_sq
        jac = np.empty((len(x), 4))
        jac[:, 0] = half_sq / denom
        jac[:, 1] = amp * half_sq * 2.0 * (x - f0) / denom**2
        jac[:, 2] = amp * (width / 2.0) * (x - f0) ** 2 / denom**2
        jac[:, 3] = 1.0
        return jac

    return ModelSpec(
        name="lorentzian",
        param_names=("A", "f0", "w", "c"),
        eval=evaluate,
        bounds=((None, None), (None, None), (1e-9, None), (None, None)),
        jac=jacobian,
    )


def poisson_histogram_model() -> ModelSpec:
    """Poisson pmf scaled to histogram bar heights: y = amplitude * pmf(k; lam).

    This is the least-squares alternative to ``poisson_mle`` for fitting
    an occupancy histogram directly on its bar heights.
    """

    def evaluate(params: np.ndarray, k: np.ndarray) -> np.ndarray:
        lam, amplitude = params
        lam = max(lam, 1e-12)
        return amplitude * np.exp(k * math.log(lam) - lam - gammaln(k + 1.0))

    return ModelSpec(
        name="poisson_histogram",
        param_names=("lam", "amplitude"),
        eval=evaluate,
        bounds=((1e-9, None), (0.0, None)),
    )
