"""Maximum-likelihood updates for the shared per-component scale parameters.

Given fixed per-sample locations ``mu[i]`` and targets ``y[i]`` for one
mixture component:

* log-normal: closed form, the RMS of ``log y - mu``;
* Weibull (``mu`` = shape): root of
  ``h(s) = sum mu_i (s**mu_i - y_i**mu_i) / s**(mu_i + 1)``;
* log-logistic (``mu`` = scale): root of
  ``r(s) = sum log(y_i/mu_i) * (1 - 2 z_i / (1 + z_i)) + n / s`` with ``z_i = (y_i/mu_i)**s``.

Both score equations are strictly monotone in ``s``, so Newton-Raphson with
step halving is used and a log-scale bisection takes over whenever Newton
stalls. Optional per-sample ``weights`` turn the updates into the
responsibility-weighted (EM M-step) versions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import special

from .distributions import SIGMA_FLOOR, Family
from .errors import SolverError

logger = logging.getLogger(__name__)

ROOT_TOL = 1e-10
MAX_NEWTON = 100
LOGLOGISTIC_MIN_SHAPE = 1.0 + 1e-6


@dataclass
class RootResult:
    root: float
    residual: float
    iterations: int
    method: str


def _prep(targets, locations, weights):
    y = np.asarray(targets, dtype=float).ravel()
    mu = np.asarray(locations, dtype=float).ravel()
    if y.size == 0:
        raise SolverError("no observations for the scale update")
    if mu.shape != y.shape:
        raise ValueError("targets and locations must have the same length")
    if np.any(y <= 0) or not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite and > 0")
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float).ravel()
    if w.shape != y.shape or np.any(w < 0):
        raise ValueError("weights must be non-negative and match targets")
    return y, mu, w


def mle_sigma_lognormal(targets, locations, weights=None) -> float:
    """RMS residual of log-targets about their predicted locations (unfloored)."""
    y, mu, w = _prep(targets, locations, weights)
    total = w.sum()
    if total <= 0:
        raise SolverError("all weights are zero")
    r = np.log(y) - mu
    return math.sqrt(float(np.dot(w, r * r)) / total)


# ---------------------------------------------------------------------------
# generic damped Newton with bisection fallback


def _bisect_log(fun: Callable[[float], float], lo: float, hi: float, f_lo: float,
                tol: float, max_iter: int = 400) -> RootResult:
    a, b = math.log(lo), math.log(hi)
    fa = f_lo
    best = (math.inf, lo)
    for it in range(1, max_iter + 1):
        m = 0.5 * (a + b)
        x = math.exp(m)
        fx = fun(x)
        if abs(fx) < best[0]:
            best = (abs(fx), x)
        if abs(fx) < tol:
            return RootResult(x, fx, it, "bisection")
        if (fx > 0) == (fa > 0):
            a, fa = m, fx
        else:
            b = m
        if b - a <= 4 * np.finfo(float).eps * max(1.0, abs(m)):
            break
    logger.warning("bisection stopped at machine precision with |f|=%.3g", best[0])
    return RootResult(best[1], fun(best[1]), max_iter, "bisection")


def newton_bisect(fun: Callable[[float], float], dfun: Callable[[float], float],
                  x0: float, lo: float, hi: float, tol: float = ROOT_TOL,
                  max_iter: int = MAX_NEWTON, expand_hi: bool = False) -> RootResult:
    """Root of a monotone ``fun`` on ``(0, inf)``.

    Newton steps are halved until the iterate stays positive and ``|f|``
    decreases. Roots are only accepted inside ``[lo, hi]``. If Newton fails, or
    ``max_iter`` is reached, bisection on
    ``[lo, hi]`` (in log space) finishes the job. With ``expand_hi`` the upper
    end is doubled until the bracket changes sign.
    """
    x = float(x0) if (x0 is not None and np.isfinite(x0) and x0 > 0) else math.sqrt(lo * hi)
    fx = fun(x)
    it = 0
    while np.isfinite(fx) and it < max_iter:
        if abs(fx) < tol:
            if lo <= x <= hi:
                return RootResult(x, fx, it, "newton")
            break  # a tiny |f| far outside the bracket is an asymptote, not a root
        d = dfun(x)
        if not np.isfinite(d) or d == 0.0:
            break
        step = fx / d
        lam = 1.0
        accepted = False
        while lam > 1e-12:
            xn = x - lam * step
            if xn > 0 and np.isfinite(xn):
                fn = fun(xn)
                if np.isfinite(fn) and abs(fn) < abs(fx):
                    accepted = True
                    break
            lam *= 0.5
        it += 1
        if not accepted:
            break
        x, fx = xn, fn

    f_lo, f_hi = fun(lo), fun(hi)
    if expand_hi:
        while (f_lo > 0) == (f_hi > 0) and hi < 1e12:
            hi *= 2.0
            f_hi = fun(hi)
    if f_lo == 0:
        return RootResult(lo, 0.0, it, "bracket")
    if f_hi == 0:
        return RootResult(hi, 0.0, it, "bracket")
    if not (np.isfinite(f_lo) and np.isfinite(f_hi)) or (f_lo > 0) == (f_hi > 0):
        raise SolverError(
            f"no sign change on bracket [{lo:.3g}, {hi:.3g}]: f(lo)={f_lo:.3g}, f(hi)={f_hi:.3g}; "
            f"newton stopped after {it} iterations at x={x:.6g}, f={fx:.3g}"
        )
    res = _bisect_log(fun, lo, hi, f_lo, tol)
    res.iterations += it
    return res


# ---------------------------------------------------------------------------
# Weibull


def weibull_score(sigma: float, targets, shapes, weights=None) -> float:
    """``h(sigma)``; positive to the right of the root."""
    y, mu, w = _prep(targets, shapes, weights)
    return _weibull_h(sigma, y, mu, w)


def _weibull_h(sigma, y, mu, w):
    with np.errstate(over="ignore"):
        ratio = np.exp(mu * (np.log(y) - math.log(sigma)))
    return float(np.dot(w, (mu / sigma) * (1.0 - ratio)))


def _weibull_dh(sigma, y, mu, w):
    with np.errstate(over="ignore"):
        ratio = np.exp(mu * (np.log(y) - math.log(sigma)))
    return float(np.dot(w, (mu / (sigma * sigma)) * ((mu + 1.0) * ratio - 1.0)))


def solve_sigma_weibull(targets, shapes, init: float | None = None, weights=None,
                        tol: float = ROOT_TOL) -> float:
    y, mu, w = _prep(targets, shapes, weights)
    if np.any(mu <= 0):
        raise ValueError("Weibull shapes must be > 0")
    if init is None:
        init = float(np.mean(y))
    res = newton_bisect(lambda s: _weibull_h(s, y, mu, w), lambda s: _weibull_dh(s, y, mu, w),
                        init, SIGMA_FLOOR, 10.0 * float(y.max()), tol=tol)
    logger.debug("weibull scale: %s", res)
    return max(res.root, SIGMA_FLOOR)


# ---------------------------------------------------------------------------
# log-logistic


def loglogistic_score(sigma: float, targets, scales, weights=None) -> float:
    """``r(sigma)``; decreasing in ``sigma``."""
    y, mu, w = _prep(targets, scales, weights)
    return _ll_s(sigma, np.log(y / mu), w)


def _ll_s(sigma, u, w):
    return float(np.dot(w, u * (1.0 - 2.0 * special.expit(sigma * u)))) + w.sum() / sigma


def _ll_ds(sigma, u, w):
    p = special.expit(sigma * u)
    return float(-2.0 * np.dot(w, u * u * p * (1.0 - p))) - w.sum() / (sigma * sigma)


def solve_sigma_loglogistic(targets, scales, init: float | None = None, weights=None,
                            tol: float = ROOT_TOL, enforce_mean: bool = True) -> float:
    """Shape MLE; projected to just above 1 when the root is <= 1 (mean must exist)."""
    y, mu, w = _prep(targets, scales, weights)
    if np.any(mu <= 0):
        raise ValueError("log-logistic scales must be > 0")
    u = np.log(y / mu)
    if init is None:
        init = 2.0
    res = newton_bisect(lambda s: _ll_s(s, u, w), lambda s: _ll_ds(s, u, w),
                        init, SIGMA_FLOOR, max(10.0 * float(y.max()), 10.0), tol=tol,
                        expand_hi=True)
    root = res.root
    if enforce_mean and root <= 1.0:
        logger.warning("log-logistic shape root %.6g <= 1; projected to %.6g so the mean exists",
                       root, LOGLOGISTIC_MIN_SHAPE)
        root = LOGLOGISTIC_MIN_SHAPE
    return root


# ---------------------------------------------------------------------------
# mixture-level update


def update_scales(families, targets, mu, init_sigma, weights=None) -> np.ndarray:
    """New shared scale per component from (n, K) locations.

    ``weights`` (n, K), if given, are per-sample responsibilities.
    """
    mu = np.asarray(mu, dtype=float)
    out = np.empty(len(families))
    for k, fam in enumerate(families):
        wk = None if weights is None else weights[:, k]
        if wk is not None and not np.sum(wk) > 0:
            # a component nobody is assigned to says nothing about its scale
            logger.warning("component %d has zero total weight; keeping sigma %.6g",
                           k + 1, init_sigma[k])
            out[k] = init_sigma[k]
            continue
        if fam is Family.LOGNORMAL:
            out[k] = max(mle_sigma_lognormal(targets, mu[:, k], wk), SIGMA_FLOOR)
        elif fam is Family.WEIBULL:
            out[k] = solve_sigma_weibull(targets, mu[:, k], init_sigma[k], wk)
        else:
            out[k] = solve_sigma_loglogistic(targets, mu[:, k], init_sigma[k], wk)
    return out
