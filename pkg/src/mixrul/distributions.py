"""Mixture (log)-location-scale failure-time distributions.

Each family is the exponential of a standard location-scale law:

    log-normal   -> log y ~ Normal(loc=mu, scale=sigma)
    Weibull      -> log y ~ SEV(loc=log sigma, scale=1/mu)     (mu = shape, sigma = scale)
    log-logistic -> log y ~ Logistic(loc=log mu, scale=1/sigma) (mu = scale, sigma = shape)

Note the parameter roles. For Weibull ``mu`` is the *shape* and ``sigma`` the
*scale*; for log-logistic ``mu`` is the *scale* and ``sigma`` the *shape*.
Both orders are kept as they appear in the model's distribution head, so the
network's first block of neurons is always called "location" even when it is
a shape or scale in the textbook parametrisation.

All densities are evaluated through the log-space kernel

    log f(y) = log h(z) - log s - log y,   z = (log y - loc) / s

which also gives the parameter gradients used during training.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

from .errors import MeanUndefinedError, ParameterDomainError

SIGMA_FLOOR = 1e-6
WEIGHT_SUM_TOL = 1e-9
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class Family(str, enum.Enum):
    LOGNORMAL = "lognormal"
    WEIBULL = "weibull"
    LOGLOGISTIC = "loglogistic"

    @classmethod
    def parse(cls, value: "Family | str") -> "Family":
        if isinstance(value, Family):
            return value
        key = str(value).strip().lower().replace("-", "").replace("_", "")
        aliases = {
            "lognormal": cls.LOGNORMAL,
            "ln": cls.LOGNORMAL,
            "weibull": cls.WEIBULL,
            "w": cls.WEIBULL,
            "loglogistic": cls.LOGLOGISTIC,
            "ll": cls.LOGLOGISTIC,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown distribution family {value!r}") from None


# ---------------------------------------------------------------------------
# standard kernels h(z) on the log scale


def _kernel_logh(family: Family, z):
    if family is Family.LOGNORMAL:
        return -0.5 * z * z - _LOG_SQRT_2PI
    if family is Family.WEIBULL:
        return z - np.exp(z)
    return z - 2.0 * np.logaddexp(0.0, z)


def _kernel_dlogh(family: Family, z):
    if family is Family.LOGNORMAL:
        return -z
    if family is Family.WEIBULL:
        return 1.0 - np.exp(z)
    return 1.0 - 2.0 * special.expit(z)


def _loc_scale(family: Family, mu, sigma):
    if family is Family.LOGNORMAL:
        return mu, sigma
    if family is Family.WEIBULL:
        return np.log(sigma), 1.0 / mu
    return np.log(mu), 1.0 / sigma


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class ComponentParams:
    family: Family
    mu: float
    sigma: float

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family))


@dataclass(frozen=True)
class MixtureSpec:
    """Ordered component families; position is the component label."""

    families: tuple[Family, ...]

    def __post_init__(self):
        fams = tuple(Family.parse(f) for f in self.families)
        if not fams:
            raise ValueError("a mixture needs at least one component")
        object.__setattr__(self, "families", fams)

    @property
    def K(self) -> int:
        return len(self.families)

    @classmethod
    def homogeneous(cls, family: Family | str, K: int) -> "MixtureSpec":
        return cls((Family.parse(family),) * K)

    @classmethod
    def lognormal_weibull(cls, k_lognormal: int, k_weibull: int) -> "MixtureSpec":
        return cls((Family.LOGNORMAL,) * k_lognormal + (Family.WEIBULL,) * k_weibull)

    def to_list(self) -> list[str]:
        return [f.value for f in self.families]


@dataclass(frozen=True)
class MixtureParams:
    components: tuple[ComponentParams, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))

    @property
    def K(self) -> int:
        return len(self.components)

    @property
    def spec(self) -> MixtureSpec:
        return MixtureSpec(tuple(c.family for c in self.components))

    @classmethod
    def from_arrays(cls, families: Sequence[Family | str], mu, sigma, weights) -> "MixtureParams":
        comps = tuple(
            ComponentParams(Family.parse(f), float(m), float(s))
            for f, m, s in zip(families, mu, sigma)
        )
        return cls(comps, tuple(float(w) for w in weights))


# ---------------------------------------------------------------------------
# validation


def component_violation(c: ComponentParams, need_mean: bool = False) -> str | None:
    mu, sigma = c.mu, c.sigma
    if not (math.isfinite(mu) and math.isfinite(sigma)):
        return f"{c.family.value}: non-finite parameters (mu={mu}, sigma={sigma})"
    if sigma <= 0:
        return f"{c.family.value}: sigma must be > 0, got {sigma}"
    if c.family is not Family.LOGNORMAL and mu <= 0:
        return f"{c.family.value}: mu must be > 0, got {mu}"
    if need_mean and c.family is Family.LOGLOGISTIC and sigma <= 1:
        return f"loglogistic: mean requires sigma > 1, got {sigma}"
    return None


def validate(p: MixtureParams, need_mean: bool = False) -> str | None:
    """Return a description of the first violated invariant, or ``None`` if valid."""
    if p.K < 1:
        return "mixture has no components"
    if len(p.weights) != p.K:
        return f"weights length {len(p.weights)} != number of components {p.K}"
    for k, w in enumerate(p.weights):
        if not math.isfinite(w) or w < 0:
            return f"weight {k} is negative or non-finite: {w}"
    total = math.fsum(p.weights)
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        return f"weights sum to {total!r}, expected 1"
    for k, c in enumerate(p.components):
        msg = component_violation(c, need_mean=need_mean)
        if msg is not None:
            return f"component {k}: {msg}"
    return None


def _check(p: MixtureParams, need_mean: bool = False) -> None:
    msg = validate(p, need_mean=need_mean)
    if msg is None:
        return
    if need_mean and "mean requires" in msg:
        raise MeanUndefinedError(msg)
    raise ParameterDomainError(msg)


def _check_y(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if np.any(~np.isfinite(y)) or np.any(y <= 0):
        raise ParameterDomainError("failure times must be finite and > 0")
    return y


# ---------------------------------------------------------------------------
# vectorised component kernels (no validation; used on training hot paths)


def component_logpdf(family: Family, y, mu, sigma):
    loc, s = _loc_scale(family, mu, sigma)
    logy = np.log(y)
    z = (logy - loc) / s
    with np.errstate(over="ignore"):
        return _kernel_logh(family, z) - np.log(s) - logy


def component_logpdf_grad(family: Family, y, mu, sigma):
    """Return ``(log f, d log f / d mu, d log f / d sigma)`` elementwise."""
    loc, s = _loc_scale(family, mu, sigma)
    logy = np.log(y)
    z = (logy - loc) / s
    with np.errstate(over="ignore", invalid="ignore"):
        logf = _kernel_logh(family, z) - np.log(s) - logy
        dh = _kernel_dlogh(family, z)
    d_loc = -dh / s
    d_s = -(dh * z + 1.0) / s
    if family is Family.LOGNORMAL:
        return logf, d_loc, d_s
    if family is Family.WEIBULL:
        # loc = log sigma, s = 1/mu
        return logf, d_s * (-1.0 / (mu * mu)), d_loc / sigma
    # loc = log mu, s = 1/sigma
    return logf, d_loc / mu, d_s * (-1.0 / (sigma * sigma))


def component_mean(family: Family, mu, sigma, weibull_mean: str = "standard"):
    """Elementwise mean of a single component (no domain checks)."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if family is Family.LOGNORMAL:
        return np.exp(mu + 0.5 * sigma * sigma)
    if family is Family.WEIBULL:
        scale = sigma * sigma if weibull_mean == "squared" else sigma
        return scale * np.exp(special.gammaln(1.0 + 1.0 / mu))
    a = np.pi / sigma
    return mu * a / np.sin(a)


def batch_log_pdf(y, families: Sequence[Family], mu, sigma, weights) -> np.ndarray:
    """Mixture log-density for a batch: ``y`` (n,), params (n, K)."""
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    K = len(families)
    terms = np.empty((n, K))
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    for k, fam in enumerate(families):
        terms[:, k] = logw[:, k] + component_logpdf(fam, y, mu[:, k], sigma[:, k])
    return special.logsumexp(terms, axis=1)


def batch_mean(families: Sequence[Family], mu, sigma, weights, weibull_mean: str = "standard"):
    out = np.zeros(np.asarray(weights).shape[0])
    for k, fam in enumerate(families):
        out += weights[:, k] * component_mean(fam, mu[:, k], sigma[:, k], weibull_mean)
    return out


# ---------------------------------------------------------------------------
# public scalar API


def pdf(y, c: ComponentParams):
    msg = component_violation(c)
    if msg is not None:
        raise ParameterDomainError(msg)
    y = _check_y(y)
    out = np.exp(component_logpdf(c.family, y, c.mu, c.sigma))
    return float(out) if out.ndim == 0 else out


def log_pdf(y, c: ComponentParams):
    msg = component_violation(c)
    if msg is not None:
        raise ParameterDomainError(msg)
    y = _check_y(y)
    out = component_logpdf(c.family, y, c.mu, c.sigma)
    return float(out) if out.ndim == 0 else out


def mixture_log_pdf(y, p: MixtureParams):
    _check(p)
    y = _check_y(y)
    flat = np.atleast_1d(y)
    terms = np.empty((flat.shape[0], p.K))
    with np.errstate(divide="ignore"):
        for k, (w, c) in enumerate(zip(p.weights, p.components)):
            terms[:, k] = np.log(w) + component_logpdf(c.family, flat, c.mu, c.sigma)
    out = special.logsumexp(terms, axis=1)
    return float(out[0]) if y.ndim == 0 else out


def mixture_pdf(y, p: MixtureParams):
    _check(p)
    y = _check_y(y)
    out = np.zeros_like(y, dtype=float)
    for w, c in zip(p.weights, p.components):
        out = out + w * np.exp(component_logpdf(c.family, y, c.mu, c.sigma))
    return float(out) if out.ndim == 0 else out


def mixture_mean(p: MixtureParams, weibull_mean: str = "standard") -> float:
    """Expected failure time of the mixture.

    ``weibull_mean="squared"`` uses ``sigma**2 * Gamma(1 + 1/mu)`` for Weibull
    components instead of the usual ``sigma * Gamma(1 + 1/mu)``.
    """
    if weibull_mean not in ("standard", "squared"):
        raise ValueError(f"unknown weibull_mean variant {weibull_mean!r}")
    _check(p, need_mean=True)
    return math.fsum(
        w * float(component_mean(c.family, c.mu, c.sigma, weibull_mean))
        for w, c in zip(p.weights, p.components)
    )


def nll(targets, params: Sequence[MixtureParams]) -> float:
    """Mean negative log-likelihood over paired targets and mixtures."""
    targets = np.atleast_1d(np.asarray(targets, dtype=float))
    if targets.size == 0:
        raise ValueError("nll of an empty batch is undefined")
    if len(params) != targets.size:
        raise ValueError(f"{targets.size} targets but {len(params)} parameter sets")
    logs = [mixture_log_pdf(float(y), p) for y, p in zip(targets, params)]
    return -math.fsum(logs) / targets.size
