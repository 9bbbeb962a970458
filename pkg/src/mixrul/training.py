"""Loss, gradients, Adam, and the two training procedures.

``train_dlbp1`` fits every weight by Adam on the mixture negative
log-likelihood. ``train_dlbp2`` alternates: a few Adam epochs with the shared
scales held fixed, then a maximum-likelihood update of each scale given the
network's current locations, until the scales stop moving.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import special

from . import network as nw
from .dataset import WindowedSamples
from .distributions import Family, MixtureSpec, component_logpdf, component_logpdf_grad
from .errors import ConfigError, NumericError
from .scale import update_scales

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    model: str = nw.DLBP1
    families: tuple[str, ...] = ("loglogistic", "loglogistic")
    window: int = 30
    lstm_units: tuple[int, ...] = (64,)
    fc_units: tuple[int, ...] = (128,)
    batch_size: int = 512
    epochs: int = 250
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0
    head_activations: tuple[str, ...] | None = None
    output_gate: str = "sigmoid"
    time_unit: float = 125.0  # cycles per unit of head output
    # dlbp2 only
    max_outer: int = 20
    tol: float = 1e-4
    inner_epochs: int | None = None
    sigma_init: str = "shifted"  # or "literal": Uniform(0,1) for every family
    sigma_update: str = "literal"  # or "weighted": responsibility-weighted MLE

    def __post_init__(self):
        self.families = tuple(Family.parse(f).value for f in self.families)
        self.lstm_units = tuple(int(u) for u in self.lstm_units)
        self.fc_units = tuple(int(u) for u in self.fc_units)
        if self.head_activations is not None:
            self.head_activations = tuple(self.head_activations)
        self.validate()

    def validate(self) -> None:
        if self.model not in nw.MODEL_KINDS:
            raise ConfigError(f"model must be one of {nw.MODEL_KINDS}, got {self.model!r}")
        if not self.families:
            raise ConfigError("need at least one mixture component")
        checks = [
            (self.window >= 1, "window must be >= 1"),
            (len(self.lstm_units) >= 1 and min(self.lstm_units) >= 1, "need >= 1 LSTM layer"),
            (all(u >= 1 for u in self.fc_units), "FC units must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.learning_rate >= 0, "learning_rate must be >= 0"),
            (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "Adam betas must lie in [0, 1)"),
            (self.eps_adam > 0, "eps_adam must be > 0"),
            (self.time_unit > 0, "time_unit must be > 0"),
            (self.max_outer >= 1, "max_outer must be >= 1"),
            (self.tol > 0, "tol must be > 0"),
            (self.inner_epochs is None or self.inner_epochs >= 1, "inner_epochs must be >= 1"),
            (self.sigma_init in ("shifted", "literal"), "sigma_init: shifted|literal"),
            (self.sigma_update in ("literal", "weighted"), "sigma_update: literal|weighted"),
            (self.output_gate in ("sigmoid", "tanh"), "output_gate: sigmoid|tanh"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def spec(self) -> MixtureSpec:
        return MixtureSpec(tuple(Family.parse(f) for f in self.families))

    @property
    def inner(self) -> int:
        return self.inner_epochs or math.ceil(self.epochs / self.max_outer)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


# ---------------------------------------------------------------------------
# loss and gradient


def _nll_terms(y, head: nw.HeadOutput, spec: MixtureSpec, need_grad: bool):
    n, K = head.mu.shape
    logf = np.empty((n, K))
    dmu = np.empty((n, K)) if need_grad else None
    dsig = np.empty((n, K)) if need_grad else None
    for k, fam in enumerate(spec.families):
        if need_grad:
            logf[:, k], dmu[:, k], dsig[:, k] = component_logpdf_grad(
                fam, y, head.mu[:, k], head.sigma[:, k])
        else:
            logf[:, k] = component_logpdf(fam, y, head.mu[:, k], head.sigma[:, k])
    with np.errstate(divide="ignore"):
        logw = np.log(head.weights)
    lse = special.logsumexp(logw + logf, axis=1)
    return logf, lse, dmu, dsig


def _raise_nonfinite(lse, asset_ids, window_index):
    bad = int(np.flatnonzero(~np.isfinite(lse))[0])
    where = f"batch row {bad}"
    if asset_ids is not None:
        where += f" (asset {int(asset_ids[bad])}"
        if window_index is not None:
            where += f", window {int(window_index[bad])}"
        where += ")"
    raise NumericError(f"non-finite log-likelihood at {where}")


def loss_and_grad(windows, targets, model: nw.ModelParams, asset_ids=None, window_index=None
                  ) -> tuple[float, dict[str, np.ndarray]]:
    """Mean NLL of a batch and its exact gradient for every trainable tensor.

    The DLBP2 shared scales are constants here and get no gradient.
    """
    y = np.asarray(targets, dtype=float)
    B = y.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    head, cache = nw.forward_train(windows, model)
    logf, lse, dmu, dsig = _nll_terms(y, head, model.spec, need_grad=True)
    if not np.all(np.isfinite(lse)):
        _raise_nonfinite(lse, asset_ids, window_index)
    loss = -float(np.sum(lse)) / B

    K = model.K
    with np.errstate(divide="ignore"):
        resp = np.exp(np.log(head.weights) + logf - lse[:, None])
    d_out = np.zeros((B, model.head.Q))
    d_out[:, :K] = -resp * dmu / B
    if model.kind == nw.DLBP1:
        d_out[:, K:2 * K] = -resp * dsig / B
        wcol = slice(2 * K, 3 * K)
    else:
        wcol = slice(K, 2 * K)
    if K > 1:
        # d(-log sum_k w~_k f_k + log sum_k w~_k) / d w~_k
        total = head.raw_weights.sum(axis=1, keepdims=True)
        ratio = np.exp(np.minimum(logf - lse[:, None], 700.0))
        d_out[:, wcol] = -(ratio - 1.0) / total / B
    grads = nw.backward(model, cache, d_out)
    return loss, grads


def batch_nll(windows, targets, model: nw.ModelParams) -> float:
    head = nw.forward_batch(windows, model)
    _, lse, _, _ = _nll_terms(np.asarray(targets, dtype=float), head, model.spec, False)
    return -float(np.mean(lse))


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray] | Sequence[tuple[str, np.ndarray]],
              grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``."""
    items = params.items() if isinstance(params, dict) else params
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in items:
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    model: nw.ModelParams
    history: list[dict]
    config: TrainConfig
    converged: bool | None = None


def _build_model(samples: WindowedSamples, config: TrainConfig, shared_sigma=None):
    return nw.init_model(
        config.model, config.spec, samples.n_features, config.lstm_units, config.fc_units,
        seed=config.seed, head_activations=config.head_activations,
        shared_sigma=shared_sigma, output_gate=config.output_gate,
        time_unit=config.time_unit,
    )


def _check_samples(samples: WindowedSamples, config: TrainConfig):
    if len(samples) == 0:
        raise ValueError("no training windows")
    if samples.window_width != config.window:
        raise ConfigError(f"windows have width {samples.window_width}, config says "
                          f"{config.window}")
    if np.any(~np.isfinite(samples.targets)) or np.any(samples.targets <= 0):
        raise ValueError("training targets must be finite and > 0")


def run_epoch(model: nw.ModelParams, samples: WindowedSamples, config: TrainConfig,
              state: AdamState, rng: np.random.Generator) -> float:
    """One shuffled pass of mini-batch Adam; returns the sample-weighted mean loss."""
    n = len(samples)
    order = rng.permutation(n)
    total = 0.0
    tensors = model.named_tensors()
    for start in range(0, n, config.batch_size):
        idx = order[start:start + config.batch_size]
        loss, grads = loss_and_grad(samples.windows[idx], samples.targets[idx], model,
                                    samples.asset_ids[idx], samples.window_index[idx])
        adam_step(tensors, grads, state, config.learning_rate, config.beta1, config.beta2,
                  config.eps_adam)
        total += loss * len(idx)
    return total / n


def train_dlbp1(samples: WindowedSamples, config: TrainConfig, progress=None) -> TrainResult:
    if config.model != nw.DLBP1:
        raise ConfigError("train_dlbp1 needs model = dlbp1")
    _check_samples(samples, config)
    model = _build_model(samples, config)
    rng = np.random.default_rng([config.seed, 1])
    state = AdamState()
    history = []
    for epoch in range(1, config.epochs + 1):
        try:
            loss = run_epoch(model, samples, config, state, rng)
        except NumericError as exc:
            raise NumericError(f"training diverged in epoch {epoch}: {exc}") from exc
        history.append({"epoch": epoch, "loss": loss})
        logger.info("epoch %d loss %.6f", epoch, loss)
        if progress:
            progress(epoch, loss)
    return TrainResult(model, history, config)


def initial_sigma(config: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Uniform(0, 1) per component in head units; log-logistic shifted to Uniform(1, 2)
    unless literal. A Weibull sigma is a time scale, so it is multiplied by ``time_unit``."""
    fams = [Family.parse(f) for f in config.families]
    u = rng.uniform(0.0, 1.0, size=len(fams))
    if config.sigma_init == "shifted":
        ll = np.array([f is Family.LOGLOGISTIC for f in fams])
        u = np.where(ll, u + 1.0, u)
    weib = np.array([f is Family.WEIBULL for f in fams])
    return np.where(weib, u * config.time_unit, u)


def responsibilities(targets, head: nw.HeadOutput, spec: MixtureSpec) -> np.ndarray:
    logf, lse, _, _ = _nll_terms(np.asarray(targets, dtype=float), head, spec, False)
    with np.errstate(divide="ignore"):
        return np.exp(np.log(head.weights) + logf - lse[:, None])


def sigma_change(new, old) -> float:
    """Mean squared change of the shared scales; the outer stopping statistic."""
    d = np.asarray(new, dtype=float) - np.asarray(old, dtype=float)
    return float(np.mean(d * d))


def train_dlbp2(samples: WindowedSamples, config: TrainConfig, progress=None) -> TrainResult:
    if config.model != nw.DLBP2:
        raise ConfigError("train_dlbp2 needs model = dlbp2")
    _check_samples(samples, config)
    sig_rng = np.random.default_rng([config.seed, 2])
    sigma = initial_sigma(config, sig_rng)
    model = _build_model(samples, config, shared_sigma=sigma)
    rng = np.random.default_rng([config.seed, 1])
    state = AdamState()
    history = [{"iteration": 0, "loss": float("nan"), "change": float("nan"),
                "sigma": sigma.tolist()}]
    converged = False
    epoch = 0
    for j in range(1, config.max_outer + 1):
        loss = float("nan")
        for _ in range(config.inner):
            epoch += 1
            try:
                loss = run_epoch(model, samples, config, state, rng)
            except NumericError as exc:
                raise NumericError(f"outer iteration {j}, epoch {epoch}: {exc}") from exc
        head = nw.forward_batch(samples.windows, model)
        weights = None
        if config.sigma_update == "weighted":
            weights = responsibilities(samples.targets, head, model.spec)
        old = model.shared_sigma.copy()
        try:
            new = update_scales(model.spec.families, samples.targets, head.mu, old, weights)
        except Exception as exc:
            exc.args = (f"scale update failed at outer iteration {j}: {exc}",)
            raise
        model.shared_sigma = new
        change = sigma_change(new, old)
        history.append({"iteration": j, "loss": loss, "change": change, "sigma": new.tolist()})
        logger.info("outer %d loss %.6f change %.3g sigma %s", j, loss, change, new)
        if progress:
            progress(j, loss)
        if change < config.tol:
            converged = True
            break
    return TrainResult(model, history, config, converged)


def train(samples: WindowedSamples, config: TrainConfig, progress=None) -> TrainResult:
    if config.model == nw.DLBP1:
        return train_dlbp1(samples, config, progress)
    return train_dlbp2(samples, config, progress)
