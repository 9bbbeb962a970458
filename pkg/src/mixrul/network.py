"""LSTM -> fully connected -> distribution-parameter head.

Everything is batched over the leading axis and computed in float64. The
forward pass can keep a cache so :func:`backward` can run reverse-mode
differentiation (including back-propagation through time); the training
module owns the loss and calls into both.

LSTM weights are stored stacked by gate in the order forget, input,
candidate (g), output:

    W: (4h, P)   U: (4h, h)   b: (4h,)

so ``W[0:h]`` is W_f, ``W[h:2h]`` is W_i and so on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special

from .distributions import SIGMA_FLOOR, Family, MixtureParams, MixtureSpec
from .errors import NumericError

SHAPE_FLOOR = 1.0 + SIGMA_FLOOR  # lower bound of softplus+1 outputs

DLBP1 = "dlbp1"
DLBP2 = "dlbp2"
MODEL_KINDS = (DLBP1, DLBP2)

ACTIVATIONS = ("elu", "softplus", "softplus_plus_one", "sigmoid", "identity", "tanh")
WEIGHT_ACTIVATIONS = ("sigmoid", "softplus")


# ---------------------------------------------------------------------------
# activations


def elu(x):
    x = np.asarray(x, dtype=float)
    return np.where(x >= 0, x, np.expm1(np.minimum(x, 0.0)))


def softplus(x):
    return np.logaddexp(0.0, np.asarray(x, dtype=float))


def softplus_plus_one(x):
    return softplus(x) + 1.0


def sigmoid(x):
    return special.expit(np.asarray(x, dtype=float))


def tanh(x):
    return np.tanh(x)


def identity(x):
    return np.asarray(x, dtype=float)


_ACT = {
    "elu": elu,
    "softplus": softplus,
    "softplus_plus_one": softplus_plus_one,
    "sigmoid": sigmoid,
    "identity": identity,
    "tanh": tanh,
}


def activate(name: str, x):
    try:
        return _ACT[name](x)
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


def activation_grad(name: str, x, y):
    """Derivative of activation ``name`` at pre-activation ``x`` with output ``y``."""
    if name == "elu":
        return np.where(x >= 0, 1.0, y + 1.0)
    if name in ("softplus", "softplus_plus_one"):
        return special.expit(x)
    if name == "sigmoid":
        return y * (1.0 - y)
    if name == "tanh":
        return 1.0 - y * y
    if name == "identity":
        return np.ones_like(x)
    raise ValueError(f"unknown activation {name!r}")


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class LstmLayerParams:
    W: np.ndarray
    U: np.ndarray
    b: np.ndarray

    @property
    def hidden(self) -> int:
        return int(self.U.shape[1])

    @property
    def n_in(self) -> int:
        return int(self.W.shape[1])

    def gate(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Views ``(W_x, U_x, b_x)`` for gate ``name`` in ``"figo"``."""
        j = "figo".index(name)
        h = self.hidden
        sl = slice(j * h, (j + 1) * h)
        return self.W[sl], self.U[sl], self.b[sl]


@dataclass
class FcLayerParams:
    W: np.ndarray
    b: np.ndarray


@dataclass
class HeadParams:
    W: np.ndarray  # (Q, n_in)
    b: np.ndarray  # (Q,)
    activations: tuple[str, ...]

    @property
    def Q(self) -> int:
        return int(self.W.shape[0])


@dataclass
class ModelParams:
    kind: str
    spec: MixtureSpec
    lstm_layers: list[LstmLayerParams]
    fc_layers: list[FcLayerParams]
    head: HeadParams
    shared_sigma: np.ndarray | None = None
    output_gate: str = "sigmoid"
    fc_activation: str = "elu"
    meta: dict = field(default_factory=dict)
    # time-scale head outputs are expressed in multiples of this many cycles
    time_unit: float = 1.0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if not (self.time_unit > 0 and np.isfinite(self.time_unit)):
            raise ValueError("time_unit must be finite and > 0")
        self.time_unit = float(self.time_unit)
        K = self.spec.K
        expected_q = 3 * K if self.kind == DLBP1 else 2 * K
        if self.head.Q != expected_q or len(self.head.activations) != expected_q:
            raise ValueError(f"{self.kind} with K={K} needs {expected_q} head neurons")
        for a in self.head.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if self.output_gate not in ("sigmoid", "tanh"):
            raise ValueError("output_gate must be 'sigmoid' or 'tanh'")
        if self.kind == DLBP2:
            if self.shared_sigma is None or len(self.shared_sigma) != K:
                raise ValueError("dlbp2 needs one shared sigma per component")
            self.shared_sigma = np.asarray(self.shared_sigma, dtype=float)
        elif self.shared_sigma is not None:
            raise ValueError("dlbp1 has no shared sigma")

    @property
    def K(self) -> int:
        return self.spec.K

    @property
    def n_features(self) -> int:
        return self.lstm_layers[0].n_in

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        """Trainable tensors in serialisation order (shared sigma excluded)."""
        out = []
        for i, layer in enumerate(self.lstm_layers):
            out += [(f"lstm{i}.W", layer.W), (f"lstm{i}.U", layer.U), (f"lstm{i}.b", layer.b)]
        for i, layer in enumerate(self.fc_layers):
            out += [(f"fc{i}.W", layer.W), (f"fc{i}.b", layer.b)]
        out += [("head.W", self.head.W), ("head.b", self.head.b)]
        return out

    def n_parameters(self) -> int:
        return int(sum(a.size for _, a in self.named_tensors()))

    def copy(self) -> "ModelParams":
        return ModelParams(
            kind=self.kind,
            spec=self.spec,
            lstm_layers=[LstmLayerParams(l.W.copy(), l.U.copy(), l.b.copy())
                         for l in self.lstm_layers],
            fc_layers=[FcLayerParams(l.W.copy(), l.b.copy()) for l in self.fc_layers],
            head=HeadParams(self.head.W.copy(), self.head.b.copy(), tuple(self.head.activations)),
            shared_sigma=None if self.shared_sigma is None else self.shared_sigma.copy(),
            output_gate=self.output_gate,
            fc_activation=self.fc_activation,
            meta=dict(self.meta),
            time_unit=self.time_unit,
        )


# ---------------------------------------------------------------------------
# construction


def default_head_activations(kind: str, spec: MixtureSpec) -> tuple[str, ...]:
    """Location, scale and weight activations per component.

    location: elu for log-normal (real line), softplus otherwise (must be > 0)
    scale:    softplus, or softplus+1 for log-logistic so the mean exists
    weight:   sigmoid
    """
    loc = ["elu" if f is Family.LOGNORMAL else "softplus" for f in spec.families]
    scale = ["softplus_plus_one" if f is Family.LOGLOGISTIC else "softplus"
             for f in spec.families]
    weight = ["sigmoid"] * spec.K
    return tuple(loc + scale + weight) if kind == DLBP1 else tuple(loc + weight)


def xavier_init(shape: tuple[int, int], rng: np.random.Generator | int) -> np.ndarray:
    """Glorot-uniform matrix of shape ``(fan_out, fan_in)``."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    fan_out, fan_in = shape
    if fan_out < 1 or fan_in < 1:
        raise ValueError("dimensions must be positive")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_model(kind: str, spec: MixtureSpec, n_features: int, lstm_units: Sequence[int],
               fc_units: Sequence[int], seed: int = 0,
               head_activations: Sequence[str] | None = None,
               shared_sigma: Sequence[float] | None = None,
               output_gate: str = "sigmoid", time_unit: float = 1.0) -> ModelParams:
    """Xavier-initialised weights, zero biases; deterministic in ``seed``."""
    if not lstm_units:
        raise ValueError("need at least one LSTM layer")
    rng = np.random.default_rng(seed)
    lstm = []
    n_in = n_features
    for h in lstm_units:
        W = np.vstack([xavier_init((h, n_in), rng) for _ in range(4)])
        U = np.vstack([xavier_init((h, h), rng) for _ in range(4)])
        lstm.append(LstmLayerParams(W, U, np.zeros(4 * h)))
        n_in = h
    fc = []
    for units in fc_units:
        fc.append(FcLayerParams(xavier_init((units, n_in), rng), np.zeros(units)))
        n_in = units
    Q = 3 * spec.K if kind == DLBP1 else 2 * spec.K
    acts = tuple(head_activations) if head_activations else default_head_activations(kind, spec)
    head = HeadParams(xavier_init((Q, n_in), rng), np.zeros(Q), acts)
    if kind == DLBP2 and shared_sigma is None:
        shared_sigma = np.ones(spec.K)
    return ModelParams(kind, spec, lstm, fc, head,
                       None if kind == DLBP1 else np.asarray(shared_sigma, dtype=float),
                       output_gate=output_gate, time_unit=time_unit)


# ---------------------------------------------------------------------------
# forward


def lstm_cell(x_t, h_prev, c_prev, params: LstmLayerParams, output_gate: str = "sigmoid"):
    """One LSTM step; works on a single vector or a batch of rows."""
    x_t = np.asarray(x_t, dtype=float)
    if x_t.shape[-1] != params.n_in or np.shape(h_prev)[-1] != params.hidden:
        raise ValueError("shape mismatch in lstm_cell")
    z = x_t @ params.W.T + h_prev @ params.U.T + params.b
    h = params.hidden
    f = special.expit(z[..., :h])
    i = special.expit(z[..., h:2 * h])
    g = np.tanh(z[..., 2 * h:3 * h])
    o = special.expit(z[..., 3 * h:]) if output_gate == "sigmoid" else np.tanh(z[..., 3 * h:])
    c = f * c_prev + i * g
    return o * np.tanh(c), c


def _lstm_layer_forward(X, layer: LstmLayerParams, output_gate: str, keep: bool):
    B, T, _ = X.shape
    h = layer.hidden
    XW = X @ layer.W.T + layer.b  # (B, T, 4h)
    H = np.empty((B, T, h))
    if keep:
        gates = np.empty((B, T, 4 * h))
        C = np.empty((B, T, h))
        TC = np.empty((B, T, h))
    h_t = np.zeros((B, h))
    c_t = np.zeros((B, h))
    UT = layer.U.T
    for t in range(T):
        z = XW[:, t] + h_t @ UT
        a = np.empty_like(z)
        a[:, :2 * h] = special.expit(z[:, :2 * h])
        a[:, 2 * h:3 * h] = np.tanh(z[:, 2 * h:3 * h])
        if output_gate == "sigmoid":
            a[:, 3 * h:] = special.expit(z[:, 3 * h:])
        else:
            a[:, 3 * h:] = np.tanh(z[:, 3 * h:])
        c_t = a[:, :h] * c_t + a[:, h:2 * h] * a[:, 2 * h:3 * h]
        tc = np.tanh(c_t)
        h_t = a[:, 3 * h:] * tc
        H[:, t] = h_t
        if keep:
            gates[:, t] = a
            C[:, t] = c_t
            TC[:, t] = tc
    cache = (X, gates, C, TC, H) if keep else None
    return H, cache


def lstm_forward(window, layers: Sequence[LstmLayerParams], output_gate: str = "sigmoid"):
    """Final hidden state of the top layer; ``window`` is (T, P) or (B, T, P)."""
    X = np.asarray(window, dtype=float)
    single = X.ndim == 2
    if single:
        X = X[None]
    for layer in layers:
        if X.shape[-1] != layer.n_in:
            raise ValueError(f"LSTM expects {layer.n_in} inputs, got {X.shape[-1]}")
        X, _ = _lstm_layer_forward(X, layer, output_gate, keep=False)
    out = X[:, -1]
    return out[0] if single else out


def fc_forward(v, layers: Sequence[FcLayerParams], activation: str = "elu"):
    v = np.asarray(v, dtype=float)
    for layer in layers:
        if v.shape[-1] != layer.W.shape[1]:
            raise ValueError(f"FC layer expects {layer.W.shape[1]} inputs, got {v.shape[-1]}")
        v = activate(activation, v @ layer.W.T + layer.b)
    return v


@dataclass
class HeadOutput:
    """Batched mixture parameters, each (B, K)."""

    mu: np.ndarray
    sigma: np.ndarray
    weights: np.ndarray
    raw_weights: np.ndarray

    def params(self, i: int, spec: MixtureSpec) -> MixtureParams:
        return MixtureParams.from_arrays(spec.families, self.mu[i], self.sigma[i], self.weights[i])


def _positive_mask(kind: str, spec: MixtureSpec) -> np.ndarray:
    """Which head outputs must be strictly positive (floored at SIGMA_FLOOR)."""
    K = spec.K
    loc = [f is not Family.LOGNORMAL for f in spec.families]
    if kind == DLBP1:
        return np.array(loc + [True] * K + [False] * K)
    return np.array(loc + [False] * K)


def _head_apply(z, model: ModelParams):
    acts = model.head.activations
    out = np.empty_like(z)
    for q, name in enumerate(acts):
        out[:, q] = activate(name, z[:, q])
    mask = _positive_mask(model.kind, model.spec)
    # softplus+1 rounds to exactly 1 for very negative input; keep it strictly above
    floor = np.where([a == "softplus_plus_one" for a in acts], SHAPE_FLOOR, SIGMA_FLOOR)
    floored = mask[None, :] & (out < floor)
    out = np.where(floored, floor, out)
    return out, floored


def unit_transform(model: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Per-neuron multipliers taking head outputs to parameters in cycles.

    The Weibull scale (sigma) and the log-logistic scale (mu) are multiplied by
    ``time_unit``, so a head output of 1 means ``time_unit`` cycles. Shapes,
    weights and the log-normal location are left alone: the location already
    lives on the log scale and a shift would put a floor under elu's range.
    """
    Q, K = model.head.Q, model.K
    scale = np.ones(Q)
    if model.time_unit == 1.0:
        return scale
    for k, fam in enumerate(model.spec.families):
        if fam is Family.LOGLOGISTIC:
            scale[k] = model.time_unit
        elif fam is Family.WEIBULL and model.kind == DLBP1:
            scale[K + k] = model.time_unit
    return scale


def _split_head(out, model: ModelParams, n: int) -> HeadOutput:
    K = model.K
    if model.time_unit != 1.0:
        out = out * unit_transform(model)
    mu = out[:, :K]
    if model.kind == DLBP1:
        sigma = out[:, K:2 * K]
        raw = out[:, 2 * K:3 * K]
    else:
        sigma = np.broadcast_to(model.shared_sigma, (n, K)).copy()
        raw = out[:, K:2 * K]
    total = raw.sum(axis=1, keepdims=True)
    if K == 1:
        weights = np.ones((n, 1))
    else:
        if np.any(total <= 0) or np.any(~np.isfinite(total)):
            raise NumericError("mixture weights cannot be normalised (sum <= 0)")
        weights = raw / total
    return HeadOutput(mu, sigma, weights, raw)


def head_forward_dlbp1(v, head: HeadParams, K: int, spec: MixtureSpec | None = None) -> HeadOutput:
    spec = spec or MixtureSpec.homogeneous(Family.LOGNORMAL, K)
    m = _bare_model(DLBP1, spec, head, None)
    v = np.atleast_2d(v)
    out, _ = _head_apply(v @ head.W.T + head.b, m)
    return _split_head(out, m, v.shape[0])


def head_forward_dlbp2(v, head: HeadParams, K: int, shared_sigma,
                       spec: MixtureSpec | None = None) -> HeadOutput:
    spec = spec or MixtureSpec.homogeneous(Family.LOGNORMAL, K)
    m = _bare_model(DLBP2, spec, head, shared_sigma)
    v = np.atleast_2d(v)
    out, _ = _head_apply(v @ head.W.T + head.b, m)
    return _split_head(out, m, v.shape[0])


def _bare_model(kind, spec, head, shared_sigma) -> ModelParams:
    dummy = LstmLayerParams(np.zeros((4, 1)), np.zeros((4, 1)), np.zeros(4))
    return ModelParams(kind, spec, [dummy], [], head,
                       None if shared_sigma is None else np.asarray(shared_sigma, dtype=float))


def forward_batch(windows, model: ModelParams, chunk: int = 4096) -> HeadOutput:
    """Mixture parameters for a (B, T, P) stack of windows; no cache kept."""
    X = np.asarray(windows, dtype=float)
    parts = []
    for start in range(0, X.shape[0], chunk):
        v = lstm_forward(X[start:start + chunk], model.lstm_layers, model.output_gate)
        v = fc_forward(v, model.fc_layers, model.fc_activation)
        out, _ = _head_apply(v @ model.head.W.T + model.head.b, model)
        parts.append(_split_head(out, model, v.shape[0]))
    if not parts:
        K = model.K
        e = np.zeros((0, K))
        return HeadOutput(e, e.copy(), e.copy(), e.copy())
    return HeadOutput(*(np.concatenate([getattr(p, f) for p in parts])
                        for f in ("mu", "sigma", "weights", "raw_weights")))


def forward(window, model: ModelParams) -> MixtureParams:
    """Mixture parameters for a single (T, P) window."""
    out = forward_batch(np.asarray(window, dtype=float)[None], model)
    return out.params(0, model.spec)


# ---------------------------------------------------------------------------
# cached forward + reverse pass


@dataclass
class ForwardCache:
    lstm: list
    fc_inputs: list
    fc_pre: list
    fc_out: list
    head_in: np.ndarray
    head_pre: np.ndarray
    head_out: np.ndarray
    floored: np.ndarray


def forward_train(windows, model: ModelParams) -> tuple[HeadOutput, ForwardCache]:
    X = np.asarray(windows, dtype=float)
    caches = []
    for layer in model.lstm_layers:
        X, cache = _lstm_layer_forward(X, layer, model.output_gate, keep=True)
        caches.append(cache)
    v = X[:, -1]
    fc_in, fc_pre, fc_out = [], [], []
    for layer in model.fc_layers:
        fc_in.append(v)
        z = v @ layer.W.T + layer.b
        v = activate(model.fc_activation, z)
        fc_pre.append(z)
        fc_out.append(v)
    z = v @ model.head.W.T + model.head.b
    out, floored = _head_apply(z, model)
    head = _split_head(out, model, v.shape[0])
    return head, ForwardCache(caches, fc_in, fc_pre, fc_out, v, z, out, floored)


def _lstm_layer_backward(dH, cache, layer: LstmLayerParams, output_gate: str, need_dx: bool):
    X, gates, C, TC, H = cache
    B, T, _ = X.shape
    h = layer.hidden
    dZ = np.empty((B, T, 4 * h))
    dh_next = np.zeros((B, h))
    dc_next = np.zeros((B, h))
    U = layer.U
    for t in range(T - 1, -1, -1):
        a = gates[:, t]
        f, i, g, o = a[:, :h], a[:, h:2 * h], a[:, 2 * h:3 * h], a[:, 3 * h:]
        tc = TC[:, t]
        dh = dh_next if dH is None else dh_next + dH[:, t]
        c_prev = C[:, t - 1] if t > 0 else 0.0
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz = dZ[:, t]
        dz[:, :h] = dc * c_prev * f * (1.0 - f)
        dz[:, h:2 * h] = dc * g * i * (1.0 - i)
        dz[:, 2 * h:3 * h] = dc * i * (1.0 - g * g)
        if output_gate == "sigmoid":
            dz[:, 3 * h:] = dh * tc * o * (1.0 - o)
        else:
            dz[:, 3 * h:] = dh * tc * (1.0 - o * o)
        dc_next = dc * f
        dh_next = dz @ U
    flatZ = dZ.reshape(B * T, 4 * h)
    dW = flatZ.T @ X.reshape(B * T, -1)
    db = flatZ.sum(axis=0)
    if T > 1:
        dU = dZ[:, 1:].reshape(-1, 4 * h).T @ H[:, :-1].reshape(-1, h)
    else:
        dU = np.zeros_like(U)
    dX = dZ @ layer.W if need_dx else None
    return dW, dU, db, dX


def backward(model: ModelParams, cache: ForwardCache, d_out: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given its gradient w.r.t. the head *outputs*.

    ``d_out`` is (B, Q) in head-neuron order, taken with respect to the
    parameters in cycles (after the ``time_unit`` conversion). Outputs that were floored carry
    no gradient. Returns a dict keyed like :meth:`ModelParams.named_tensors`.
    """
    grads: dict[str, np.ndarray] = {}
    acts = model.head.activations
    d_out = d_out * unit_transform(model)
    dz = np.empty_like(d_out)
    for q, name in enumerate(acts):
        dz[:, q] = d_out[:, q] * activation_grad(name, cache.head_pre[:, q], cache.head_out[:, q])
    dz[cache.floored] = 0.0
    return backward_from_head_pre(model, cache, dz, grads)


def backward_from_head_pre(model: ModelParams, cache: ForwardCache, dz: np.ndarray,
                           grads: dict | None = None) -> dict[str, np.ndarray]:
    grads = {} if grads is None else grads
    grads["head.W"] = dz.T @ cache.head_in
    grads["head.b"] = dz.sum(axis=0)
    dv = dz @ model.head.W
    for li in range(len(model.fc_layers) - 1, -1, -1):
        layer = model.fc_layers[li]
        dpre = dv * activation_grad(model.fc_activation, cache.fc_pre[li], cache.fc_out[li])
        grads[f"fc{li}.W"] = dpre.T @ cache.fc_inputs[li]
        grads[f"fc{li}.b"] = dpre.sum(axis=0)
        dv = dpre @ layer.W
    top = len(model.lstm_layers) - 1
    T = cache.lstm[top][0].shape[1]
    dH = np.zeros((dv.shape[0], T, model.lstm_layers[top].hidden))
    dH[:, -1] = dv
    for li in range(top, -1, -1):
        layer = model.lstm_layers[li]
        dW, dU, db, dX = _lstm_layer_backward(dH, cache.lstm[li], layer, model.output_gate,
                                              need_dx=li > 0)
        grads[f"lstm{li}.W"] = dW
        grads[f"lstm{li}.U"] = dU
        grads[f"lstm{li}.b"] = db
        dH = dX
    return grads
