"""Point RUL predictions and the RMSE / prediction-score / RAE metrics."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import network as nw
from .dataset import DEFAULT_RUL_CAP, EngineTrace, make_windows
from .distributions import MixtureParams, mixture_mean, validate
from .errors import MeanUndefinedError

logger = logging.getLogger(__name__)

EARLY_DENOM = 13.0
LATE_DENOM = 10.0


@dataclass
class Prediction:
    asset_id: int
    predicted_rul: float
    params: MixtureParams
    true_rul: float | None = None
    window_index: int = 1

    @property
    def delta(self) -> float:
        if self.true_rul is None:
            raise ValueError(f"asset {self.asset_id} has no true RUL")
        return self.predicted_rul - self.true_rul


@dataclass
class EvalReport:
    rmse: float
    score_total: float
    score_mean: float
    score_per_asset: list[float]
    rae_per_asset: list[float]
    rae_summary: dict
    n_t: int
    mode: str
    cap_true_rul: bool
    weibull_mean: str
    predictions: list[Prediction] = field(repr=False, default_factory=list)

    def to_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "score_total": self.score_total,
            "score_mean": self.score_mean,
            "n_t": self.n_t,
            "mode": self.mode,
            "cap_true_rul": self.cap_true_rul,
            "weibull_mean": self.weibull_mean,
            "rae": self.rae_summary,
        }


def predict(window, model: nw.ModelParams, weibull_mean: str = "standard",
            asset_id: int = 0, true_rul: float | None = None) -> Prediction:
    """Forward one window and report the mixture mean as the point RUL."""
    params = nw.forward(window, model)
    try:
        rul = mixture_mean(params, weibull_mean=weibull_mean)
    except MeanUndefinedError as exc:
        raise MeanUndefinedError(f"{exc}; params={params}") from exc
    return Prediction(asset_id, rul, params, true_rul)


def predict_batch(windows, model: nw.ModelParams, asset_ids, true_rul=None,
                  window_index=None, weibull_mean: str = "standard") -> list[Prediction]:
    head = nw.forward_batch(windows, model)
    preds = []
    for i in range(head.mu.shape[0]):
        params = head.params(i, model.spec)
        msg = validate(params, need_mean=True)
        if msg is not None:
            raise MeanUndefinedError(f"asset {int(asset_ids[i])}: {msg}; params={params}")
        rul = mixture_mean(params, weibull_mean=weibull_mean)
        t = None if true_rul is None or np.isnan(true_rul[i]) else float(true_rul[i])
        w = 1 if window_index is None else int(window_index[i])
        preds.append(Prediction(int(asset_ids[i]), rul, params, t, w))
    return preds


def _deltas(predictions: Sequence[Prediction]) -> np.ndarray:
    if len(predictions) == 0:
        raise ValueError("no predictions")
    return np.array([p.delta for p in predictions], dtype=float)


def rmse(predictions: Sequence[Prediction]) -> float:
    d = _deltas(predictions)
    return math.sqrt(math.fsum(d * d) / d.size)


def score_values(delta) -> np.ndarray:
    """Asymmetric exponential penalty; late (positive delta) predictions cost more."""
    d = np.asarray(delta, dtype=float)
    return np.where(d < 0, np.expm1(-d / EARLY_DENOM), np.expm1(d / LATE_DENOM))


def score(predictions: Sequence[Prediction]) -> tuple[float, list[float]]:
    per = score_values(_deltas(predictions))
    return math.fsum(per), per.tolist()


def rae(predictions: Sequence[Prediction]) -> list[float]:
    """|delta| / |true RUL|; assets with a zero true RUL are skipped."""
    out = []
    for p in predictions:
        if p.true_rul == 0:
            logger.warning("asset %d has true RUL 0; excluded from RAE", p.asset_id)
            continue
        out.append(abs(p.delta) / abs(p.true_rul))
    return out


def boxplot_summary(values) -> dict:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return {"n": 0}
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75])
    return {"n": int(v.size), "median": float(med), "q1": float(q1), "q3": float(q3),
            "iqr": float(q3 - q1), "min": float(v.min()), "max": float(v.max())}


def evaluate_predictions(predictions: list[Prediction], mode: str, cap_true_rul: bool,
                         weibull_mean: str) -> EvalReport:
    total, per = score(predictions)
    r = rae(predictions)
    return EvalReport(
        rmse=rmse(predictions), score_total=total, score_mean=total / len(per),
        score_per_asset=per, rae_per_asset=r, rae_summary=boxplot_summary(r),
        n_t=len(predictions), mode=mode, cap_true_rul=cap_true_rul,
        weibull_mean=weibull_mean, predictions=predictions,
    )


def evaluate_fleet(test_traces: Sequence[EngineTrace], model: nw.ModelParams,
                   window: int, mode: str = "final-window",
                   cap: float | None = DEFAULT_RUL_CAP, weibull_mean: str = "standard"
                   ) -> EvalReport:
    """Predict normalised test traces and score them against their true RULs.

    ``final-window`` gives one prediction per engine from its latest ``window``
    rows; ``all-windows`` scores every window with a positive true RUL.
    ``cap`` caps the true RUL (``None`` leaves it uncapped).
    """
    if mode not in ("final-window", "all-windows"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    wmode = "infer" if mode == "final-window" else "all"
    samples = make_windows(test_traces, window, mode=wmode, cap=cap)
    preds = predict_batch(samples.windows, model, samples.asset_ids, samples.targets,
                          samples.window_index, weibull_mean)
    return evaluate_predictions(preds, mode, cap is not None, weibull_mean)


def write_predictions_csv(path, predictions: Sequence[Prediction], K: int) -> None:
    header = ["asset_id", "predicted_rul", "true_rul", "delta", "score", "rae"]
    for k in range(1, K + 1):
        header += [f"mu_{k}", f"sigma_{k}", f"lambda_{k}"]
    header.append("window_index")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for p in predictions:
            if p.true_rul is None:
                extra = ["", "", "", ""]
            else:
                d = p.delta
                r = "" if p.true_rul == 0 else repr(abs(d) / abs(p.true_rul))
                extra = [repr(float(p.true_rul)), repr(d), repr(float(score_values(d))), r]
            row = [p.asset_id, repr(p.predicted_rul)] + extra
            for c, lam in zip(p.params.components, p.params.weights):
                row += [repr(c.mu), repr(c.sigma), repr(lam)]
            row.append(p.window_index)
            w.writerow(row)
