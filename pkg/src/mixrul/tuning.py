"""Block-coordinate hyperparameter search.

Blocks are optimised one at a time in a fixed order: window width, layer
counts, unit counts, batch size, epochs. Every candidate is trained on
``repeats`` seeded engine-level 90/10 splits and scored by mean validation
RMSE; the winner is frozen before the next block starts. Blocks not yet
optimised sit at their defaults.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import network as nw
from .dataset import EngineTrace, make_windows, split_train_val
from .evaluation import rmse, predict_batch
from .training import TrainConfig, train

logger = logging.getLogger(__name__)

BLOCK_ORDER = ("window", "layers", "units", "batch", "epochs")


@dataclass
class TuneGrid:
    window: Sequence[int] = (15, 20, 25, 30, 35)
    n_lstm: Sequence[int] = (1, 2)
    n_fc: Sequence[int] = (1, 2)
    lstm_unit: Sequence[int] = (64, 128, 256)
    fc_unit: Sequence[int] = (32, 64, 128)
    batch_size: Sequence[int] = (128, 256, 512)
    epochs: Sequence[int] = (120, 150, 200, 250)
    defaults: dict = field(default_factory=lambda: {
        "window": 30, "n_lstm": 1, "n_fc": 2, "lstm_unit": 128, "fc_unit": 64,
        "batch_size": 512, "epochs": 200,
    })
    repeats: int = 5
    fraction: float = 0.9

    @classmethod
    def from_dict(cls, d: dict) -> "TuneGrid":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown grid keys {sorted(unknown)}")
        kw = dict(d)
        if "defaults" in kw:
            kw["defaults"] = {**cls().defaults, **kw["defaults"]}
        return cls(**kw)

    def blocks(self) -> list[tuple[str, list[dict]]]:
        return [
            ("window", [{"window": w} for w in self.window]),
            ("layers", [{"n_lstm": a, "n_fc": b} for a in self.n_lstm for b in self.n_fc]),
            ("units", [{"lstm_unit": u, "fc_unit": v} for u in self.lstm_unit
                       for v in self.fc_unit]),
            ("batch", [{"batch_size": b} for b in self.batch_size]),
            ("epochs", [{"epochs": e} for e in self.epochs]),
        ]

    def n_trainings(self) -> int:
        return sum(len(c) for _, c in self.blocks()) * self.repeats


def settings_to_config(settings: dict, base: TrainConfig) -> TrainConfig:
    return dataclasses.replace(
        base,
        window=int(settings["window"]),
        lstm_units=(int(settings["lstm_unit"]),) * int(settings["n_lstm"]),
        fc_units=(int(settings["fc_unit"]),) * int(settings["n_fc"]),
        batch_size=int(settings["batch_size"]),
        epochs=int(settings["epochs"]),
    )


def parameter_count(cfg: TrainConfig, n_features: int) -> int:
    """Trainable weights of the network described by ``cfg``."""
    total, n_in = 0, n_features
    for h in cfg.lstm_units:
        total += 4 * h * (n_in + h + 1)
        n_in = h
    for u in cfg.fc_units:
        total += u * (n_in + 1)
        n_in = u
    K = len(cfg.families)
    q = 3 * K if cfg.model == nw.DLBP1 else 2 * K
    return total + q * (n_in + 1)


def validation_rmse(traces: Sequence[EngineTrace], cfg: TrainConfig, split_seed: int,
                    fraction: float, cap: float) -> float:
    samples = make_windows(traces, cfg.window, cap=cap)
    tr, va = split_train_val(samples, fraction, split_seed)
    result = train(tr, cfg)
    preds = predict_batch(va.windows, result.model, va.asset_ids, va.targets, va.window_index)
    return rmse(preds)


@dataclass
class TuneResult:
    best: dict
    config: TrainConfig
    rows: list[dict]
    winners: dict


def tune(traces: Sequence[EngineTrace], base: TrainConfig, grid: TuneGrid, seed: int = 0,
         cap: float = 125, scorer: Callable[..., float] | None = None) -> TuneResult:
    """Run the block search; ``scorer(traces, cfg, split_seed, fraction, cap)`` is injectable."""
    scorer = scorer or validation_rmse
    n_features = traces[0].signals.shape[1]
    current = dict(grid.defaults)
    rows: list[dict] = []
    winners = {}
    for block, candidates in grid.blocks():
        summary = []
        for ci, cand in enumerate(candidates):
            settings = {**current, **cand}
            scores = []
            failed = False
            for r in range(grid.repeats):
                split_seed = seed + 1000 * r
                cfg = settings_to_config(settings, dataclasses.replace(base, seed=seed + r))
                try:
                    value = float(scorer(traces, cfg, split_seed, grid.fraction, cap))
                    status = "ok" if math.isfinite(value) else "failed"
                except Exception as exc:  # any training failure marks the candidate
                    logger.warning("block %s candidate %s repeat %d failed: %s",
                                   block, cand, r, exc)
                    value, status = float("nan"), f"failed: {type(exc).__name__}"
                failed |= status != "ok"
                scores.append(value)
                rows.append({
                    "block": block, "candidate": ci, "settings": json.dumps(cand, sort_keys=True),
                    "repeat": r, "seed": seed + r, "split_seed": split_seed, "rmse": value,
                    "n_params": parameter_count(cfg, n_features), "status": status,
                })
            mean = float("nan") if failed else float(np.mean(scores))
            summary.append((mean, parameter_count(settings_to_config(settings, base), n_features),
                            ci, cand))
        ok = [s for s in summary if math.isfinite(s[0])]
        if not ok:
            logger.warning("every candidate in block %s failed; keeping defaults", block)
            winners[block] = None
            continue
        best = min(ok, key=lambda s: (s[0], s[1], s[2]))
        winners[block] = {"candidate": best[2], "settings": best[3], "mean_rmse": best[0]}
        current.update(best[3])
        logger.info("block %s -> %s (mean RMSE %.4f)", block, best[3], best[0])
    return TuneResult(current, settings_to_config(current, base), rows, winners)


def write_trace(path, rows: list[dict]) -> None:
    cols = ["block", "candidate", "settings", "repeat", "seed", "split_seed", "rmse",
            "n_params", "status"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\r\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "rmse": repr(r["rmse"])})
