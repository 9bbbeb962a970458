"""Run configuration: a flat JSON object validated against a fixed key set.

See ``docs/config.md`` for the schema. Unknown keys are an error, and every
command writes the fully resolved configuration next to its outputs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .dataset import DEFAULT_RUL_CAP
from .errors import ConfigError
from .training import TrainConfig

# Tables of tuned settings, K = 2 components (FD003 has two failure modes).
PRESETS: dict[str, dict] = {
    "dlbp1-mln": dict(model="dlbp1", families=["lognormal"] * 2, window=30, lstm_units=[128],
                      fc_units=[64, 32], batch_size=512, epochs=250,
                      head_activations=["elu"] * 2 + ["softplus"] * 2 + ["sigmoid"] * 2),
    "dlbp1-mw": dict(model="dlbp1", families=["weibull"] * 2, window=30, lstm_units=[128, 64],
                     fc_units=[64], batch_size=512, epochs=250,
                     head_activations=["softplus"] * 4 + ["sigmoid"] * 2),
    "dlbp1-mll": dict(model="dlbp1", families=["loglogistic"] * 2, window=30, lstm_units=[64],
                      fc_units=[128], batch_size=512, epochs=250,
                      head_activations=["softplus"] * 2 + ["softplus_plus_one"] * 2
                      + ["sigmoid"] * 2),
    "dlbp2-mln": dict(model="dlbp2", families=["lognormal"] * 2, window=30,
                      lstm_units=[256, 128], fc_units=[64], batch_size=512, epochs=250,
                      head_activations=["elu"] * 2 + ["sigmoid"] * 2),
    "dlbp2-mw": dict(model="dlbp2", families=["weibull"] * 2, window=25, lstm_units=[256, 64],
                     fc_units=[128], batch_size=512, epochs=250,
                     head_activations=["softplus"] * 2 + ["sigmoid"] * 2),
    "dlbp2-mll": dict(model="dlbp2", families=["loglogistic"] * 2, window=25, lstm_units=[64],
                      fc_units=[128, 32], batch_size=512, epochs=200,
                      head_activations=["softplus"] * 2 + ["sigmoid"] * 2),
}

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data_dir: str | None = None
    dataset_id: str = "FD003"
    dataset_file: str | None = None
    out_dir: str = "runs/default"
    rul_cap: float = DEFAULT_RUL_CAP
    stride: int = 1
    eval_mode: str = "final-window"
    cap_true_rul: bool = True
    weibull_mean: str = "standard"
    threads: int | None = None

    def __post_init__(self):
        if self.eval_mode not in ("final-window", "all-windows"):
            raise ConfigError("eval_mode must be final-window or all-windows")
        if self.weibull_mean not in ("standard", "squared"):
            raise ConfigError("weibull_mean must be standard or squared")
        if self.rul_cap <= 0 or self.stride < 1:
            raise ConfigError("rul_cap must be > 0 and stride >= 1")

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "train"}
        d.update(self.train.to_dict())
        return d

    def hash(self) -> str:
        d = self.to_dict()
        for k in ("out_dir", "threads"):
            d.pop(k, None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        preset = raw.pop("preset", None)
        merged: dict = {}
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
            merged.update(PRESETS[preset])
        merged.update(raw)
        run_keys = {f.name for f in fields(cls)} - {"train"}
        unknown = set(merged) - run_keys - _TRAIN_KEYS
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        train_kw = {k: v for k, v in merged.items() if k in _TRAIN_KEYS}
        run_kw = {k: v for k, v in merged.items() if k in run_keys}
        try:
            tc = TrainConfig(**train_kw)
            return cls(train=tc, **run_kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig.from_dict(raw)


def write_resolved(cfg: RunConfig, out_dir: Path, extra: dict | None = None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    d = cfg.to_dict()
    d["config_hash"] = cfg.hash()
    if extra:
        d.update(extra)
    p = out_dir / "config.resolved.json"
    p.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
    return p
