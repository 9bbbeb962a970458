"""C-MAPSS ingestion, sensor filtering, min-max scaling and sliding windows."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataFormatError

logger = logging.getLogger(__name__)

N_OP_SETTINGS = 3
N_SENSORS = 21
N_COLUMNS = 2 + N_OP_SETTINGS + N_SENSORS
CONSTANT_TOL = 1e-12
DEFAULT_RUL_CAP = 125


@dataclass
class EngineTrace:
    asset_id: int
    cycles: np.ndarray
    op_settings: np.ndarray
    signals: np.ndarray
    failure_time: int
    sensor_ids: tuple[int, ...] = tuple(range(1, N_SENSORS + 1))
    normalized: bool = False

    @property
    def n(self) -> int:
        return int(self.signals.shape[0])

    @property
    def observed_rul(self) -> int:
        """RUL at the last observed cycle (0 for run-to-failure traces)."""
        return int(self.failure_time - self.n)

    def replace(self, **changes) -> "EngineTrace":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class NormalizationStats:
    sensor_ids: tuple[int, ...]
    minimum: np.ndarray
    maximum: np.ndarray

    def to_dict(self) -> dict:
        return {
            "sensor_ids": list(self.sensor_ids),
            "min": [float(v) for v in self.minimum],
            "max": [float(v) for v in self.maximum],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(
            tuple(int(s) for s in d["sensor_ids"]),
            np.asarray(d["min"], dtype=float),
            np.asarray(d["max"], dtype=float),
        )

    def matches(self, other: "NormalizationStats") -> bool:
        return (
            self.sensor_ids == other.sensor_ids
            and np.array_equal(self.minimum, other.minimum)
            and np.array_equal(self.maximum, other.maximum)
        )


@dataclass
class WindowedSamples:
    """A stack of fixed-length windows, ordered by (asset_id, window_index).

    ``targets`` holds the (capped) RUL of each window for training data and the
    true RUL for labelled test windows; it is NaN when unknown.
    """

    windows: np.ndarray  # (n, T_w, P)
    targets: np.ndarray  # (n,)
    asset_ids: np.ndarray  # (n,) int
    window_index: np.ndarray  # (n,) int, 1-based within its asset

    def __post_init__(self):
        n = self.windows.shape[0]
        for name in ("targets", "asset_ids", "window_index"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have shape ({n},)")

    def __len__(self) -> int:
        return int(self.windows.shape[0])

    @property
    def window_width(self) -> int:
        return int(self.windows.shape[1])

    @property
    def n_features(self) -> int:
        return int(self.windows.shape[2])

    def subset(self, idx) -> "WindowedSamples":
        return WindowedSamples(
            self.windows[idx], self.targets[idx], self.asset_ids[idx], self.window_index[idx]
        )

    @classmethod
    def concat(cls, parts: Sequence["WindowedSamples"], T_w: int, P: int) -> "WindowedSamples":
        if not parts:
            return cls(np.zeros((0, T_w, P)), np.zeros(0), np.zeros(0, dtype=np.int64),
                       np.zeros(0, dtype=np.int64))
        return cls(
            np.concatenate([p.windows for p in parts]),
            np.concatenate([p.targets for p in parts]),
            np.concatenate([p.asset_ids for p in parts]),
            np.concatenate([p.window_index for p in parts]),
        )


# ---------------------------------------------------------------------------
# loading


def _parse_rows(path: Path) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != N_COLUMNS:
                raise DataFormatError(
                    f"{path}:{lineno}: expected {N_COLUMNS} columns, found {len(parts)}"
                )
            try:
                rows.append([float(v) for v in parts])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            if not float(parts[0]).is_integer() or not float(parts[1]).is_integer():
                raise DataFormatError(f"{path}:{lineno}: unit id and cycle must be integers")
            rows[-1].append(float(lineno))
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    return np.asarray(rows)


def read_rul_file(path: str | Path) -> list[int]:
    path = Path(path)
    values = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 1:
                raise DataFormatError(f"{path}:{lineno}: expected a single RUL value")
            try:
                v = float(parts[0])
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: not a number: {parts[0]!r}") from None
            if not v.is_integer() or v < 0:
                raise DataFormatError(f"{path}:{lineno}: RUL must be a non-negative integer")
            values.append(int(v))
    if not values:
        raise DataFormatError(f"{path}: no RUL values")
    return values


def load_cmapss(path: str | Path, kind: str = "train", rul_path: str | Path | None = None
                ) -> list[EngineTrace]:
    """Read a C-MAPSS ``train_FDxxx.txt`` / ``test_FDxxx.txt`` file.

    Test files need the matching ``RUL_FDxxx.txt``; the i-th value belongs to
    the i-th unit in ascending unit-id order.
    """
    if kind not in ("train", "test"):
        raise ValueError("kind must be 'train' or 'test'")
    path = Path(path)
    data = _parse_rows(path)
    if kind == "test" and rul_path is None:
        raise DataFormatError(f"{path}: test data requires an RUL file")
    ruls = read_rul_file(rul_path) if kind == "test" else None

    traces = []
    unit_col = data[:, 0].astype(np.int64)
    for u_idx, unit in enumerate(np.unique(unit_col)):
        rows = data[unit_col == unit]
        rows = rows[np.argsort(rows[:, 1], kind="stable")]
        cycles = rows[:, 1].astype(np.int64)
        expected = np.arange(1, len(cycles) + 1)
        if not np.array_equal(cycles, expected):
            bad = int(np.argmax(cycles != expected))
            raise DataFormatError(
                f"{path}:{int(rows[bad, -1])}: unit {unit} cycles are not contiguous from 1 "
                f"(found cycle {cycles[bad]}, expected {expected[bad]})"
            )
        n = len(cycles)
        if ruls is not None:
            if u_idx >= len(ruls):
                raise DataFormatError(f"{rul_path}: missing RUL entry for unit {unit} "
                                      f"(line {u_idx + 1})")
            y = n + ruls[u_idx]
        else:
            y = n
        traces.append(EngineTrace(
            asset_id=int(unit),
            cycles=cycles,
            op_settings=rows[:, 2:5].copy(),
            signals=rows[:, 5:5 + N_SENSORS].copy(),
            failure_time=int(y),
        ))
    if ruls is not None and len(ruls) != len(traces):
        raise DataFormatError(f"{rul_path}: {len(ruls)} RUL values for {len(traces)} units")
    return traces


def load_fd(data_dir: str | Path, dataset_id: str = "FD003"
            ) -> tuple[list[EngineTrace], list[EngineTrace]]:
    """Load the train and test traces of one C-MAPSS subset from a directory."""
    d = Path(data_dir)
    train = load_cmapss(d / f"train_{dataset_id}.txt", "train")
    rul = d / f"RUL_{dataset_id}.txt"
    if not rul.exists():
        raise DataFormatError(f"missing RUL file {rul}")
    test = load_cmapss(d / f"test_{dataset_id}.txt", "test", rul)
    return train, test


# ---------------------------------------------------------------------------
# sensors and scaling


def drop_constant_sensors(traces: Sequence[EngineTrace], tol: float = CONSTANT_TOL
                          ) -> tuple[list[EngineTrace], list[int]]:
    if not traces:
        raise ValueError("need at least one trace")
    stacked = np.concatenate([t.signals for t in traces])
    spread = stacked.max(axis=0) - stacked.min(axis=0)
    keep = np.flatnonzero(spread >= tol)
    if keep.size == 0:
        raise ValueError("every sensor is constant over the fleet")
    sensor_ids = traces[0].sensor_ids
    kept_ids = [sensor_ids[j] for j in keep]
    dropped = [sensor_ids[j] for j in range(len(sensor_ids)) if j not in set(keep)]
    if dropped:
        logger.info("dropping constant sensors %s", dropped)
    return select_sensors(traces, kept_ids), kept_ids


def select_sensors(traces: Iterable[EngineTrace], sensor_ids: Sequence[int]) -> list[EngineTrace]:
    out = []
    for t in traces:
        pos = [t.sensor_ids.index(s) for s in sensor_ids]
        out.append(t.replace(signals=t.signals[:, pos], sensor_ids=tuple(sensor_ids)))
    return out


def fit_normalization(traces: Sequence[EngineTrace]) -> NormalizationStats:
    """Per-sensor min/max over a (training) fleet."""
    stacked = np.concatenate([t.signals for t in traces])
    return NormalizationStats(traces[0].sensor_ids, stacked.min(axis=0), stacked.max(axis=0))


def apply_normalization(traces: Sequence[EngineTrace], stats: NormalizationStats
                        ) -> list[EngineTrace]:
    """Min-max scale with training stats; values outside the training range are kept."""
    span = stats.maximum - stats.minimum
    if np.any(span <= 0):
        bad = [s for s, v in zip(stats.sensor_ids, span) if v <= 0]
        raise ValueError(f"zero range for sensors {bad}")
    out = []
    for t in traces:
        if t.normalized:
            raise ValueError(f"trace {t.asset_id} is already normalized")
        if t.sensor_ids != stats.sensor_ids:
            raise ValueError(f"trace {t.asset_id} sensors {t.sensor_ids} do not match stats "
                             f"{stats.sensor_ids}")
        out.append(t.replace(signals=(t.signals - stats.minimum) / span, normalized=True))
    return out


def cap_rul(target, cap: float = DEFAULT_RUL_CAP):
    return np.minimum(target, cap)


# ---------------------------------------------------------------------------
# sliding windows


def _window_ends(n: int, failure_time: int, T_w: int, stride: int, training: bool) -> np.ndarray:
    """1-based last-row indices of the windows to emit."""
    if n < T_w:
        ends = np.array([n])
    else:
        # stride runs backwards from the final row so the latest window is always kept
        ends = np.arange(n, T_w - 1, -stride)[::-1]
    if training:
        ends = ends[failure_time - ends > 0]
    return ends


def sliding_window(trace: EngineTrace, T_w: int, stride: int = 1, mode: str = "train",
                   cap: float | None = DEFAULT_RUL_CAP) -> WindowedSamples:
    """Cut a trace into ``T_w``-row windows.

    ``mode``:
      * ``"train"``  every window whose RUL (failure_time - last row) is positive;
      * ``"infer"``  only the final window, target = observed RUL if known;
      * ``"all"``    like train but for labelled test traces.

    The target of window j is ``failure_time - T_w - (j - 1)``. Traces shorter
    than ``T_w`` are left-padded with zero rows.
    """
    if T_w < 1 or stride < 1:
        raise ValueError("T_w and stride must be >= 1")
    if mode not in ("train", "infer", "all"):
        raise ValueError(f"unknown window mode {mode!r}")
    X = trace.signals
    n, P = X.shape
    if n < T_w:
        X = np.vstack([np.zeros((T_w - n, P)), X])
    if mode == "infer":
        ends = np.array([n])
    else:
        ends = _window_ends(n, trace.failure_time, T_w, stride, training=True)
    offset = max(T_w - n, 0)
    windows = np.stack([X[e + offset - T_w:e + offset] for e in ends]) if len(ends) else \
        np.zeros((0, T_w, P))
    targets = (trace.failure_time - ends).astype(float)
    if cap is not None:
        targets = cap_rul(targets, cap)
    first_end = min(T_w, n)
    index = (ends - first_end) if stride == 1 else np.arange(len(ends))
    return WindowedSamples(
        windows=windows,
        targets=targets,
        asset_ids=np.full(len(ends), trace.asset_id, dtype=np.int64),
        window_index=(index + 1).astype(np.int64),
    )


def make_windows(traces: Sequence[EngineTrace], T_w: int, stride: int = 1, mode: str = "train",
                 cap: float | None = DEFAULT_RUL_CAP) -> WindowedSamples:
    P = traces[0].signals.shape[1] if traces else 0
    parts = [sliding_window(t, T_w, stride, mode, cap)
             for t in sorted(traces, key=lambda t: t.asset_id)]
    return WindowedSamples.concat(parts, T_w, P)


def split_train_val(samples: WindowedSamples, fraction: float = 0.9, seed: int = 0
                    ) -> tuple[WindowedSamples, WindowedSamples]:
    """Random split by asset so no engine contributes to both sides."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    assets = np.unique(samples.asset_ids)
    if assets.size < 2:
        raise ValueError("need at least two assets to split")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(assets)
    n_train = int(round(fraction * assets.size))
    n_train = min(max(n_train, 1), assets.size - 1)
    train_assets = np.sort(perm[:n_train])
    mask = np.isin(samples.asset_ids, train_assets)
    return samples.subset(np.flatnonzero(mask)), samples.subset(np.flatnonzero(~mask))


@dataclass
class PreparedData:
    """Output of the standard preprocessing pipeline."""

    train_traces: list[EngineTrace]
    test_traces: list[EngineTrace] | None
    stats: NormalizationStats
    kept_sensors: list[int]
    extra: dict = field(default_factory=dict)


def prepare(train: Sequence[EngineTrace], test: Sequence[EngineTrace] | None = None
            ) -> PreparedData:
    """Drop constant sensors, fit scaling on ``train``, apply to both sets."""
    train_f, kept = drop_constant_sensors(train)
    stats = fit_normalization(train_f)
    train_n = apply_normalization(train_f, stats)
    test_n = None
    if test is not None:
        test_n = apply_normalization(select_sensors(test, kept), stats)
    return PreparedData(train_n, test_n, stats, kept)
