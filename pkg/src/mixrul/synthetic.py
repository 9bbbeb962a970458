"""Synthetic run-to-failure fleets in C-MAPSS text format.

Used for tests, demos and timing when the NASA files are not at hand. Each
engine degrades through one of two failure modes; the mode decides which
sensors respond, sensors 1, 5, 16, 18 and 19 are constant (as in FD003), and
failure happens when a latent damage index crosses 1.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset import N_SENSORS

CONSTANT_SENSORS = (1, 5, 16, 18, 19)


def simulate_engine(rng: np.random.Generator, min_life: int = 128, max_life: int = 360
                    ) -> tuple[np.ndarray, np.ndarray, int]:
    """Return (op_settings, sensors, mode) for one run-to-failure engine."""
    mode = int(rng.integers(0, 2))
    life = int(rng.integers(min_life, max_life + 1))
    t = np.arange(1, life + 1) / life
    onset = rng.uniform(0.2, 0.5)
    damage = np.clip((t - onset) / (1 - onset), 0, None) ** rng.uniform(1.5, 2.5)
    base = 100.0 + 10.0 * np.arange(N_SENSORS)
    gain = np.zeros(N_SENSORS)
    active = [1, 2, 3, 6, 7, 10, 11, 13] if mode == 0 else [2, 3, 8, 9, 10, 12, 14, 16]
    gain[active] = rng.uniform(0.5, 2.0, len(active)) * rng.choice([-1, 1], len(active))
    sensors = base + damage[:, None] * gain[None, :] * 5.0
    sensors += rng.normal(0, 0.3, sensors.shape)
    for s in CONSTANT_SENSORS:
        sensors[:, s - 1] = base[s - 1]
    ops = np.tile([0.0, 0.0, 100.0], (life, 1)) + rng.normal(0, 1e-3, (life, 3))
    return ops, sensors, mode


def _rows(unit: int, ops, sensors) -> list[str]:
    out = []
    for c in range(sensors.shape[0]):
        vals = [f"{unit}", f"{c + 1}"] + [f"{v:.4f}" for v in ops[c]] + \
            [f"{v:.4f}" for v in sensors[c]]
        out.append(" ".join(vals))
    return out


def write_fleet(out_dir, dataset_id: str = "FD003", n_train: int = 100, n_test: int = 100,
                seed: int = 0, min_life: int = 128, max_life: int = 360) -> Path:
    """Write ``train_/test_/RUL_<dataset_id>.txt`` under ``out_dir``."""
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for u in range(1, n_train + 1):
        ops, s, _ = simulate_engine(rng, min_life, max_life)
        lines += _rows(u, ops, s)
    (out / f"train_{dataset_id}.txt").write_text("\n".join(lines) + "\n")
    lines, ruls = [], []
    for u in range(1, n_test + 1):
        ops, s, _ = simulate_engine(rng, min_life, max_life)
        cut = int(rng.integers(max(10, s.shape[0] // 4), s.shape[0]))
        lines += _rows(u, ops[:cut], s[:cut])
        ruls.append(s.shape[0] - cut)
    (out / f"test_{dataset_id}.txt").write_text("\n".join(lines) + "\n")
    (out / f"RUL_{dataset_id}.txt").write_text("\n".join(str(r) for r in ruls) + "\n")
    return out
