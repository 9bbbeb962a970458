import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixrul.dataset import (
    NormalizationStats, apply_normalization, cap_rul, drop_constant_sensors, fit_normalization,
    load_cmapss, load_fd, make_windows, sliding_window, split_train_val,
)
from mixrul.errors import DataFormatError
from mixrul.synthetic import CONSTANT_SENSORS

from conftest import make_trace


def brute_force_windows(n, y, T_w, cap=None):
    """Enumerate windows straight from the definition: rows [j, j+T_w-1], target y-T_w-(j-1)."""
    if n < T_w:
        cands = [(1, y - n)]
    else:
        cands = [(j, y - T_w - (j - 1)) for j in range(1, n - T_w + 2)]
    out = [(j, t) for j, t in cands if t > 0]
    if cap is not None:
        out = [(j, min(t, cap)) for j, t in out]
    return out


class TestSlidingWindow:
    def test_small_example(self):
        tr = make_trace(1, np.arange(10.0).reshape(5, 2))
        s = sliding_window(tr, 3)
        assert len(s) == 2
        np.testing.assert_array_equal(s.targets, [2, 1])
        np.testing.assert_array_equal(s.windows[0], tr.signals[0:3])
        np.testing.assert_array_equal(s.windows[1], tr.signals[1:4])

    def test_long_engine_targets(self):
        tr = make_trace(1, np.zeros((320, 1)), failure_time=320)
        T_w = 30
        s = sliding_window(tr, T_w, cap=None)
        assert s.targets[0] == 320 - T_w
        assert s.targets[49] == 320 - T_w - 49

    def test_inference_padding(self):
        tr = make_trace(1, [[5.0, 6.0], [7.0, 8.0]], failure_time=10)
        s = sliding_window(tr, 3, mode="infer")
        assert len(s) == 1
        np.testing.assert_array_equal(s.windows[0], [[0, 0], [5, 6], [7, 8]])
        assert s.targets[0] == 8

    def test_inference_takes_latest_rows(self):
        sig = np.arange(20.0).reshape(10, 2)
        s = sliding_window(make_trace(1, sig, failure_time=15), 4, mode="infer")
        np.testing.assert_array_equal(s.windows[0], sig[-4:])

    def test_cap_after_windowing(self):
        tr = make_trace(1, np.zeros((200, 1)), failure_time=200)
        s = sliding_window(tr, 10)
        assert s.targets.max() == 125
        assert s.targets[-1] == 200 - 10 - (len(s) - 1)

    @settings(max_examples=1000, deadline=None)
    @given(n=st.integers(1, 80), extra=st.integers(0, 60), T_w=st.integers(1, 40))
    def test_matches_enumeration(self, n, extra, T_w):
        y = n + extra
        sig = np.arange(n, dtype=float)[:, None] + 1.0
        s = sliding_window(make_trace(1, sig, failure_time=y), T_w, cap=None)
        oracle = brute_force_windows(n, y, T_w)
        assert len(s) == len(oracle)
        np.testing.assert_array_equal(s.targets, [t for _, t in oracle])
        for row, (j, _) in zip(s.windows, oracle):
            if n >= T_w:
                np.testing.assert_array_equal(row[:, 0], sig[j - 1:j - 1 + T_w, 0])
        assert np.all(s.targets > 0)


class TestCap:
    @pytest.mark.parametrize("v, want", [(320, 125), (80, 80), (125, 125)])
    def test_values(self, v, want):
        assert cap_rul(v) == want


class TestSensors:
    def test_drop_one_constant(self):
        sig = np.c_[np.arange(6.0), np.full(6, 3.0), np.arange(6.0) ** 2]
        out, kept = drop_constant_sensors([make_trace(1, sig)])
        assert kept == [1, 3]
        np.testing.assert_array_equal(out[0].signals, sig[:, [0, 2]])

    def test_identity(self):
        sig = np.arange(12.0).reshape(6, 2)
        out, kept = drop_constant_sensors([make_trace(1, sig)])
        assert kept == [1, 2]

    def test_all_constant(self):
        with pytest.raises(ValueError):
            drop_constant_sensors([make_trace(1, np.ones((4, 3)))])

    def test_synthetic_fleet_keeps_sixteen(self, small_prepared):
        assert len(small_prepared.kept_sensors) == 16
        assert not set(CONSTANT_SENSORS) & set(small_prepared.kept_sensors)


class TestNormalization:
    def test_column(self):
        tr = make_trace(1, [[2.0], [4.0], [6.0]])
        out = apply_normalization([tr], fit_normalization([tr]))
        np.testing.assert_allclose(out[0].signals[:, 0], [0, 0.5, 1])

    def test_no_clipping(self):
        stats = NormalizationStats((1,), np.array([0.0]), np.array([10.0]))
        out = apply_normalization([make_trace(1, [[12.0]])], stats)
        assert out[0].signals[0, 0] == pytest.approx(1.2)

    def test_training_range(self, small_prepared):
        allv = np.concatenate([t.signals for t in small_prepared.train_traces])
        assert allv.min() == 0.0 and allv.max() == 1.0

    def test_double_normalization_rejected(self, small_prepared):
        with pytest.raises(ValueError):
            apply_normalization(small_prepared.train_traces, small_prepared.stats)

    def test_zero_span(self):
        stats = NormalizationStats((1,), np.array([1.0]), np.array([1.0]))
        with pytest.raises(ValueError):
            apply_normalization([make_trace(1, [[1.0]])], stats)

    def test_stats_round_trip(self, small_prepared):
        d = small_prepared.stats.to_dict()
        assert NormalizationStats.from_dict(d).matches(small_prepared.stats)


class TestSplit:
    def _samples(self, n_assets=100):
        traces = [make_trace(i + 1, np.random.default_rng(i).normal(size=(20, 2)))
                  for i in range(n_assets)]
        return make_windows(traces, 5)

    def test_ninety_ten(self):
        tr, va = split_train_val(self._samples(), 0.9, seed=3)
        assert np.unique(tr.asset_ids).size == 90
        assert np.unique(va.asset_ids).size == 10

    def test_disjoint_and_complete(self):
        s = self._samples()
        tr, va = split_train_val(s, 0.9, seed=3)
        assert not set(tr.asset_ids) & set(va.asset_ids)
        assert len(tr) + len(va) == len(s)

    def test_deterministic(self):
        s = self._samples()
        a = split_train_val(s, 0.9, seed=11)[1].asset_ids
        b = split_train_val(s, 0.9, seed=11)[1].asset_ids
        np.testing.assert_array_equal(a, b)

    def test_needs_two_assets(self):
        with pytest.raises(ValueError):
            split_train_val(self._samples(1), 0.9, 0)


class TestParsing:
    def test_empty_file(self, tmp_path):
        p = tmp_path / "train_FD003.txt"
        p.write_text("")
        with pytest.raises(DataFormatError):
            load_cmapss(p, "train")

    def test_short_row_names_line(self, tmp_path):
        p = tmp_path / "train_FD003.txt"
        good = " ".join(["1", "1"] + ["0.5"] * 24)
        p.write_text(good + "\n1 2 0.1 0.2\n")
        with pytest.raises(DataFormatError, match=":2"):
            load_cmapss(p, "train")

    def test_non_contiguous_cycles(self, tmp_path):
        p = tmp_path / "train_FD003.txt"
        rows = [" ".join(["1", str(c)] + ["0.5"] * 24) for c in (1, 2, 4)]
        p.write_text("\n".join(rows) + "\n")
        with pytest.raises(DataFormatError, match="contiguous"):
            load_cmapss(p, "train")

    def test_missing_rul_entry(self, small_fleet_dir, tmp_path):
        rul = tmp_path / "RUL.txt"
        rul.write_text("5\n6\n")
        with pytest.raises(DataFormatError, match="RUL"):
            load_cmapss(small_fleet_dir / "test_FD003.txt", "test", rul)

    def test_missing_rul_file(self, small_fleet_dir, tmp_path):
        for name in ("train_FD003.txt", "test_FD003.txt"):
            (tmp_path / name).write_bytes((small_fleet_dir / name).read_bytes())
        with pytest.raises(DataFormatError, match="RUL"):
            load_fd(tmp_path, "FD003")

    def test_fleet_counts(self, small_fleet_dir):
        train, test = load_fd(small_fleet_dir)
        assert len(train) == 12 and len(test) == 6
        rul = [int(v) for v in (small_fleet_dir / "RUL_FD003.txt").read_text().split()]
        assert [t.failure_time - t.n for t in test] == rul
