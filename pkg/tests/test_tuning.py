import json

import pytest

from mixrul.training import TrainConfig
from mixrul.tuning import BLOCK_ORDER, TuneGrid, parameter_count, tune, write_trace
from mixrul import network as nw
from mixrul.distributions import MixtureSpec


class Recorder:
    """Scorer stand-in that logs every call and returns a chosen value."""

    def __init__(self, fn=lambda cfg: 1.0):
        self.calls = []
        self.fn = fn

    def __call__(self, traces, cfg, split_seed, fraction, cap):
        self.calls.append((cfg, split_seed, fraction, cap))
        return self.fn(cfg)


@pytest.fixture
def traces(small_prepared):
    return small_prepared.train_traces


class TestGrid:
    def test_total_trainings(self):
        assert TuneGrid().n_trainings() == 125

    def test_block_order(self):
        assert tuple(name for name, _ in TuneGrid().blocks()) == BLOCK_ORDER
        assert BLOCK_ORDER == ("window", "layers", "units", "batch", "epochs")

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            TuneGrid.from_dict({"windows": [1]})


class TestTune:
    def test_runs_every_candidate(self, traces):
        rec = Recorder()
        res = tune(traces, TrainConfig(), TuneGrid(), scorer=rec)
        assert len(rec.calls) == 125 == len(res.rows)
        assert {c[1] for c in rec.calls} == {0, 1000, 2000, 3000, 4000}
        assert {c[0].seed for c in rec.calls} == {0, 1, 2, 3, 4}

    def test_defaults_before_their_block(self, traces):
        rec = Recorder()
        tune(traces, TrainConfig(), TuneGrid(), scorer=rec)
        first = rec.calls[0][0]
        assert first.window == 15  # first window candidate
        assert first.lstm_units == (128,) and first.fc_units == (64, 64)
        assert first.batch_size == 512 and first.epochs == 200

    def test_tie_break_prefers_fewer_parameters(self, traces):
        res = tune(traces, TrainConfig(), TuneGrid(repeats=1), scorer=Recorder())
        # every score ties: smallest network in each block, earliest candidate otherwise
        assert res.best["n_lstm"] == 1 and res.best["n_fc"] == 1
        assert res.best["lstm_unit"] == 64 and res.best["fc_unit"] == 32
        assert res.best["window"] == 15 and res.best["batch_size"] == 128

    def test_picks_lowest_rmse(self, traces):
        score = lambda cfg: abs(cfg.window - 25) + abs(cfg.epochs - 150) / 100
        res = tune(traces, TrainConfig(), TuneGrid(repeats=2), scorer=Recorder(score))
        assert res.best["window"] == 25 and res.best["epochs"] == 150
        assert res.config.window == 25

    def test_failed_candidate_excluded(self, traces):
        def score(cfg):
            if cfg.window == 15:
                raise FloatingPointError("diverged")
            return float(cfg.window)
        res = tune(traces, TrainConfig(), TuneGrid(repeats=1), scorer=Recorder(score))
        assert res.best["window"] == 20
        assert any(r["status"].startswith("failed") for r in res.rows)

    def test_trace_csv(self, traces, tmp_path):
        res = tune(traces, TrainConfig(), TuneGrid(repeats=1), scorer=Recorder())
        p = tmp_path / "t.csv"
        write_trace(p, res.rows)
        lines = p.read_text().splitlines()
        assert len(lines) == 26
        assert lines[0].startswith("block,candidate,settings,repeat")


def test_parameter_count_matches_model():
    cfg = TrainConfig(families=("weibull", "weibull"), lstm_units=(8, 4), fc_units=(6,))
    m = nw.init_model(nw.DLBP1, MixtureSpec.homogeneous(cfg.spec.families[0], 2), 5, (8, 4), (6,))
    assert parameter_count(cfg, 5) == m.n_parameters()
