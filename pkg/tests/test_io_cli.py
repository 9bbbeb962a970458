import json
import struct

import numpy as np
import pytest

from mixrul import io as mio
from mixrul import network as nw
from mixrul.cli import main
from mixrul.config import PRESETS, RunConfig, load_config
from mixrul.dataset import make_windows
from mixrul.distributions import Family, MixtureSpec
from mixrul.errors import ConfigError, DataFormatError
from mixrul.synthetic import write_fleet


class TestModelFormat:
    @pytest.mark.parametrize("kind", [nw.DLBP1, nw.DLBP2])
    def test_round_trip(self, tmp_path, kind):
        spec = MixtureSpec((Family.LOGNORMAL, Family.WEIBULL))
        m = nw.init_model(kind, spec, 3, (4, 2), (3,), seed=1, time_unit=50.0,
                          shared_sigma=[0.5, 40.0] if kind == nw.DLBP2 else None)
        p = tmp_path / "m.mxm"
        mio.save_model(p, m, {"window": 5})
        back = mio.load_model(p)
        for (n1, a), (n2, b) in zip(m.named_tensors(), back.named_tensors()):
            assert n1 == n2
            np.testing.assert_array_equal(a, b)
        assert back.time_unit == 50.0 and back.meta["window"] == 5
        if kind == nw.DLBP2:
            np.testing.assert_array_equal(back.shared_sigma, [0.5, 40.0])

    def test_layout(self, tmp_path):
        m = nw.init_model(nw.DLBP1, MixtureSpec((Family.LOGNORMAL,)), 2, (2,), (), seed=0)
        p = tmp_path / "m.mxm"
        mio.save_model(p, m)
        raw = p.read_bytes()
        magic, version, hlen = struct.unpack_from("<8sIQ", raw)
        assert magic == b"MIXRULM\x00" and version == 1
        header = json.loads(raw[20:20 + hlen])
        assert len(raw) == 20 + hlen + 8 * m.n_parameters()
        assert [t[0] for t in header["tensors"]][:3] == ["lstm0.W", "lstm0.U", "lstm0.b"]
        first = np.frombuffer(raw[20 + hlen:20 + hlen + 8], "<f8")[0]
        assert first == m.lstm_layers[0].W[0, 0]

    def test_corrupt(self, tmp_path):
        p = tmp_path / "bad.mxm"
        p.write_bytes(b"NOTAMODEL" + b"\x00" * 30)
        with pytest.raises(DataFormatError):
            mio.load_model(p)

    def test_truncated(self, tmp_path):
        m = nw.init_model(nw.DLBP1, MixtureSpec((Family.LOGNORMAL,)), 2, (2,), (), seed=0)
        p = tmp_path / "m.mxm"
        mio.save_model(p, m)
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(DataFormatError, match="truncated"):
            mio.load_model(p)


class TestDatasetFormat:
    def test_round_trip(self, tmp_path, small_prepared):
        s = make_windows(small_prepared.train_traces, 8)
        p = tmp_path / "d.mxd"
        mio.save_dataset(p, s, {"normalization": small_prepared.stats.to_dict()})
        back, header = mio.load_dataset(p)
        np.testing.assert_array_equal(back.windows, s.windows)
        np.testing.assert_array_equal(back.targets, s.targets)
        np.testing.assert_array_equal(back.asset_ids, s.asset_ids)
        assert mio.stats_from_header(header).matches(small_prepared.stats)


class TestConfig:
    def test_preset(self):
        cfg = RunConfig.from_dict({"preset": "dlbp1-mll"})
        assert cfg.train.lstm_units == (64,) and cfg.train.fc_units == (128,)
        assert cfg.train.window == 30 and cfg.train.epochs == 250

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            RunConfig.from_dict({"windw": 3})

    def test_hash_ignores_out_dir(self):
        a = RunConfig.from_dict({"out_dir": "a"})
        b = RunConfig.from_dict({"out_dir": "b"})
        assert a.hash() == b.hash()
        assert a.hash() != RunConfig.from_dict({"seed": 3}).hash()

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.json")

    def test_all_presets_valid(self):
        for name in PRESETS:
            RunConfig.from_dict({"preset": name})


def _train_config(tmp_path, data_dir, **kw):
    cfg = {"data_dir": str(data_dir), "families": ["lognormal", "weibull"], "window": 8,
           "lstm_units": [3], "fc_units": [4], "batch_size": 64, "epochs": 2, "seed": 4,
           "time_unit": 60.0}
    cfg.update(kw)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    return p


def _snapshot(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


class TestCli:
    def test_preprocess(self, tmp_path, small_fleet_dir, capsys):
        out = tmp_path / "pre"
        assert main(["preprocess", "--data-dir", str(small_fleet_dir), "--window", "8",
                     "--out-dir", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["P"] == 16
        assert summary["dropped_sensors"] == [1, 5, 16, 18, 19]
        assert "P=16" in capsys.readouterr().out

    def test_train_evaluate_deterministic(self, tmp_path, small_fleet_dir):
        cfg = _train_config(tmp_path, small_fleet_dir)
        run, ev = tmp_path / "run", tmp_path / "ev"
        snaps = []
        for _ in range(2):
            assert main(["train", "--config", str(cfg), "--out-dir", str(run)]) == 0
            assert main(["evaluate", "--model", str(run / "model.mxm"), "--data-dir",
                         str(small_fleet_dir), "--out-dir", str(ev)]) == 0
            snaps.append((_snapshot(run), _snapshot(ev)))
        assert snaps[0] == snaps[1]
        assert set(snaps[0][0]) == {"model.mxm", "history.csv", "config.resolved.json"}
        report = json.loads((ev / "report.json").read_text())
        assert report["n_t"] == 6 and report["mode"] == "final-window"

    def test_dlbp2_history(self, tmp_path, small_fleet_dir):
        cfg = _train_config(tmp_path, small_fleet_dir, model="dlbp2", epochs=4, max_outer=2)
        run = tmp_path / "run2"
        assert main(["train", "--config", str(cfg), "--out-dir", str(run)]) == 0
        lines = (run / "history.csv").read_text().splitlines()
        assert lines[0] == "epoch_or_iter,loss,sigma_1,sigma_2,change"

    def test_predict_stats_mismatch(self, tmp_path, small_fleet_dir):
        run = tmp_path / "run"
        assert main(["train", "--config", str(_train_config(tmp_path, small_fleet_dir)),
                     "--out-dir", str(run)]) == 0
        other = tmp_path / "other"
        write_fleet(other, "FD003", n_train=5, n_test=3, seed=99, min_life=30, max_life=50)
        pre = tmp_path / "pre"
        assert main(["preprocess", "--data-dir", str(other), "--window", "8",
                     "--out-dir", str(pre)]) == 0
        code = main(["predict", "--model", str(run / "model.mxm"), "--input",
                     str(pre / "test.mxd"), "--out", str(tmp_path / "p.csv")])
        assert code == ConfigError.exit_code

    def test_predict_short_trace(self, tmp_path, small_fleet_dir):
        run = tmp_path / "run"
        assert main(["train", "--config", str(_train_config(tmp_path, small_fleet_dir)),
                     "--out-dir", str(run)]) == 0
        rows = (small_fleet_dir / "test_FD003.txt").read_text().splitlines()
        short = [r for r in rows if r.split()[0] == "1"][:3]
        trace = tmp_path / "short.txt"
        trace.write_text("\n".join(short) + "\n")
        out = tmp_path / "p.csv"
        assert main(["predict", "--model", str(run / "model.mxm"), "--input", str(trace),
                     "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 2 and lines[1].startswith("1,")

    def test_missing_rul(self, tmp_path, small_fleet_dir):
        run = tmp_path / "run"
        assert main(["train", "--config", str(_train_config(tmp_path, small_fleet_dir)),
                     "--out-dir", str(run)]) == 0
        d = tmp_path / "norul"
        d.mkdir()
        for name in ("train_FD003.txt", "test_FD003.txt"):
            (d / name).write_bytes((small_fleet_dir / name).read_bytes())
        code = main(["evaluate", "--model", str(run / "model.mxm"), "--data-dir", str(d),
                     "--out-dir", str(tmp_path / "ev")])
        assert code == DataFormatError.exit_code

    def test_bad_config(self, tmp_path, small_fleet_dir):
        cfg = _train_config(tmp_path, small_fleet_dir, batch_size=0)
        assert main(["train", "--config", str(cfg)]) == ConfigError.exit_code
