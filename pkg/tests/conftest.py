import numpy as np
import pytest

from mixrul.dataset import EngineTrace, load_fd, prepare
from mixrul.synthetic import write_fleet


def make_trace(asset_id, signals, failure_time=None):
    signals = np.asarray(signals, dtype=float)
    n = signals.shape[0]
    return EngineTrace(
        asset_id=asset_id,
        cycles=np.arange(1, n + 1),
        op_settings=np.zeros((n, 3)),
        signals=signals,
        failure_time=n if failure_time is None else failure_time,
        sensor_ids=tuple(range(1, signals.shape[1] + 1)),
    )


@pytest.fixture(scope="session")
def small_fleet_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("fleet")
    write_fleet(d, "FD003", n_train=12, n_test=6, seed=7, min_life=40, max_life=70)
    return d


@pytest.fixture(scope="session")
def small_prepared(small_fleet_dir):
    train, test = load_fd(small_fleet_dir, "FD003")
    return prepare(train, test)
