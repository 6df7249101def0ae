import numpy as np
import pytest

from prescribe.eventlog import LogSchema

SCHEMA = LogSchema(
    case_id_col="case",
    activity_col="act",
    timestamp_col="ts",
    treatment_col="t",
    outcome_col="y",
    static_cols=("segment",),
    dynamic_cols=("amount",),
)

HEADER = "case,act,ts,t,y,segment,amount\n"


@pytest.fixture
def write_log(tmp_path):
    def _write(rows, name="log.csv", header=HEADER):
        path = tmp_path / name
        path.write_text(header + "".join(r + "\n" for r in rows))
        return path

    return _write


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def linear_effect_data(n, seed):
    """X ~ U[-1, 1]^2, T ~ Bernoulli(0.5), Y = x2 + 2 x1 T + N(0, 1); the effect is 2 x1."""
    r = np.random.default_rng(seed)
    X = r.uniform(-1, 1, (n, 2))
    T = (r.random(n) < 0.5).astype(np.int64)
    Y = X[:, 1] + T * 2 * X[:, 0] + r.normal(size=n)
    return X, T, Y


def effect_grid(m=50):
    return np.column_stack([np.linspace(-0.9, 0.9, m), np.zeros(m)])
