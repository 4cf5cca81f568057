import pytest

from oblivnet.dataio import synth_xc
from oblivnet.engine import PublicParams
from oblivnet.lsh import LshConfig


def tiny_params(**overrides) -> PublicParams:
    """Small two-layer config used across the suite: 50 input dims,
    8 hidden units, 64 output classes, 16 buckets of 8 slots."""
    base = dict(
        d_input=50, n_hidden=8, n_classes=64,
        lsh=LshConfig(k=2, m=4, pad_size=8, rebuild_period=3),
        batch_size=4, epochs=1, lr=1e-3, seed_weights=0, seed_lsh=1,
    )
    lsh_over = overrides.pop("lsh", None)
    base.update(overrides)
    if lsh_over is not None:
        base["lsh"] = lsh_over
    return PublicParams(**base)


@pytest.fixture
def params():
    return tiny_params()


@pytest.fixture
def dataset12():
    # 12 examples -> exactly 3 batches of 4
    return synth_xc(d_input=50, n_classes=64, n=12, nnz=10, clusters=4, seed=3)


@pytest.fixture
def dataset20():
    # 20 examples -> 5 batches of 4
    return synth_xc(d_input=50, n_classes=64, n=20, nnz=10, clusters=4, seed=3)
