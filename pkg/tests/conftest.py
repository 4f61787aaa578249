import numpy as np
import pytest

from msvq import datagen, layout, trainer
from msvq.codebook import Codebook, MsvqModel


@pytest.fixture(scope="session")
def corr_data():
    return datagen.gauss_corr(2048, 16, 0.9, seed=7)


@pytest.fixture(scope="session")
def small_layout(corr_data):
    stats = layout.compute_stats(corr_data)
    return layout.build_layout(stats, sub_dim=4, t_max=3, groups=2,
                               alloc=np.full((4, 3), 5))


@pytest.fixture(scope="session")
def trained(corr_data, small_layout):
    return trainer.train(corr_data, small_layout, trainer.TrainConfig(seed=3))


@pytest.fixture(scope="session")
def model(trained):
    return trained[0]


@pytest.fixture(scope="session")
def report(trained):
    return trained[1]


@pytest.fixture(scope="session")
def ec_trained(corr_data, small_layout):
    config = trainer.TrainConfig(seed=3, ec=True, lambdas=[8.0, 8.0, 8.0])
    return trainer.train(corr_data, small_layout, config)


@pytest.fixture(scope="session")
def ec_model(ec_trained):
    return ec_trained[0]


def make_layout(n_sub, sub_dim, bits_row, groups=1):
    """Layout with identical bit rows; perm is the identity."""
    bits = np.tile(np.asarray(bits_row, dtype=np.int64), (n_sub, 1))
    m = n_sub * sub_dim
    return layout.assemble_layout(
        m, sub_dim, n_sub,
        perm=np.arange(m),
        group_of=np.repeat(np.arange(groups), n_sub // groups),
        bits=bits,
    )


def make_toy_model(lay, rng, ec=False):
    """Random-codebook model for structural tests; priors uniform in EC mode."""
    books = []
    for g in range(lay.n_groups):
        row = []
        for t in range(lay.t_max):
            k = 1 << int(lay.group_bits(g)[t])
            vec = rng.normal(size=(k, lay.sub_dim)).astype(np.float32)
            prior = np.full(k, 1.0 / k) if ec else None
            row.append(Codebook(vectors=vec, prior=prior))
        books.append(tuple(row))
    fallback = rng.normal(size=(lay.n_sub, lay.sub_dim)).astype(np.float32)
    lambdas = np.ones(lay.t_max) if ec else None
    return MsvqModel(layout=lay, codebooks=tuple(books), fallback_means=fallback,
                     ec_enabled=ec, lambdas=lambdas)


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.rsplit("::", 1)[-1]
        outcome = "PASS" if report.passed else "FAIL"
        print(f"\n[ACCEPTANCE] {name}: {outcome}", flush=True)
