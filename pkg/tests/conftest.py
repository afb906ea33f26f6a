import numpy as np
import pytest

from kdarek.bounds import KdarekSettings, fit_kdarek, select_knots
from kdarek.netcore import TrainConfig


@pytest.fixture(scope="session")
def cosine_data():
    X = np.linspace(-2 * np.pi, 2 * np.pi, 50)[:, None]
    return X, 10.0 * np.cos(X)


@pytest.fixture(scope="session")
def quick_train():
    return TrainConfig(epochs=60, learning_rate=0.05, optimizer="adam", seed=0, log_every=1000)


@pytest.fixture(scope="session")
def cosine_triple(cosine_data):
    X, Y = cosine_data
    return select_knots(X, Y, 9, "quantile")


@pytest.fixture(scope="session")
def kdarek_fit(cosine_data, quick_train, cosine_triple):
    """(estimator, train result) of a briefly trained cosine K-DAREK model."""
    X, Y = cosine_data
    return fit_kdarek(X, Y, KdarekSettings(), quick_train, cosine_triple)
