import warnings

import numpy as np
import pytest

from mivinfer.dataset import Dataset
from mivinfer.sim import DgpSpec, exact_law, generate, reference_laws


@pytest.fixture(scope="session")
def default_law():
    return exact_law(DgpSpec("discrete_oracle"))


@pytest.fixture(scope="session")
def laws():
    return {k: exact_law(v) for k, v in reference_laws().items()}


@pytest.fixture(scope="session")
def continuous_sample():
    return generate(DgpSpec("paper_continuous", n=800, seed=11))


@pytest.fixture
def tiny():
    X = np.array([[0.1], [0.4], [0.35], [0.8], [0.9], [0.2], [0.6], [0.7]])
    return Dataset(X, [0, 1, 0, 1, 0, 1, 0, 1], [0, 1, 1, 0, 0, 1, 1, 0],
                   [1.0, 2.5, 0.3, 1.7, 2.2, 0.9, 1.1, 3.0])


@pytest.fixture(autouse=True)
def _quiet_weak_iv():
    from mivinfer.errors import WeakInstrumentWarning
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", WeakInstrumentWarning)
        yield
