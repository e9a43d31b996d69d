import numpy as np
import pytest

from duoflow.tensor import set_default_dtype


@pytest.fixture(autouse=True)
def _restore_default_dtype():
    # several suites flip the process dtype; never leak it across tests
    yield
    set_default_dtype(np.float64)
