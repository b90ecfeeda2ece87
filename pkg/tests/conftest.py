import numpy as np
import pytest

from taskmoe import tensor as T


@pytest.fixture
def float64():
    """Run gradient-verification tests above the float32 noise floor."""
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(np.float32)
