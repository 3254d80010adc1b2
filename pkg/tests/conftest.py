import os

import numpy as np
import pytest

from s2sp.pngio import read_png

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")


@pytest.fixture(scope="session")
def crop64() -> np.ndarray:
    """Bundled 64x64 grayscale natural-image crop, float32 (64, 64, 1)."""
    return read_png(os.path.join(DATA_DIR, "crop64.png"))


@pytest.fixture
def finite_checks():
    """Enable NaN/Inf assertions on op outputs for the duration of a test."""
    from s2sp.tensor import enable_finite_checks
    enable_finite_checks(True)
    yield
    enable_finite_checks(False)
