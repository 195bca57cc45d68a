import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from helpers import make_table

from malmas.data import CLASSIFICATION, REGRESSION


@pytest.fixture
def product_table():
    """1[x1*x2 > 0] target with a noise column; the e2e workhorse."""
    rng = np.random.default_rng(11)
    n = 200
    x1 = rng.uniform(-1, 1, n)
    x2 = rng.uniform(-1, 1, n)
    noise = rng.normal(size=n)
    y = (x1 * x2 > 0).astype(float)
    return make_table({"x1": x1, "x2": x2, "noise": noise, "y": y}, "y", CLASSIFICATION)


@pytest.fixture
def regression_table():
    rng = np.random.default_rng(5)
    n = 120
    x1 = rng.normal(size=n)
    x2 = rng.normal(size=n)
    y = 2.0 * x1 - x2 + 0.1 * rng.normal(size=n)
    return make_table({"x1": x1, "x2": x2, "y": y}, "y", REGRESSION)
