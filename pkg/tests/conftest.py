import numpy as np
import pytest

from ordinal_depth.dataio import Image


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def quadrant_image(size=8):
    """Four flat colored quadrants."""
    data = np.zeros((size, size, 3))
    h = size // 2
    data[:h, :h] = (1, 0, 0)
    data[:h, h:] = (0, 1, 0)
    data[h:, :h] = (0, 0, 1)
    data[h:, h:] = (1, 1, 0)
    return Image(data)
