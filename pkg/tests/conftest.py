import numpy as np
import pytest

from strataforest.core import PlotCloud


def make_cloud(plot_id="plot", n=400, extent=(10.0, 10.0), seed=0,
               labels=None, origin=(0.0, 0.0)):
    """A generic random labeled cloud with points in all strata."""
    rng = np.random.default_rng(seed)
    w, h = extent
    x = rng.uniform(0, w, n)
    y = rng.uniform(0, h, n)
    quarters = n // 4
    z = np.concatenate([
        np.zeros(quarters),
        rng.uniform(0.1, 1.4, quarters),
        rng.uniform(1.6, 4.5, quarters),
        rng.uniform(5.5, 14.0, n - 3 * quarters),
    ])
    if labels is None:
        labels = np.concatenate([
            np.zeros(quarters, dtype=int),
            np.full(quarters, -1),
            np.full(quarters, 2),
            rng.choice([3, 4, 5], n - 3 * quarters),
        ])
    intensity = rng.integers(10, 220, n)
    returns = rng.integers(1, 4, n)
    return PlotCloud.from_arrays(plot_id, x, y, z, intensity, returns,
                                 labels, origin=origin, extent=extent)


@pytest.fixture
def cloud():
    return make_cloud()
