import numpy as np
import pytest

from voxwin.attention import WindowBatch, make_attention_params
from voxwin.voxelgrid import SparseVoxelLevel


def random_level(rng, max_extent=10, max_voxels=100, voxel_size=0.04, m=6):
    """A synthetic occupied-voxel level with reps inside their cells."""
    n = int(rng.integers(1, max_voxels))
    coords = np.unique(rng.integers(-max_extent, max_extent, size=(n, 3)), axis=0)
    k = coords.shape[0]
    reps = (coords + rng.uniform(0.0, 1.0, size=(k, 3))) * voxel_size
    rest = rng.uniform(-1.0, 1.0, size=(k, m - 3))
    signals = np.concatenate([reps, rest], axis=1)
    return SparseVoxelLevel(
        level=1, voxel_size=voxel_size, coords=coords, rep_points=reps,
        rep_signals=signals, rep_indices=np.arange(k, dtype=np.int64),
    )


def random_window(rng, n, c, nh, m=6, height=0.2, table_scale=0.2):
    """Random window batch plus attention params with randomized tables."""
    params = make_attention_params(c, nh, m, height, rng)
    if table_scale:
        for t in params.tables.parameters():
            t.data[...] = rng.normal(0.0, table_scale, t.data.shape)
    f = rng.normal(0.0, 1.0, (n, c))
    pos = rng.uniform(0.0, height, (n, 3))
    rest = rng.uniform(-1.0, 1.0, (n, m - 3))
    return WindowBatch(f, np.concatenate([pos, rest], axis=1)), params


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
