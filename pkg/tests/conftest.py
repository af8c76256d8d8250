import numpy as np
import pytest

from superad.features import ImageFeatures, PatchFeatureGrid


def make_grid(layer_index, values):
    values = np.asarray(values, dtype=np.float32)
    gh, gw, dim = values.shape
    return PatchFeatureGrid(layer_index=layer_index, grid_h=gh, grid_w=gw, dim=dim, values=values)


def make_features(
    image_id="img",
    grid=(2, 2),
    dim=4,
    layers=(6, 12, 18, 24),
    patch_size=14,
    original=None,
    cls=None,
    layer_values=None,
    rng=None,
):
    """Valid ImageFeatures bundle; random values unless given explicitly."""
    rng = rng or np.random.default_rng(0)
    gh, gw = grid
    resized = (gh * patch_size, gw * patch_size)
    if cls is None:
        cls = rng.normal(size=dim)
    grids = []
    for layer_index in layers:
        if layer_values is not None and layer_index in layer_values:
            values = layer_values[layer_index]
        else:
            values = rng.normal(size=(gh, gw, dim))
        grids.append(make_grid(layer_index, values))
    return ImageFeatures(
        image_id=image_id,
        original_size=original if original is not None else resized,
        resized_size=resized,
        patch_size=patch_size,
        cls=np.asarray(cls, dtype=np.float32),
        layers=tuple(grids),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
