import os

import numpy as np
import pytest

from services.feature_pipeline import (
    HYPERPIXEL_PRESETS,
    CorrVolume,
    FeaturePyramid,
    assemble_hyperpixel,
    correlation_layer,
    frame_slice,
    layer_filename,
    load_manifest,
    load_pyramid,
    resolve_layer_ids,
    stack_correlations,
    write_manifest,
)
from services.tensor_core import GridShape, write_tensor
from tests.conftest import make_pyramid
from utils.errors import ConfigError, ShapeError


def test_assemble_resamples_and_normalizes(rng):
    raw = [rng.standard_normal((3, 4, 8, 8)).astype(np.float32), rng.standard_normal((5, 2, 4, 4)).astype(np.float32)]
    pyr = assemble_hyperpixel(raw, [3, 7], GridShape(4, 4, 4))
    assert pyr.m == 2
    assert pyr.channels == [3, 5]
    for layer in pyr.layers:
        assert layer.shape[1:] == (4, 4, 4)
        np.testing.assert_allclose(np.linalg.norm(layer, axis=0), 1.0, atol=1e-5)


def test_assemble_without_normalization_keeps_values(rng):
    raw = [rng.standard_normal((2, 2, 2, 2)).astype(np.float32)]
    pyr = assemble_hyperpixel(raw, [0], GridShape(2, 2, 2), normalize=False)
    assert np.array_equal(pyr.layers[0], raw[0])


def test_pyramid_validation(rng):
    grid = GridShape(2, 2, 2)
    with pytest.raises(ShapeError):
        FeaturePyramid(grid, [], [])
    with pytest.raises(ShapeError):
        FeaturePyramid(grid, [np.zeros((2, 2, 2, 2)), np.zeros((2, 2, 2, 2))], [3, 3])
    with pytest.raises(ShapeError):
        FeaturePyramid(grid, [np.zeros((2, 2, 2, 3))], [0])


def test_correlation_shape_and_values(rng):
    grid = GridShape(2, 2, 3)
    a = rng.standard_normal((4,) + grid.as_tuple())
    b = rng.standard_normal((4,) + grid.as_tuple())
    corr = correlation_layer(a, b)
    assert corr.shape == (12, 12)
    s, q = grid.linear_index(1, 0, 2), grid.linear_index(0, 1, 1)
    assert corr[s, q] == pytest.approx(float(a[:, 1, 0, 2] @ b[:, 0, 1, 1]))


def test_transpose_duality_and_score_bound(rng):
    for _ in range(500):
        grid = GridShape(*(int(s) for s in rng.integers(1, 4, size=3)))
        channels = tuple(int(c) for c in rng.integers(1, 5, size=int(rng.integers(1, 3))))
        pyr_s = make_pyramid(rng, grid, channels)
        pyr_t = make_pyramid(rng, grid, channels)
        st = stack_correlations(pyr_s, pyr_t).scores
        ts = stack_correlations(pyr_t, pyr_s).scores
        assert np.array_equal(st, ts.transpose(0, 2, 1))
        assert np.all(np.abs(st) <= 1 + 1e-5)


def test_stack_rejects_mismatched_pyramids(rng):
    a = make_pyramid(rng, GridShape(2, 2, 2), (3,))
    b = make_pyramid(rng, GridShape(2, 2, 3), (3,))
    with pytest.raises(ShapeError):
        stack_correlations(a, b)
    c = make_pyramid(rng, GridShape(2, 2, 2), (3, 3))
    with pytest.raises(ShapeError):
        stack_correlations(a, c)


def test_corr_volume_validation():
    with pytest.raises(ShapeError):
        CorrVolume(GridShape(2, 2, 2), np.zeros((1, 8, 7)))


def test_frame_slice(rng):
    pyr = make_pyramid(rng, GridShape(3, 2, 2), (2, 3))
    sliced = frame_slice(pyr, 1)
    assert sliced.grid == GridShape(1, 2, 2)
    assert np.array_equal(sliced.layers[1][:, 0], pyr.layers[1][:, 1])
    with pytest.raises(ShapeError):
        frame_slice(pyr, 3)


def test_resolve_layer_ids():
    assert resolve_layer_ids([5, 9], 'base') == [5, 9]
    assert resolve_layer_ids(None, 'base') == list(HYPERPIXEL_PRESETS['base'])
    assert resolve_layer_ids() is None
    with pytest.raises(ConfigError):
        resolve_layer_ids(None, 'nope')


def test_manifest_and_pyramid_loading(rng, tmp_path):
    entries = {}
    for vid in ('v1', 'v2'):
        entries[vid] = {}
        for lid, shape in ((0, (2, 4, 4, 4)), (3, (3, 2, 2, 2))):
            name = layer_filename(vid, lid)
            write_tensor(str(tmp_path / 'feat' / name), rng.standard_normal(shape).astype(np.float32))
            entries[vid][lid] = os.path.join('feat', name)
    write_manifest(str(tmp_path / 'manifest.json'), entries)

    manifest = load_manifest(str(tmp_path / 'manifest.json'))
    assert sorted(manifest) == ['v1', 'v2']
    assert os.path.isabs(manifest['v1'][3])

    pyr = load_pyramid(manifest, 'v2', GridShape(3, 3, 3))
    assert pyr.layer_ids == [0, 3]
    assert pyr.channels == [2, 3]

    subset = load_pyramid(manifest, 'v2', GridShape(3, 3, 3), layer_ids=[3])
    assert subset.layer_ids == [3]

    with pytest.raises(ConfigError):
        load_pyramid(manifest, 'v3', GridShape(3, 3, 3))
    with pytest.raises(ConfigError):
        load_pyramid(manifest, 'v1', GridShape(3, 3, 3), layer_ids=[7])
