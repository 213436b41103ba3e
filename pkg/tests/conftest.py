import numpy as np
import pytest

from services.benchmark import SpaceTimeKeypoint, VideoAnnotation
from services.feature_pipeline import FeaturePyramid
from services.stmatch import VideoDims
from services.tensor_core import GridShape


def unit_cells(rng, channels, grid):
    """[C, T, H, W] with a random unit vector at every cell"""
    v = rng.standard_normal((channels,) + grid.as_tuple())
    return v / np.linalg.norm(v, axis=0, keepdims=True)


def make_pyramid(rng, grid, channels=(4,), dtype=np.float32):
    layers = [unit_cells(rng, c, grid).astype(dtype) for c in channels]
    return FeaturePyramid(grid, layers, list(range(len(channels))))


def video(video_id, action, split, key_moments, types_per_moment, dims=VideoDims(100, 120, 160)):
    """Annotation with the given visible types at each key moment, spread on a diagonal"""
    keypoints = {}
    for t, types in zip(key_moments, types_per_moment):
        keypoints[t] = [SpaceTimeKeypoint(x=10.0 + 5 * i, y=20.0 + 3 * i, t=t, type_id=i) for i in types]
    return VideoAnnotation(video_id, action, split, dims, list(key_moments), keypoints)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def grid222():
    return GridShape(2, 2, 2)


@pytest.fixture
def four_videos():
    """
    A and B: golf/train, share types {0, 1, 2} at both key moments
    C: golf/val (same types, other split)
    D: tennis/train (same types, other action)
    """
    return [
        video('A', 'golf', 'train', [10, 40], [[0, 1, 2, 7], [0, 1, 2]]),
        video('B', 'golf', 'train', [5, 50], [[0, 1, 2], [0, 1, 2, 9]]),
        video('C', 'golf', 'val', [12, 30], [[0, 1, 2], [0, 1, 2]]),
        video('D', 'tennis', 'train', [20, 60], [[0, 1, 2], [0, 1, 2]]),
    ]
