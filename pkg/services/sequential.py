"""
Sequential baselines: align time first (per-frame embeddings matched by
nearest neighbour or DTW), then solve a purely spatial correspondence on
each aligned frame pair.
"""
import json
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from services.feature_pipeline import FeaturePyramid, frame_slice, stack_correlations
from services.stmatch import DisplacementFlow, VideoDims, argmax_flow, frame_to_grid, grid_to_frame, stmatch_volume, transfer_keypoints
from services.tensor_core import check_rank
from utils.errors import KeypointError, ShapeError
from utils.logger import setup_logger

logger = setup_logger(__name__)


@dataclass
class EmbeddingSequence:
    values: np.ndarray  # [frames, dim]

    def __post_init__(self):
        check_rank(self.values, 2, "embedding sequence")
        if 0 in self.values.shape:
            raise ShapeError(f"embedding sequence must be non-empty, got {tuple(self.values.shape)}")
        if not np.all(np.isfinite(self.values)):
            raise ShapeError("embedding sequence has non-finite values")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class Alignment:
    """indices[i] is the target frame aligned to source frame i"""
    indices: np.ndarray
    n_target: int
    monotone: bool = False

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.n_target):
            raise ShapeError(f"alignment indices outside 0..{self.n_target - 1}")
        if self.monotone and np.any(np.diff(self.indices) < 0):
            raise ShapeError("monotone alignment must be non-decreasing")


def frame_embeddings(pyr: FeaturePyramid, layer_pick: int) -> EmbeddingSequence:
    """Spatially average one pyramid layer per frame and L2-normalize each frame vector"""
    if not 0 <= layer_pick < pyr.m:
        raise ShapeError(f"layer index {layer_pick} outside 0..{pyr.m - 1}")
    pooled = pyr.layers[layer_pick].astype(np.float64).mean(axis=(2, 3)).T
    norms = np.maximum(np.linalg.norm(pooled, axis=1, keepdims=True), 1e-8)
    return EmbeddingSequence(pooled / norms)


def _check_dims(es: EmbeddingSequence, et: EmbeddingSequence):
    if es.dim != et.dim:
        raise ShapeError(f"embedding dims differ: {es.dim} vs {et.dim}")


def nn_align(es: EmbeddingSequence, et: EmbeddingSequence) -> Alignment:
    """Independent nearest target frame per source frame (ties to the lowest index)"""
    _check_dims(es, et)
    cost = cdist(es.values, et.values, 'sqeuclidean')
    return Alignment(np.argmin(cost, axis=1), n_target=et.frames, monotone=False)


def _traceback(D: np.ndarray) -> List[Tuple[int, int]]:
    """Walk the padded accumulated-cost table back from the end; diagonal wins ties"""
    i, j = np.array(D.shape) - 2
    path = [(int(i), int(j))]
    while i > 0 or j > 0:
        tb = np.argmin((D[i, j], D[i, j + 1], D[i + 1, j]))
        if tb == 0:
            i -= 1
            j -= 1
        elif tb == 1:
            i -= 1
        else:
            j -= 1
        path.append((int(i), int(j)))
    path.reverse()
    return path


def dtw_path(es: EmbeddingSequence, et: EmbeddingSequence) -> Tuple[List[Tuple[int, int]], float, np.ndarray]:
    """Optimal warping path, its total cost and the local cost table"""
    _check_dims(es, et)
    r, c = es.frames, et.frames
    cost = cdist(es.values, et.values, 'sqeuclidean')

    D = np.zeros((r + 1, c + 1))
    D[0, 1:] = np.inf
    D[1:, 0] = np.inf
    D[1:, 1:] = cost
    for i in range(r):
        for j in range(c):
            D[i + 1, j + 1] += min(D[i, j], D[i, j + 1], D[i + 1, j])

    return _traceback(D), float(D[-1, -1]), cost


def dtw_align(es: EmbeddingSequence, et: EmbeddingSequence) -> Tuple[Alignment, float]:
    """
    DTW alignment with steps (1,0), (0,1), (1,1) and squared Euclidean cost.

    The path can match one source frame to several target frames; each
    source frame keeps the one with the lowest local cost (ties to the
    lowest target index).

    Returns:
        (monotone Alignment, total path cost)
    """
    path, total, cost = dtw_path(es, et)
    best: Dict[int, int] = {}
    for i, j in path:
        if i not in best or cost[i, j] < cost[i, best[i]]:
            best[i] = j
    indices = np.array([best[i] for i in range(es.frames)], dtype=np.int64)
    return Alignment(indices, n_target=et.frames, monotone=True), total


def sequential_transfer(alignment: Alignment, pyr_s: FeaturePyramid, pyr_t: FeaturePyramid,
                        kps: Sequence, src_dims: VideoDims, tgt_dims: VideoDims,
                        interpolation: str = 'trilinear') -> List:
    """
    Transfer keypoints with the time-then-space baseline.

    Each keypoint's frame is mapped onto the pyramid's frame axis, sent to
    the aligned target frame, and placed spatially by st-MATCH run on the
    two single-frame slices.
    """
    if len(alignment.indices) != pyr_s.grid.t:
        raise ShapeError(f"alignment covers {len(alignment.indices)} frames, source pyramid has {pyr_s.grid.t}")
    if alignment.n_target != pyr_t.grid.t:
        raise ShapeError(f"alignment targets {alignment.n_target} frames, target pyramid has {pyr_t.grid.t}")

    flows: Dict[Tuple[int, int], DisplacementFlow] = {}
    src_frame_dims = VideoDims(1, src_dims.h, src_dims.w)
    tgt_frame_dims = VideoDims(1, tgt_dims.h, tgt_dims.w)
    result = []
    for kp in kps:
        if not 0 <= kp.t <= src_dims.t - 1:
            raise KeypointError(f"keypoint frame {kp.t} outside source with {src_dims.t} frames")
        fs = min(max(int(math.floor(frame_to_grid(kp.t, src_dims.t, pyr_s.grid.t) + 0.5)), 0), pyr_s.grid.t - 1)
        ft = int(alignment.indices[fs])
        if (fs, ft) not in flows:
            corr = stack_correlations(frame_slice(pyr_s, fs), frame_slice(pyr_t, ft))
            flows[(fs, ft)] = argmax_flow(stmatch_volume(corr))

        moved = transfer_keypoints(flows[(fs, ft)], [replace(kp, t=0)], src_frame_dims, tgt_frame_dims,
                                   interpolation=interpolation)[0]
        result.append(replace(moved, t=grid_to_frame(ft, tgt_dims.t, pyr_t.grid.t)))
    return result


def write_alignment(path: str, alignment: Alignment, total_cost: float = None):
    """JSON with the target index of every source frame and the path cost (null for NN)"""
    doc = {
        'alignment': [int(j) for j in alignment.indices],
        'monotone': bool(alignment.monotone),
        'total_cost': None if total_cost is None else float(total_cost),
    }
    with open(path, 'w', encoding='utf-8') as fh:
        json.dump(doc, fh, indent=2)
