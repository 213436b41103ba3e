"""
st-MATCH: the non-trainable matcher (mean of the per-layer correlation
slices), decoding of a match volume into a displacement flow, and transfer
of pixel keypoints through that flow.
"""
import math
from dataclasses import dataclass, replace
from typing import List, Sequence, Tuple

import numpy as np
from scipy.special import softmax

from services.feature_pipeline import CorrVolume
from services.tensor_core import GridShape, check_rank, sample_trilinear, write_tensor
from utils.errors import KeypointError, ShapeError
from utils.logger import setup_logger

logger = setup_logger(__name__)

DEFAULT_TEMPERATURE = 0.05


@dataclass(frozen=True)
class VideoDims:
    """Pixel-space video size: frames, rows, cols"""
    t: int
    h: int
    w: int

    def __post_init__(self):
        if min(self.t, self.h, self.w) < 1:
            raise ShapeError(f"video dims must be positive, got {self}")


@dataclass
class MatchVolume:
    """scores[s, q]: how well source cell s matches target cell q"""
    grid: GridShape
    scores: np.ndarray

    def __post_init__(self):
        check_rank(self.scores, 2, "match volume")
        n = self.grid.cells
        if self.scores.shape != (n, n):
            raise ShapeError(f"match volume {tuple(self.scores.shape)} does not match grid {self.grid}")


@dataclass
class DisplacementFlow:
    """flow[:, t, h, w] = (dt, dh, dw) in grid units for the source cell (t, h, w)"""
    grid: GridShape
    flow: np.ndarray

    def cell_targets(self) -> np.ndarray:
        """[THW, 3] target position of every source cell"""
        return self.grid.coords() + self.flow.reshape(3, -1).T


def stmatch_volume(corr: CorrVolume) -> MatchVolume:
    """Mean over the M correlation slices"""
    return MatchVolume(grid=corr.grid, scores=corr.scores.mean(axis=0))


def _cells_to_flow(displacement: np.ndarray, grid: GridShape, dtype) -> DisplacementFlow:
    flow = displacement.T.reshape(3, grid.t, grid.h, grid.w).astype(dtype)
    return DisplacementFlow(grid=grid, flow=flow)


def argmax_flow(mv: MatchVolume) -> DisplacementFlow:
    """Hard decode: best target per source row, ties go to the lowest linear index"""
    coords = mv.grid.coords()
    best = np.argmax(mv.scores, axis=1)
    return _cells_to_flow(coords[best] - coords, mv.grid, np.float32)


def soft_argmax_weights(scores: np.ndarray, temperature: float) -> np.ndarray:
    """Row-wise softmax(scores / temperature); scipy subtracts the row max first"""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return softmax(scores.astype(np.float64) / temperature, axis=1)


def soft_argmax_flow(mv: MatchVolume, temperature: float = DEFAULT_TEMPERATURE) -> DisplacementFlow:
    """Differentiable decode: expected target coordinate under the row softmax, minus the source coordinate"""
    coords = mv.grid.coords()
    weights = soft_argmax_weights(mv.scores, temperature)
    dtype = np.float64 if mv.scores.dtype == np.float64 else np.float32
    return _cells_to_flow(weights @ coords - coords, mv.grid, dtype)


def _scale(size_from: int, size_to: int) -> Tuple[int, int]:
    """Align-corners ratio as (numerator, denominator); a size-1 axis collapses to 0"""
    if size_from <= 1 or size_to <= 1:
        return 0, 1
    return size_to - 1, size_from - 1


def to_grid(kp, dims: VideoDims, grid: GridShape) -> np.ndarray:
    """Pixel keypoint -> real (t, h, w) grid position"""
    pos = []
    for value, d, g in ((kp.t, dims.t, grid.t), (kp.y, dims.h, grid.h), (kp.x, dims.w, grid.w)):
        num, den = _scale(d, g)
        pos.append(value * num / den)
    return np.array(pos, dtype=np.float64)


def to_pixels(pos: Sequence[float], dims: VideoDims, grid: GridShape) -> Tuple[float, float, float]:
    """Real grid position -> (t, y, x) in pixel space"""
    out = []
    for value, d, g in zip(pos, (dims.t, dims.h, dims.w), (grid.t, grid.h, grid.w)):
        num, den = _scale(g, d)
        out.append(float(value) * num / den)
    return tuple(out)


def frame_to_grid(t: float, frames: int, grid_t: int) -> float:
    """Pixel-space frame index -> real position on a grid time axis"""
    num, den = _scale(frames, grid_t)
    return t * num / den


def grid_to_frame(pos: float, frames: int, grid_t: int) -> int:
    """Grid time position -> nearest frame index (half up), clamped into the video"""
    num, den = _scale(grid_t, frames)
    return min(max(int(math.floor(pos * num / den + 0.5)), 0), frames - 1)


def transfer_keypoints(flow: DisplacementFlow, kps: Sequence, src_dims: VideoDims, tgt_dims: VideoDims,
                       interpolation: str = 'trilinear') -> List:
    """
    Move source keypoints into the target video through a displacement flow.

    Args:
        flow: displacement flow on the matcher grid
        kps: source keypoints (pixels, frame index)
        src_dims: source video size
        tgt_dims: target video size
        interpolation: 'trilinear' to interpolate the flow, 'nearest' to read the closest cell

    Returns:
        Keypoints in target pixels; time rounded to the nearest frame and
        every coordinate clamped into the target video.
    """
    if interpolation not in ('trilinear', 'nearest'):
        raise ValueError(f"interpolation must be 'trilinear' or 'nearest', got {interpolation!r}")

    grid = flow.grid
    sizes = np.array(grid.as_tuple()) - 1
    result = []
    for kp in kps:
        if not (0 <= kp.x <= src_dims.w - 1 and 0 <= kp.y <= src_dims.h - 1 and 0 <= kp.t <= src_dims.t - 1):
            raise KeypointError(f"keypoint {kp} outside source dims {src_dims}")

        pos = to_grid(kp, src_dims, grid)
        if interpolation == 'nearest':
            cell = np.clip(np.floor(pos + 0.5), 0, sizes).astype(np.int64)
            disp = flow.flow[:, cell[0], cell[1], cell[2]].astype(np.float64)
        else:
            disp = sample_trilinear(flow.flow.astype(np.float64), pos[None, :])[:, 0]

        t, y, x = to_pixels(pos + disp, tgt_dims, grid)
        t = min(max(int(math.floor(t + 0.5)), 0), tgt_dims.t - 1)
        result.append(replace(kp, x=min(max(x, 0.0), tgt_dims.w - 1), y=min(max(y, 0.0), tgt_dims.h - 1), t=t))
    return result


def write_flow(path: str, flow: DisplacementFlow):
    """Store the flow as an STT1 [3, T, H, W] tensor"""
    write_tensor(path, flow.flow)
