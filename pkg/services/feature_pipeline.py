"""
Hyperpixel feature pyramids and stacked correlation volumes.

Layer outputs of a backbone are resampled onto one T x H x W grid, then a
correlation slice is computed per layer between source and target and the
M slices are stacked into an M x (THW) x (THW) volume.
"""
import os
import json
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from services.tensor_core import (
    GridShape,
    check_rank,
    l2_normalize_positions,
    read_tensor,
    trilinear_resample,
)
from utils.errors import ShapeError, ConfigError
from utils.logger import setup_logger

logger = setup_logger(__name__)

# Layer sets of the hyperpixel ablation (conv1 = 0, group ends = 3, 7, 13, 16)
HYPERPIXEL_PRESETS: Dict[str, tuple] = {
    'base': (0, 3, 7, 13, 16),
    'no-conv1': (3, 7, 13, 16),
    'no-group1': (0, 7, 13, 16),
    'no-early': (7, 13, 16),
    'groups-34': (13, 16),
    'groups-34-wide': (12, 13, 15, 16),
}


@dataclass
class FeaturePyramid:
    """M layers resampled to one grid; layer i is [C_i, T, H, W]"""
    grid: GridShape
    layers: List[np.ndarray]
    layer_ids: List[int]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a pyramid needs at least one layer")
        if len(self.layers) != len(self.layer_ids):
            raise ShapeError(f"{len(self.layers)} layers but {len(self.layer_ids)} layer ids")
        if any(b <= a for a, b in zip(self.layer_ids, self.layer_ids[1:])):
            raise ShapeError(f"layer ids must be strictly increasing, got {list(self.layer_ids)}")
        for layer in self.layers:
            check_rank(layer, 4, "pyramid layer")
            if tuple(layer.shape[1:]) != self.grid.as_tuple():
                raise ShapeError(f"layer grid {tuple(layer.shape[1:])} does not match pyramid grid {self.grid}")

    @property
    def m(self) -> int:
        return len(self.layers)

    @property
    def channels(self) -> List[int]:
        return [layer.shape[0] for layer in self.layers]


@dataclass
class CorrVolume:
    """Stacked correlations: scores[i, s, q] for source cell s, target cell q"""
    grid: GridShape
    scores: np.ndarray

    def __post_init__(self):
        check_rank(self.scores, 3, "correlation volume")
        n = self.grid.cells
        if self.scores.shape[1:] != (n, n):
            raise ShapeError(f"correlation volume {tuple(self.scores.shape)} does not match grid {self.grid}")

    @property
    def m(self) -> int:
        return self.scores.shape[0]


def resolve_layer_ids(layer_ids: Optional[Sequence[int]] = None, hyperpixel: Optional[str] = None) -> Optional[List[int]]:
    """Explicit layer ids win over a named preset; None means 'all available layers'"""
    if layer_ids:
        return [int(i) for i in layer_ids]
    if hyperpixel:
        if hyperpixel not in HYPERPIXEL_PRESETS:
            raise ConfigError(f"unknown hyperpixel preset {hyperpixel!r}; known: {', '.join(HYPERPIXEL_PRESETS)}")
        return list(HYPERPIXEL_PRESETS[hyperpixel])
    return None


def assemble_hyperpixel(raw_layers: Sequence[np.ndarray], layer_ids: Sequence[int],
                        grid: GridShape, normalize: bool = True) -> FeaturePyramid:
    """
    Resample every raw layer onto `grid` and optionally L2-normalize the
    channel vector at each position.

    Args:
        raw_layers: rank-4 layer outputs, each at its own resolution
        layer_ids: backbone layer numbers, strictly increasing
        grid: common T x H x W grid
        normalize: apply l2_normalize_positions per layer

    Returns:
        FeaturePyramid on `grid`
    """
    if not raw_layers:
        raise ShapeError("no layers to assemble")
    if len(raw_layers) != len(layer_ids):
        raise ShapeError(f"{len(raw_layers)} layers but {len(layer_ids)} layer ids")

    layers = []
    for raw in raw_layers:
        check_rank(raw, 4, "raw layer")
        layer = trilinear_resample(raw, grid)
        if normalize:
            layer = l2_normalize_positions(layer)
        layers.append(layer)

    return FeaturePyramid(grid=grid, layers=layers, layer_ids=list(layer_ids))


def correlation_layer(src: np.ndarray, tgt: np.ndarray) -> np.ndarray:
    """[THW, THW] dot products between every source and every target cell vector"""
    check_rank(src, 4, "source features")
    if src.shape != tgt.shape:
        raise ShapeError(f"feature shapes differ: {tuple(src.shape)} vs {tuple(tgt.shape)}")
    channels = src.shape[0]
    a = src.reshape(channels, -1)
    b = tgt.reshape(channels, -1)
    # accumulate channel by channel so swapping src/tgt gives the exact transpose
    out = np.zeros((a.shape[1], b.shape[1]), dtype=np.result_type(a, b))
    for c in range(channels):
        out += np.multiply.outer(a[c], b[c])
    return out


def stack_correlations(pyr_s: FeaturePyramid, pyr_t: FeaturePyramid) -> CorrVolume:
    """Correlation slice per layer, stacked to [M, THW, THW]"""
    if pyr_s.m != pyr_t.m:
        raise ShapeError(f"pyramids have {pyr_s.m} and {pyr_t.m} layers")
    if pyr_s.grid != pyr_t.grid:
        raise ShapeError(f"pyramid grids differ: {pyr_s.grid} vs {pyr_t.grid}")

    slices = [correlation_layer(s, t) for s, t in zip(pyr_s.layers, pyr_t.layers)]
    return CorrVolume(grid=pyr_s.grid, scores=np.stack(slices, axis=0))


def frame_slice(pyr: FeaturePyramid, t: int) -> FeaturePyramid:
    """Single-frame pyramid (grid 1 x H x W) holding frame t of every layer"""
    if not 0 <= t < pyr.grid.t:
        raise ShapeError(f"frame {t} outside pyramid with {pyr.grid.t} frames")
    return FeaturePyramid(
        grid=GridShape(1, pyr.grid.h, pyr.grid.w),
        layers=[layer[:, t:t + 1] for layer in pyr.layers],
        layer_ids=list(pyr.layer_ids),
    )


def layer_filename(video_id: str, layer_id: int) -> str:
    return f"{video_id}.layer{layer_id}.stt"


def write_manifest(path: str, entries: Dict[str, Dict[int, str]]):
    """
    Write the feature manifest.

    Args:
        path: manifest JSON path
        entries: video id -> {layer id -> STT1 path relative to the manifest}
    """
    layer_ids = sorted({lid for layers in entries.values() for lid in layers})
    doc = {
        'layer_ids': layer_ids,
        'videos': [
            {'id': vid, 'layers': [{'layer_id': lid, 'path': layers[lid]} for lid in sorted(layers)]}
            for vid, layers in sorted(entries.items())
        ],
    }
    with open(path, 'w', encoding='utf-8') as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def load_manifest(path: str) -> Dict[str, Dict[int, str]]:
    """Read a manifest into video id -> {layer id -> absolute STT1 path}"""
    with open(path, 'r', encoding='utf-8') as fh:
        doc = json.load(fh)

    base = os.path.dirname(os.path.abspath(path))
    entries = {}
    for video in doc.get('videos', []):
        entries[video['id']] = {
            int(layer['layer_id']): os.path.join(base, layer['path'])
            for layer in video['layers']
        }
    return entries


def load_pyramid(manifest: Dict[str, Dict[int, str]], video_id: str, grid: GridShape,
                 normalize: bool = True, layer_ids: Optional[Sequence[int]] = None) -> FeaturePyramid:
    """Read a video's layer files (optionally a hyperpixel subset) and assemble its pyramid"""
    if video_id not in manifest:
        raise ConfigError(f"video {video_id} not in feature manifest")
    available = manifest[video_id]
    chosen = sorted(available) if layer_ids is None else list(layer_ids)
    missing = [lid for lid in chosen if lid not in available]
    if missing:
        raise ConfigError(f"video {video_id} has no features for layers {missing}")

    raw = [read_tensor(available[lid]) for lid in chosen]
    logger.debug(f"Loaded {len(raw)} layers for {video_id}")
    return assemble_hyperpixel(raw, chosen, grid, normalize=normalize)
