"""
Synthetic benchmark with planted ground truth.

Every action owns a latent feature volume: one random unit vector per grid
cell and layer. A video of that action shows the latent volume under its
own space-time warp (a frame permutation that keeps key moments in order,
and a spatial permutation per frame), optionally with Gaussian noise.
Keypoint type j sits on latent spatial cell j at every key moment, so the
ground truth of any same-action pair is known exactly.
"""
import os
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from services.benchmark import (
    PairCorrespondences,
    PairList,
    SpaceTimeKeypoint,
    VideoAnnotation,
    VideoPair,
    build_pairs,
    get_setup,
    ground_truth_for_pairs,
    save_annotations,
    save_gt,
    save_pairs,
    validate_annotation,
)
from services.feature_pipeline import layer_filename, write_manifest
from services.stmatch import VideoDims, to_pixels
from services.tensor_core import GridShape, write_tensor
from utils.errors import ConfigError
from utils.logger import setup_logger
from utils.worker_pool import run_parallel

logger = setup_logger(__name__)


@dataclass
class SynthConfig:
    n_videos: int = 4
    n_actions: int = 2
    n_key_moments: int = 2
    grid: GridShape = field(default_factory=lambda: GridShape(4, 4, 4))
    # 16 = 5 * 3 + 1 and 64 = 21 * 3 + 1, so grid nodes land on integer pixels
    dims: VideoDims = field(default_factory=lambda: VideoDims(16, 64, 64))
    layer_channels: Tuple[int, ...] = (8, 16)
    noise: float = 0.0
    drop_prob: float = 0.0
    val_fraction: float = 0.0
    setup: str = "13+3"
    min_shared: int = 3

    def __post_init__(self):
        if self.n_videos < 1 or self.n_actions < 1:
            raise ConfigError("n_videos and n_actions must be positive")
        if not 1 <= self.n_key_moments <= self.grid.t:
            raise ConfigError(f"n_key_moments must be in 1..{self.grid.t}")
        if not self.layer_channels or min(self.layer_channels) < 1:
            raise ConfigError("layer_channels must list positive channel counts")
        if self.noise < 0 or not 0 <= self.drop_prob <= 1 or not 0 <= self.val_fraction <= 1:
            raise ConfigError("noise must be >= 0; drop_prob and val_fraction in [0, 1]")

    @property
    def layer_ids(self) -> List[int]:
        return list(range(len(self.layer_channels)))

    @property
    def n_types(self) -> int:
        return min(len(get_setup(self.setup).allowed), self.grid.h * self.grid.w)


@dataclass
class SynthVideo:
    annotation: VideoAnnotation
    layers: List[np.ndarray]  # raw [C, T, H, W] per layer
    frame_perm: np.ndarray  # frame t shows latent frame frame_perm[t]
    cell_perm: np.ndarray  # [T, H*W]: cell i of frame t shows latent cell cell_perm[t, i]


@dataclass
class SynthDataset:
    config: SynthConfig
    seed: int
    videos: List[SynthVideo]
    pairs: List[VideoPair]
    gt: List[PairCorrespondences]

    @property
    def annotations(self) -> List[VideoAnnotation]:
        return [v.annotation for v in self.videos]


def _unit_vectors(rng: np.random.Generator, channels: int, grid: GridShape) -> np.ndarray:
    vectors = rng.standard_normal((channels,) + grid.as_tuple())
    return vectors / np.linalg.norm(vectors, axis=0, keepdims=True)


def _frame_permutation(rng: np.random.Generator, n_frames: int, key_latent: List[int]) -> np.ndarray:
    """Random frame order in which the latent key frames still appear in increasing order"""
    key_slots = np.sort(rng.choice(n_frames, size=len(key_latent), replace=False))
    others = [f for f in range(n_frames) if f not in key_latent]
    others = list(rng.permutation(others)) if others else []
    perm = np.empty(n_frames, dtype=np.int64)
    perm[key_slots] = key_latent
    rest = [slot for slot in range(n_frames) if slot not in set(key_slots.tolist())]
    perm[rest] = others
    return perm


def _make_video(index: int, config: SynthConfig, latents: List[List[np.ndarray]], key_latent: List[List[int]],
                seed_seq: np.random.SeedSequence, split: str) -> SynthVideo:
    rng = np.random.default_rng(seed_seq)
    grid = config.grid
    action = index % config.n_actions
    n_cells = grid.h * grid.w

    frame_perm = _frame_permutation(rng, grid.t, key_latent[action])
    cell_perm = np.stack([rng.permutation(n_cells) for _ in range(grid.t)])

    layers = []
    for latent in latents[action]:
        flat = latent.reshape(latent.shape[0], grid.t, n_cells)
        warped = np.stack([flat[:, frame_perm[t], cell_perm[t]] for t in range(grid.t)], axis=1)
        warped = warped.reshape(latent.shape)
        if config.noise > 0:
            warped = warped + config.noise * rng.standard_normal(warped.shape)
        layers.append(warped.astype(np.float32))

    key_frames = sorted(int(np.flatnonzero(frame_perm == lk)[0]) for lk in key_latent[action])
    keypoints: Dict[int, List[SpaceTimeKeypoint]] = {}
    for t_grid in key_frames:
        where = np.argsort(cell_perm[t_grid])  # latent cell -> video cell
        kps = []
        for type_id in range(config.n_types):
            h, w = divmod(int(where[type_id]), grid.w)
            t, y, x = to_pixels((t_grid, h, w), config.dims, grid)
            visible = not (config.drop_prob > 0 and rng.random() < config.drop_prob)
            kps.append(SpaceTimeKeypoint(x=x, y=y, t=int(round(t)), type_id=type_id, visible=visible))
        keypoints[kps[0].t] = kps

    annotation = VideoAnnotation(
        video_id=f"v{index:04d}",
        action=f"action{action}",
        split=split,
        dims=config.dims,
        key_moments=sorted(keypoints),
        keypoints=keypoints,
    )
    validate_annotation(annotation)
    return SynthVideo(annotation=annotation, layers=layers, frame_perm=frame_perm, cell_perm=cell_perm)


def _splits(config: SynthConfig) -> List[str]:
    """The last val_fraction of each action's videos go to val"""
    splits = ['train'] * config.n_videos
    for action in range(config.n_actions):
        members = list(range(action, config.n_videos, config.n_actions))
        n_val = int(round(len(members) * config.val_fraction))
        for index in members[len(members) - n_val:] if n_val else []:
            splits[index] = 'val'
    return splits


def synth_dataset(config: SynthConfig, seed: int, jobs: int = 1) -> SynthDataset:
    """
    Generate the dataset; identical (config, seed) give identical output for
    any worker count. Video i belongs to action i % n_actions.
    """
    children = np.random.SeedSequence(seed).spawn(config.n_actions + config.n_videos)

    latents, key_latent = [], []
    for action in range(config.n_actions):
        rng = np.random.default_rng(children[action])
        latents.append([_unit_vectors(rng, c, config.grid) for c in config.layer_channels])
        key_latent.append(sorted(int(f) for f in rng.choice(config.grid.t, size=config.n_key_moments, replace=False)))

    splits = _splits(config)
    videos = run_parallel(
        lambda i: _make_video(i, config, latents, key_latent, children[config.n_actions + i], splits[i]),
        range(config.n_videos),
        jobs=jobs,
    )

    setup = get_setup(config.setup)
    annotations = [v.annotation for v in videos]
    pairs = build_pairs(annotations, setup, config.min_shared)
    gt = ground_truth_for_pairs(annotations, pairs, setup)
    logger.info(f"🧪 Synthesized {len(videos)} videos, {len(pairs)} pairs (seed={seed}, noise={config.noise})")
    return SynthDataset(config=config, seed=seed, videos=videos, pairs=pairs, gt=gt)


def write_synth_dataset(ds: SynthDataset, out_dir: str) -> Dict[str, str]:
    """
    Write annotations.json, manifest.json, pairs.json, gt.json and one STT1
    file per video and layer under out_dir/features.

    Returns:
        name -> path of every JSON document written
    """
    feature_dir = os.path.join(out_dir, 'features')
    os.makedirs(feature_dir, exist_ok=True)

    entries = {}
    for video in ds.videos:
        vid = video.annotation.video_id
        entries[vid] = {}
        for layer_id, layer in zip(ds.config.layer_ids, video.layers):
            name = layer_filename(vid, layer_id)
            write_tensor(os.path.join(feature_dir, name), layer)
            entries[vid][layer_id] = os.path.join('features', name)

    paths = {name: os.path.join(out_dir, f"{name}.json") for name in ('annotations', 'manifest', 'pairs', 'gt')}
    save_annotations(paths['annotations'], ds.annotations)
    write_manifest(paths['manifest'], entries)
    save_pairs(paths['pairs'], PairList(pairs=ds.pairs, setup=ds.config.setup, min_shared=ds.config.min_shared))
    save_gt(paths['gt'], ds.gt)
    logger.info(f"Wrote synthetic dataset to {out_dir}")
    return paths
