"""
Matcher registry. Every matcher takes the two feature pyramids and the
source keypoints of a pair and returns the transferred keypoints plus any
artifacts worth writing (flow, time alignment).
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

from services.ants import AntsParams, ants_forward
from services.feature_pipeline import FeaturePyramid, stack_correlations
from services.sequential import Alignment, dtw_align, frame_embeddings, nn_align, sequential_transfer
from services.stmatch import (
    DEFAULT_TEMPERATURE,
    DisplacementFlow,
    VideoDims,
    argmax_flow,
    stmatch_volume,
    transfer_keypoints,
)
from utils.errors import ConfigError, UnimplementedMatcherError


@dataclass
class MatchOptions:
    temperature: float = DEFAULT_TEMPERATURE
    interpolation: str = 'trilinear'
    params: Optional[AntsParams] = None
    layer_pick: int = -1  # pyramid layer embedded by the sequential baselines; -1 = deepest


@dataclass
class MatchOutput:
    keypoints: List = field(default_factory=list)
    flow: Optional[DisplacementFlow] = None
    alignment: Optional[Alignment] = None
    total_cost: Optional[float] = None


MatcherFn = Callable[[FeaturePyramid, FeaturePyramid, List, VideoDims, VideoDims, MatchOptions], MatchOutput]


def match_stmatch(pyr_s, pyr_t, kps, src_dims, tgt_dims, options: MatchOptions) -> MatchOutput:
    flow = argmax_flow(stmatch_volume(stack_correlations(pyr_s, pyr_t)))
    moved = transfer_keypoints(flow, kps, src_dims, tgt_dims, options.interpolation)
    return MatchOutput(keypoints=moved, flow=flow)


def match_ants(pyr_s, pyr_t, kps, src_dims, tgt_dims, options: MatchOptions) -> MatchOutput:
    if options.params is None:
        raise ConfigError("the ants matcher needs trained parameters (--params)")
    mv = ants_forward(stack_correlations(pyr_s, pyr_t), pyr_s, pyr_t, options.params)
    flow = argmax_flow(mv)
    moved = transfer_keypoints(flow, kps, src_dims, tgt_dims, options.interpolation)
    return MatchOutput(keypoints=moved, flow=flow)


def _layer_index(pyr: FeaturePyramid, options: MatchOptions) -> int:
    return options.layer_pick if options.layer_pick >= 0 else pyr.m + options.layer_pick


def match_sequential_nn(pyr_s, pyr_t, kps, src_dims, tgt_dims, options: MatchOptions) -> MatchOutput:
    es = frame_embeddings(pyr_s, _layer_index(pyr_s, options))
    et = frame_embeddings(pyr_t, _layer_index(pyr_t, options))
    alignment = nn_align(es, et)
    moved = sequential_transfer(alignment, pyr_s, pyr_t, kps, src_dims, tgt_dims, options.interpolation)
    return MatchOutput(keypoints=moved, alignment=alignment)


def match_sequential_dtw(pyr_s, pyr_t, kps, src_dims, tgt_dims, options: MatchOptions) -> MatchOutput:
    es = frame_embeddings(pyr_s, _layer_index(pyr_s, options))
    et = frame_embeddings(pyr_t, _layer_index(pyr_t, options))
    alignment, total = dtw_align(es, et)
    moved = sequential_transfer(alignment, pyr_s, pyr_t, kps, src_dims, tgt_dims, options.interpolation)
    return MatchOutput(keypoints=moved, alignment=alignment, total_cost=total)


# None marks a known matcher that is not implemented yet
MATCHERS: Dict[str, Optional[MatcherFn]] = {
    'st-match': match_stmatch,
    'sequential-nn': match_sequential_nn,
    'sequential-dtw': match_sequential_dtw,
    'ants': match_ants,
    'st-cats': None,
}


def get_matcher(name: str) -> MatcherFn:
    if name not in MATCHERS:
        raise ConfigError(f"unknown matcher {name!r}; known: {', '.join(MATCHERS)}")
    fn = MATCHERS[name]
    if fn is None:
        raise UnimplementedMatcherError(f"unimplemented matcher {name}")
    return fn
