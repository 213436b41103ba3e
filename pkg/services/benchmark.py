"""
Benchmark data model: space-time keypoint annotations, pair construction,
clip sampling and geometric augmentation, plus JSON readers/writers for
annotations, pair lists and ground-truth correspondences.
"""
import json
import math
from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from config import Config
from services.stmatch import VideoDims
from utils.errors import AnnotationError, ClipError, ConfigError
from utils.logger import setup_logger

logger = setup_logger(__name__)

# Penn Action joint order, followed by the annotated object keypoints
KEYPOINT_NAMES = [
    'head',
    'left_shoulder', 'right_shoulder',
    'left_elbow', 'right_elbow',
    'left_wrist', 'right_wrist',
    'left_hip', 'right_hip',
    'left_knee', 'right_knee',
    'left_ankle', 'right_ankle',
    'object_primary', 'object_secondary', 'object_tertiary',
]
HUMAN_IDS = frozenset(range(13))
OBJECT_IDS = frozenset(range(13, 16))


@dataclass(frozen=True)
class SpaceTimeKeypoint:
    """Keypoint (x, y) in pixels at integer frame t"""
    x: float
    y: float
    t: int
    type_id: int
    visible: bool = True

    def to_dict(self) -> dict:
        return {'t': int(self.t), 'type_id': int(self.type_id), 'x': float(self.x),
                'y': float(self.y), 'visible': bool(self.visible)}

    @classmethod
    def from_dict(cls, raw: dict, type_id: Optional[int] = None) -> "SpaceTimeKeypoint":
        return cls(
            x=float(raw['x']),
            y=float(raw['y']),
            t=int(raw['t']),
            type_id=int(raw['type_id'] if type_id is None else type_id),
            visible=bool(raw.get('visible', True)),
        )

    def inside(self, dims: VideoDims) -> bool:
        return (0 <= self.x <= dims.w - 1 and 0 <= self.y <= dims.h - 1
                and 0 <= self.t <= dims.t - 1)


@dataclass
class VideoAnnotation:
    video_id: str
    action: str
    split: str
    dims: VideoDims
    key_moments: List[int]
    keypoints: Dict[int, List[SpaceTimeKeypoint]] = field(default_factory=dict)

    def frame_keypoints(self, t: int) -> List[SpaceTimeKeypoint]:
        return self.keypoints.get(t, [])

    def all_keypoints(self) -> List[SpaceTimeKeypoint]:
        return [kp for t in self.key_moments for kp in self.keypoints.get(t, [])]

    def visible_types(self, t: int, allowed: Optional[FrozenSet[int]] = None) -> FrozenSet[int]:
        return frozenset(kp.type_id for kp in self.frame_keypoints(t)
                         if kp.visible and (allowed is None or kp.type_id in allowed))

    def keypoint(self, t: int, type_id: int) -> Optional[SpaceTimeKeypoint]:
        for kp in self.frame_keypoints(t):
            if kp.type_id == type_id:
                return kp
        return None


@dataclass(frozen=True)
class SetupSpec:
    name: str
    human_ids: FrozenSet[int]
    object_ids: FrozenSet[int]

    def __post_init__(self):
        overlap = self.human_ids & self.object_ids
        if overlap:
            raise ConfigError(f"setup {self.name}: ids {sorted(overlap)} are both human and object")

    @property
    def allowed(self) -> FrozenSet[int]:
        return self.human_ids | self.object_ids

    def keypoint_class(self, type_id: int) -> str:
        return 'object' if type_id in self.object_ids else 'human'


SETUPS: Dict[str, SetupSpec] = {
    '3+3': SetupSpec('3+3', frozenset({0, 5, 6}), OBJECT_IDS),
    '13+3': SetupSpec('13+3', HUMAN_IDS, OBJECT_IDS),
    # human keypoints of 13+3 that are not in 3+3, for cross-setup evaluation
    'r10': SetupSpec('r10', HUMAN_IDS - {0, 5, 6}, frozenset()),
}


def get_setup(name: str) -> SetupSpec:
    if name not in SETUPS:
        raise ConfigError(f"unknown setup {name!r}; known: {', '.join(SETUPS)}")
    return SETUPS[name]


@dataclass
class VideoPair:
    """Ordered pair; shared[i] lists the type ids visible in both at key moment i"""
    src: str
    tgt: str
    shared: List[List[int]] = field(default_factory=list)


@dataclass
class PairList:
    pairs: List[VideoPair]
    setup: str
    min_shared: int


@dataclass
class PairCorrespondences:
    """Ground-truth matches of one pair; each match is (src keypoint, tgt keypoint)"""
    src: str
    tgt: str
    matches: List[Tuple[SpaceTimeKeypoint, SpaceTimeKeypoint]] = field(default_factory=list)


@dataclass(frozen=True)
class TimeWindow:
    start: int
    length: int


@dataclass(frozen=True)
class CropBox:
    x0: float
    y0: float
    width: float
    height: float


@dataclass(frozen=True)
class GeometricTransform:
    crop: CropBox
    out_size: Tuple[int, int]
    window: TimeWindow


# ---------------------------------------------------------------------------
# annotations


def validate_annotation(video: VideoAnnotation):
    """Raise AnnotationError naming the video when an invariant is broken"""
    moments = video.key_moments
    if any(b <= a for a, b in zip(moments, moments[1:])):
        raise AnnotationError(f"key moments not strictly increasing: {moments}", video.video_id)
    for t in moments:
        if not 0 <= t < video.dims.t:
            raise AnnotationError(f"key moment {t} outside {video.dims.t} frames", video.video_id)
    for t, kps in video.keypoints.items():
        if t not in moments:
            raise AnnotationError(f"keypoint at frame {t} which is not a key moment", video.video_id)
        for kp in kps:
            if kp.visible and not kp.inside(video.dims):
                raise AnnotationError(f"visible keypoint {kp} outside dims {video.dims}", video.video_id)


def annotation_from_dict(raw: dict) -> VideoAnnotation:
    video_id = raw.get('id')
    try:
        dims = VideoDims(int(raw['dims']['t']), int(raw['dims']['h']), int(raw['dims']['w']))
        keypoints: Dict[int, List[SpaceTimeKeypoint]] = {}
        for kp_raw in raw.get('keypoints', []):
            kp = SpaceTimeKeypoint.from_dict(kp_raw)
            keypoints.setdefault(kp.t, []).append(kp)
        video = VideoAnnotation(
            video_id=str(video_id),
            action=str(raw['action']),
            split=str(raw['split']),
            dims=dims,
            key_moments=[int(t) for t in raw['key_moments']],
            keypoints=keypoints,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise AnnotationError(f"malformed entry: {e}", video_id) from e
    validate_annotation(video)
    return video


def annotation_to_dict(video: VideoAnnotation) -> dict:
    return {
        'id': video.video_id,
        'action': video.action,
        'split': video.split,
        'dims': {'t': video.dims.t, 'h': video.dims.h, 'w': video.dims.w},
        'key_moments': list(video.key_moments),
        'keypoints': [kp.to_dict() for kp in video.all_keypoints()],
    }


def load_annotations(path: str) -> List[VideoAnnotation]:
    """Parse and validate an annotation file"""
    try:
        with open(path, 'r', encoding='utf-8') as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise AnnotationError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(doc, dict) or not isinstance(doc.get('videos'), list):
        raise AnnotationError(f"{path}: expected an object with a 'videos' list")

    videos = [annotation_from_dict(raw) for raw in doc['videos']]
    seen = set()
    for video in videos:
        if video.video_id in seen:
            raise AnnotationError("duplicate video id", video.video_id)
        seen.add(video.video_id)
    logger.info(f"Loaded {len(videos)} annotated videos from {path}")
    return videos


def save_annotations(path: str, videos: Sequence[VideoAnnotation]):
    with open(path, 'w', encoding='utf-8') as fh:
        json.dump({'videos': [annotation_to_dict(v) for v in videos]}, fh, indent=2)


# ---------------------------------------------------------------------------
# pairs


def build_pairs(annotations: Sequence[VideoAnnotation], setup: SetupSpec,
                min_shared: int = Config.DEFAULT_MIN_SHARED) -> List[VideoPair]:
    """
    Every ordered pair (A, B), A != B, with the same action and split whose
    key moments each share at least `min_shared` visible keypoint types
    (after filtering to the setup's types). Both orders are emitted.
    """
    if min_shared < 1:
        raise ConfigError(f"min_shared must be >= 1, got {min_shared}")

    allowed = setup.allowed
    pairs = []
    for a in annotations:
        for b in annotations:
            if a.video_id == b.video_id or a.action != b.action or a.split != b.split:
                continue
            if len(a.key_moments) != len(b.key_moments):
                logger.debug(f"Skipping {a.video_id}/{b.video_id}: key moment counts differ")
                continue

            shared = []
            for ta, tb in zip(a.key_moments, b.key_moments):
                common = a.visible_types(ta, allowed) & b.visible_types(tb, allowed)
                if len(common) < min_shared:
                    break
                shared.append(sorted(common))
            else:
                pairs.append(VideoPair(a.video_id, b.video_id, shared))

    logger.info(f"Built {len(pairs)} ordered pairs for setup {setup.name} (min_shared={min_shared})")
    return pairs


def save_pairs(path: str, pair_list: PairList):
    doc = {
        'setup': pair_list.setup,
        'min_shared': pair_list.min_shared,
        'pairs': [{'src': p.src, 'tgt': p.tgt, 'shared': p.shared} for p in pair_list.pairs],
    }
    with open(path, 'w', encoding='utf-8') as fh:
        json.dump(doc, fh, indent=2)


def load_pairs(path: str) -> PairList:
    with open(path, 'r', encoding='utf-8') as fh:
        doc = json.load(fh)
    pairs = [VideoPair(str(p['src']), str(p['tgt']), [[int(t) for t in moment] for moment in p.get('shared', [])])
             for p in doc['pairs']]
    return PairList(pairs=pairs, setup=str(doc['setup']), min_shared=int(doc['min_shared']))


def ground_truth_for_pairs(annotations: Sequence[VideoAnnotation], pairs: Sequence[VideoPair],
                           setup: Optional[SetupSpec] = None) -> List[PairCorrespondences]:
    """Key moment i of the source corresponds to key moment i of the target, type by type"""
    by_id = {v.video_id: v for v in annotations}
    allowed = setup.allowed if setup else None
    result = []
    for pair in pairs:
        a, b = by_id[pair.src], by_id[pair.tgt]
        matches = []
        for ta, tb in zip(a.key_moments, b.key_moments):
            for type_id in sorted(a.visible_types(ta, allowed) & b.visible_types(tb, allowed)):
                matches.append((a.keypoint(ta, type_id), b.keypoint(tb, type_id)))
        result.append(PairCorrespondences(pair.src, pair.tgt, matches))
    return result


def _point(kp: SpaceTimeKeypoint) -> dict:
    return {'x': float(kp.x), 'y': float(kp.y), 't': int(kp.t)}


def correspondences_to_dict(pairs: Sequence[PairCorrespondences]) -> dict:
    return {'pairs': [
        {'src': p.src, 'tgt': p.tgt, 'matches': [
            {'type_id': int(s.type_id), 'src': _point(s), 'tgt': _point(t)} for s, t in p.matches
        ]}
        for p in pairs
    ]}


def correspondences_from_dict(doc: dict) -> List[PairCorrespondences]:
    result = []
    for p in doc['pairs']:
        matches = []
        for m in p['matches']:
            type_id = int(m['type_id'])
            matches.append((SpaceTimeKeypoint.from_dict(m['src'], type_id),
                            SpaceTimeKeypoint.from_dict(m['tgt'], type_id)))
        result.append(PairCorrespondences(str(p['src']), str(p['tgt']), matches))
    return result


def save_gt(path: str, pairs: Sequence[PairCorrespondences]):
    with open(path, 'w', encoding='utf-8') as fh:
        json.dump(correspondences_to_dict(pairs), fh, indent=2)


def load_gt(path: str) -> List[PairCorrespondences]:
    with open(path, 'r', encoding='utf-8') as fh:
        return correspondences_from_dict(json.load(fh))


def load_freeform_pairs(path: str) -> Tuple[List[PairCorrespondences], Dict[Tuple[str, str], str]]:
    """
    Read Pouring-style pairs annotated independently per pair: type ids are
    local to each pair and there is no shared vocabulary.

    Returns the correspondences and a (src, tgt) -> action map.
    """
    with open(path, 'r', encoding='utf-8') as fh:
        doc = json.load(fh)
    pairs = correspondences_from_dict(doc)
    actions = {(str(p['src']), str(p['tgt'])): str(p.get('action', 'free-form')) for p in doc['pairs']}
    for pair in pairs:
        keys = [(s.type_id, s.t) for s, _ in pair.matches]
        if len(keys) != len(set(keys)):
            raise AnnotationError(f"pair {pair.src}->{pair.tgt} repeats a type id within a frame")
    logger.info(f"Loaded {len(pairs)} free-form pairs from {path}")
    return pairs, actions


# ---------------------------------------------------------------------------
# clip sampling and augmentation


def sample_clip(video: VideoAnnotation, clip_len: int = Config.DEFAULT_CLIP_LEN,
                rng: Optional[np.random.Generator] = None) -> Tuple[TimeWindow, List[SpaceTimeKeypoint]]:
    """
    Uniformly random clip_len-frame window covering every key moment.

    Returns the window and the video's keypoints re-indexed to
    window-relative frames.
    """
    rng = rng if rng is not None else np.random.default_rng()
    if video.dims.t < clip_len:
        raise ClipError(f"video {video.video_id} has {video.dims.t} frames, shorter than clip length {clip_len}")
    first, last = video.key_moments[0], video.key_moments[-1]
    if last - first + 1 > clip_len:
        raise ClipError(f"video {video.video_id}: key moments span frames {first}..{last}, "
                        f"more than clip length {clip_len}")

    lo = max(0, last - clip_len + 1)
    hi = min(first, video.dims.t - clip_len)
    start = int(rng.integers(lo, hi + 1))
    window = TimeWindow(start, clip_len)
    shifted = [replace(kp, t=kp.t - start) for kp in video.all_keypoints()]
    return window, shifted


def _sample_crop(dims: VideoDims, rng: np.random.Generator, min_area: float = 0.5,
                 ratio: Tuple[float, float] = (3 / 4, 4 / 3), attempts: int = 10) -> CropBox:
    frame_area = dims.w * dims.h
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(attempts):
        area = frame_area * rng.uniform(min_area, 1.0)
        aspect = math.exp(rng.uniform(*log_ratio))
        width = int(round(math.sqrt(area * aspect)))
        height = int(round(math.sqrt(area / aspect)))
        if (0 < width <= dims.w and 0 < height <= dims.h and width * height >= min_area * frame_area
                and ratio[0] <= width / height <= ratio[1]):
            x0 = int(rng.integers(0, dims.w - width + 1))
            y0 = int(rng.integers(0, dims.h - height + 1))
            return CropBox(x0, y0, width, height)
    return _central_crop(dims, ratio)


def _central_crop(dims: VideoDims, ratio: Tuple[float, float]) -> CropBox:
    """Largest centred box whose aspect lies within ratio"""
    width, height = dims.w, dims.h
    if width / height < ratio[0]:
        height = int(math.floor(width / ratio[0]))
    elif width / height > ratio[1]:
        width = int(math.floor(height * ratio[1]))
    return CropBox((dims.w - width) // 2, (dims.h - height) // 2, width, height)


def geometric_augment(window: TimeWindow, keypoints: Sequence[SpaceTimeKeypoint], dims: VideoDims,
                      crop_prob: float = Config.DEFAULT_CROP_PROB,
                      out_size: Tuple[int, int] = Config.DEFAULT_OUT_SIZE,
                      rng: Optional[np.random.Generator] = None,
                      crop: Optional[CropBox] = None) -> Tuple[GeometricTransform, List[SpaceTimeKeypoint]]:
    """
    Crop (with probability crop_prob) and rescale a clip to out_size.

    One crop box is drawn per clip so every frame gets the same transform.
    Keypoints are shifted and scaled; the ones falling outside the crop
    become invisible.

    Args:
        window: clip window the keypoints belong to
        keypoints: window-relative keypoints in source pixels
        dims: source frame size (only h and w are used)
        crop_prob: probability of cropping
        out_size: (height, width) of the output frames
        rng: random generator
        crop: force this crop box instead of sampling one
    """
    rng = rng if rng is not None else np.random.default_rng()
    if crop is None:
        do_crop = rng.random() < crop_prob
        crop = _sample_crop(dims, rng) if do_crop else CropBox(0, 0, dims.w, dims.h)

    transform = GeometricTransform(crop=crop, out_size=tuple(out_size), window=window)
    out_h, out_w = transform.out_size
    sx, sy = out_w / crop.width, out_h / crop.height

    result = []
    for kp in keypoints:
        inside = crop.x0 <= kp.x < crop.x0 + crop.width and crop.y0 <= kp.y < crop.y0 + crop.height
        result.append(replace(kp, x=(kp.x - crop.x0) * sx, y=(kp.y - crop.y0) * sy,
                              visible=kp.visible and inside))
    return transform, result


def invert_augment(transform: GeometricTransform, keypoints: Iterable[SpaceTimeKeypoint]) -> List[SpaceTimeKeypoint]:
    """Map augmented keypoints back into source pixel coordinates"""
    crop = transform.crop
    out_h, out_w = transform.out_size
    return [replace(kp, x=kp.x * crop.width / out_w + crop.x0, y=kp.y * crop.height / out_h + crop.y0)
            for kp in keypoints]
