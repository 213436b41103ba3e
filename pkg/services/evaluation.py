"""
T@k-PCK@alpha: a predicted keypoint is correct when it lands within k
frames and within alpha * b pixels of the ground truth, b being the larger
side of the bounding box around the visible ground-truth keypoints of the
target frame.
"""
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

from services.benchmark import (
    OBJECT_IDS,
    PairCorrespondences,
    SetupSpec,
    SpaceTimeKeypoint,
    VideoAnnotation,
)
from utils.errors import EvaluationError
from utils.logger import setup_logger

logger = setup_logger(__name__)

CSV_COLUMNS = ['setup', 'action', 'class', 'k', 'accuracy', 'n']


@dataclass
class EvalConfig:
    alpha: float = 0.1
    ks: List[int] = field(default_factory=lambda: [1, 3, 5])
    class_map: Optional[Dict[int, str]] = None

    def __post_init__(self):
        if self.alpha <= 0:
            raise EvaluationError(f"alpha must be positive, got {self.alpha}")
        if not self.ks or min(self.ks) < 0:
            raise EvaluationError(f"ks must be non-negative integers, got {self.ks}")
        self.ks = sorted(int(k) for k in self.ks)

    @classmethod
    def for_setup(cls, setup: SetupSpec, alpha: float = 0.1, ks: Sequence[int] = (1, 3, 5)) -> "EvalConfig":
        class_map = {t: setup.keypoint_class(t) for t in setup.allowed}
        return cls(alpha=alpha, ks=list(ks), class_map=class_map)

    def keypoint_class(self, type_id: int) -> str:
        if self.class_map and type_id in self.class_map:
            return self.class_map[type_id]
        return 'object' if type_id in OBJECT_IDS else 'human'


@dataclass
class PairPredictions:
    """Predicted target keypoint for each source keypoint of a pair"""
    src: str
    tgt: str
    predictions: List[Tuple[SpaceTimeKeypoint, SpaceTimeKeypoint]] = field(default_factory=list)


@dataclass
class EvalReport:
    """Accuracies in percent keyed by k; counts are judged keypoints"""
    ks: List[int]
    overall: Dict[int, float]
    per_action: Dict[str, Dict[int, float]]
    per_class: Dict[str, Dict[int, float]]
    n_overall: int
    n_action: Dict[str, int]
    n_class: Dict[str, int]
    alpha: float = 0.1

    def to_dict(self) -> dict:
        def keyed(acc):
            return {str(k): v for k, v in acc.items()}
        return {
            'alpha': self.alpha,
            'ks': self.ks,
            'overall': {'accuracy': keyed(self.overall), 'n': self.n_overall},
            'per_action': {a: {'accuracy': keyed(acc), 'n': self.n_action[a]} for a, acc in self.per_action.items()},
            'per_class': {c: {'accuracy': keyed(acc), 'n': self.n_class[c]} for c, acc in self.per_class.items()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        def unkeyed(acc):
            return {int(k): float(v) for k, v in acc.items()}
        return cls(
            ks=[int(k) for k in doc['ks']],
            overall=unkeyed(doc['overall']['accuracy']),
            per_action={a: unkeyed(v['accuracy']) for a, v in doc['per_action'].items()},
            per_class={c: unkeyed(v['accuracy']) for c, v in doc['per_class'].items()},
            n_overall=int(doc['overall']['n']),
            n_action={a: int(v['n']) for a, v in doc['per_action'].items()},
            n_class={c: int(v['n']) for c, v in doc['per_class'].items()},
            alpha=float(doc.get('alpha', 0.1)),
        )

    def rows(self, setup: str = '') -> List[dict]:
        rows = []
        for k in self.ks:
            rows.append({'setup': setup, 'action': 'all', 'class': 'all', 'k': k,
                         'accuracy': self.overall[k], 'n': self.n_overall})
            for action in sorted(self.per_action):
                rows.append({'setup': setup, 'action': action, 'class': 'all', 'k': k,
                             'accuracy': self.per_action[action][k], 'n': self.n_action[action]})
            for cls_name in ('human', 'object'):
                if cls_name in self.per_class:
                    rows.append({'setup': setup, 'action': 'all', 'class': cls_name, 'k': k,
                                 'accuracy': self.per_class[cls_name][k], 'n': self.n_class[cls_name]})
        return rows


def bbox_scale(frame_keypoints: Sequence[SpaceTimeKeypoint]) -> float:
    """Larger side of the bounding box of the visible keypoints, at least 1 pixel"""
    visible = [kp for kp in frame_keypoints if kp.visible]
    if not visible:
        raise EvaluationError("no visible keypoints to size the bounding box")
    xs = [kp.x for kp in visible]
    ys = [kp.y for kp in visible]
    return max(max(xs) - min(xs), max(ys) - min(ys), 1.0)


def judge_keypoint(pred: SpaceTimeKeypoint, gt: SpaceTimeKeypoint, k: int, alpha: float, b: float) -> bool:
    return abs(pred.t - gt.t) <= k and math.hypot(pred.x - gt.x, pred.y - gt.y) <= alpha * b


def _accuracy(correct: Dict[int, int], n: int, ks: Sequence[int]) -> Dict[int, float]:
    return {k: (100.0 * correct[k] / n if n else 0.0) for k in ks}


def evaluate(predictions: Sequence[PairPredictions], ground_truth: Sequence[PairCorrespondences],
             annotations: Sequence[VideoAnnotation], config: EvalConfig,
             actions: Optional[Dict[Tuple[str, str], str]] = None) -> EvalReport:
    """
    Score predictions against ground-truth correspondences.

    Predictions are matched to GT by (type_id, source frame). A GT keypoint
    without a prediction counts as incorrect.

    Args:
        predictions: per-pair predicted keypoints
        ground_truth: per-pair GT matches
        annotations: videos, for actions and the target-frame bounding boxes
        config: alpha, ks and the keypoint class map
        actions: (src, tgt) -> action for pairs whose videos are not annotated

    Returns:
        EvalReport with overall, per-action and per-class accuracies
    """
    by_id = {v.video_id: v for v in annotations}
    gt_pairs = {(p.src, p.tgt): p for p in ground_truth}

    index: Dict[Tuple[str, str], Dict[Tuple[int, int], SpaceTimeKeypoint]] = {}
    for pair in predictions:
        key = (pair.src, pair.tgt)
        if key not in gt_pairs:
            raise EvaluationError(f"prediction for unknown pair {pair.src}->{pair.tgt}")
        index[key] = {(src.type_id, int(src.t)): pred for src, pred in pair.predictions}

    correct = defaultdict(lambda: defaultdict(int))
    counts = defaultdict(int)
    n_missing = 0
    for key, gt_pair in gt_pairs.items():
        tgt_video = by_id.get(gt_pair.tgt)
        if tgt_video is not None:
            action = tgt_video.action
        else:
            action = (actions or {}).get(key, 'unknown')
        pair_preds = index.get(key, {})

        for src_kp, gt_kp in gt_pair.matches:
            if tgt_video is not None and tgt_video.frame_keypoints(gt_kp.t):
                b = bbox_scale(tgt_video.frame_keypoints(gt_kp.t))
            else:
                b = bbox_scale([t for _, t in gt_pair.matches if t.t == gt_kp.t])

            groups = ('all', 'action:' + action, 'class:' + config.keypoint_class(gt_kp.type_id))
            for group in groups:
                counts[group] += 1

            pred = pair_preds.get((src_kp.type_id, int(src_kp.t)))
            if pred is None:
                n_missing += 1
                continue
            for k in config.ks:
                if judge_keypoint(pred, gt_kp, k, config.alpha, b):
                    for group in groups:
                        correct[group][k] += 1

    if n_missing:
        logger.warning(f"{n_missing} ground-truth keypoints have no prediction; counted as incorrect")

    ks = config.ks
    action_names = sorted(g.split(':', 1)[1] for g in counts if g.startswith('action:'))
    per_class = {c: _accuracy(correct['class:' + c], counts['class:' + c], ks)
                 for c in ('human', 'object') if counts['class:' + c]}
    per_class['all'] = _accuracy(correct['all'], counts['all'], ks)
    n_class = {c: counts['class:' + c] for c in per_class if c != 'all'}
    n_class['all'] = counts['all']

    report = EvalReport(
        ks=list(ks),
        overall=_accuracy(correct['all'], counts['all'], ks),
        per_action={a: _accuracy(correct['action:' + a], counts['action:' + a], ks) for a in action_names},
        per_class=per_class,
        n_overall=counts['all'],
        n_action={a: counts['action:' + a] for a in action_names},
        n_class=n_class,
        alpha=config.alpha,
    )
    logger.info(f"📊 Evaluated {report.n_overall} keypoints: "
                + ", ".join(f"T@{k}={report.overall[k]:.1f}" for k in ks))
    return report


def restrict_setup(ground_truth: Sequence[PairCorrespondences], setup: SetupSpec) -> List[PairCorrespondences]:
    """Keep only GT matches whose type belongs to the setup (cross-setup evaluation)"""
    allowed = setup.allowed
    return [PairCorrespondences(p.src, p.tgt, [(s, t) for s, t in p.matches if s.type_id in allowed])
            for p in ground_truth]


def summarize_runs(reports: Sequence[EvalReport], setup: str = '') -> pd.DataFrame:
    """Mean and (population) standard deviation of every accuracy across repeated runs"""
    if not reports:
        raise EvaluationError("no reports to summarize")
    frame = pd.DataFrame([row for report in reports for row in report.rows(setup)], columns=CSV_COLUMNS)
    grouped = frame.groupby(['setup', 'action', 'class', 'k'], sort=True)
    summary = grouped.agg(mean=('accuracy', 'mean'), n=('n', 'sum'), runs=('accuracy', 'size'))
    summary['std'] = grouped['accuracy'].std(ddof=0)
    return summary.reset_index()[['setup', 'action', 'class', 'k', 'mean', 'std', 'n', 'runs']]


# ---------------------------------------------------------------------------
# predictions and reports on disk


def _point(kp: SpaceTimeKeypoint) -> dict:
    return {'x': float(kp.x), 'y': float(kp.y), 't': int(kp.t)}


def save_predictions(path: str, matcher: str, pairs: Sequence[PairPredictions]):
    doc = {
        'matcher': matcher,
        'pairs': [
            {'src': p.src, 'tgt': p.tgt, 'predictions': [
                {'type_id': int(s.type_id), 'src': _point(s), 'pred': _point(t)} for s, t in p.predictions
            ]}
            for p in pairs
        ],
    }
    with open(path, 'w', encoding='utf-8') as fh:
        json.dump(doc, fh, indent=2)


def load_predictions(path: str) -> Tuple[str, List[PairPredictions]]:
    try:
        with open(path, 'r', encoding='utf-8') as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise EvaluationError(f"{path}: not valid JSON ({e})") from e

    pairs = []
    for p in doc['pairs']:
        preds = []
        for entry in p['predictions']:
            type_id = int(entry['type_id'])
            preds.append((SpaceTimeKeypoint.from_dict(entry['src'], type_id),
                          SpaceTimeKeypoint.from_dict(entry['pred'], type_id)))
        pairs.append(PairPredictions(str(p['src']), str(p['tgt']), preds))
    return str(doc.get('matcher', '')), pairs


def write_report_json(path: str, report: EvalReport, setup: str = '', matcher: str = ''):
    doc = {'setup': setup, 'matcher': matcher}
    doc.update(report.to_dict())
    with open(path, 'w', encoding='utf-8') as fh:
        json.dump(doc, fh, indent=2)


def write_report_csv(path: str, report: EvalReport, setup: str = ''):
    """One row per (setup, action, class, k) for plotting"""
    pd.DataFrame(report.rows(setup), columns=CSV_COLUMNS).to_csv(path, index=False)
