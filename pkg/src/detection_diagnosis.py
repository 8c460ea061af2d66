"""
False-positive taxonomy for object detections.

Detections are matched greedily by score to ground truth; every false positive
is then labelled as poor localisation (Loc), confusion with a similar category
(Sim), confusion with another category (Oth) or a background firing (BG).
"""
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config.similarity import DIAGNOSIS_THRESHOLDS, SIMILARITY_GROUPS
from src.storage import save_table

DETECTION_COLUMNS = ['image_id', 'category', 'score', 'x_min', 'y_min', 'x_max', 'y_max']
GROUND_TRUTH_COLUMNS = ['image_id', 'category', 'x_min', 'y_min', 'x_max', 'y_max']


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(f"Degenerate box ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    category: str
    image_id: str = ''

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError(f"Detection score must be finite, got {self.score}")


@dataclass(frozen=True)
class GroundTruth:
    box: Box
    category: str
    image_id: str = ''


class FPCategory(Enum):
    LOC = 'Loc'
    SIM = 'Sim'
    OTH = 'Oth'
    BG = 'BG'


class MatchKind(Enum):
    TP = 'TP'
    FP = 'FP'
    DUPLICATE = 'duplicate'


FP_ORDER = (FPCategory.LOC, FPCategory.SIM, FPCategory.OTH, FPCategory.BG)


@dataclass
class SimilarityMap:
    """Category -> categories counted as similar. Symmetric and reflexive."""
    similar: Dict[str, FrozenSet[str]] = field(default_factory=dict)

    def __post_init__(self):
        for category, others in self.similar.items():
            for other in others:
                if category not in self.similar.get(other, frozenset()):
                    raise ValueError(f"Similarity must be symmetric: '{category}' ~ '{other}' but not the reverse")

    @classmethod
    def from_groups(cls, groups: Iterable[Sequence[str]]) -> 'SimilarityMap':
        similar = defaultdict(set)
        for group in groups:
            for category in group:
                similar[category].update(group)
        return cls({category: frozenset(others) for category, others in similar.items()})

    def is_similar(self, a: str, b: str) -> bool:
        return a == b or b in self.similar.get(a, frozenset())


def default_similarity_map() -> SimilarityMap:
    return SimilarityMap.from_groups(SIMILARITY_GROUPS)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes with continuous coordinates."""
    width = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    height = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if width <= 0 or height <= 0:
        return 0.0
    intersection = width * height
    return float(intersection / (a.area + b.area - intersection))


def _score_order(dets: Sequence[Detection]) -> List[int]:
    # stable: equal scores keep input order
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruth],
                     correct_iou: float = DIAGNOSIS_THRESHOLDS['correct_iou']) -> List[MatchKind]:
    """
    Greedy matching in descending score order, one true positive per ground truth.

    A detection is a TP when an unmatched same-category ground truth in its image
    overlaps it by at least `correct_iou` (the best-overlapping such one is taken);
    otherwise it is a duplicate when an already matched one does, else an FP.

    Returns:
        One MatchKind per detection, in input order.
    """
    if not 0.0 < correct_iou < 1.0:
        raise ValueError(f"correct_iou must be in (0, 1), got {correct_iou}")

    by_image = defaultdict(list)
    for j, gt in enumerate(gts):
        by_image[(gt.image_id, gt.category)].append(j)

    matched = np.zeros(len(gts), dtype=bool)
    kinds = [MatchKind.FP] * len(dets)
    for i in _score_order(dets):
        det = dets[i]
        best, best_overlap, duplicate = None, -1.0, False
        for j in by_image[(det.image_id, det.category)]:
            overlap = iou(det.box, gts[j].box)
            if overlap < correct_iou:
                continue
            if matched[j]:
                duplicate = True
            elif overlap > best_overlap:
                best, best_overlap = j, overlap
        if best is not None:
            matched[best] = True
            kinds[i] = MatchKind.TP
        elif duplicate:
            kinds[i] = MatchKind.DUPLICATE
    return kinds


def categorize_fp(det: Detection, gts: Sequence[GroundTruth], similarity: SimilarityMap,
                  weak_iou: float = DIAGNOSIS_THRESHOLDS['weak_iou'],
                  correct_iou: float = DIAGNOSIS_THRESHOLDS['correct_iou'],
                  duplicate: bool = False) -> FPCategory:
    """
    Loc before Sim before Oth before BG. Only ground truth in the detection's
    image is considered. A false positive overlapping a same-category box by
    correct_iou or more can only be a duplicate, so it is Loc with or without
    the `duplicate` flag.
    """
    same, similar, other = 0.0, 0.0, 0.0
    for gt in gts:
        if gt.image_id != det.image_id:
            continue
        overlap = iou(det.box, gt.box)
        if gt.category == det.category:
            same = max(same, overlap)
        elif similarity.is_similar(det.category, gt.category):
            similar = max(similar, overlap)
        else:
            other = max(other, overlap)

    if duplicate or same >= weak_iou:
        return FPCategory.LOC
    if similar >= weak_iou:
        return FPCategory.SIM
    if other >= weak_iou:
        return FPCategory.OTH
    return FPCategory.BG


@dataclass
class FPDistribution:
    category: str
    n_top: int
    counts: Dict[FPCategory, int]

    @property
    def n_fp(self) -> int:
        return sum(self.counts.values())

    @property
    def empty(self) -> bool:
        return self.n_fp == 0

    def fractions(self) -> Tuple[float, float, float, float]:
        """(Loc, Sim, Oth, BG); all zero when there are no false positives."""
        if self.empty:
            return 0.0, 0.0, 0.0, 0.0
        return tuple(self.counts[c] / self.n_fp for c in FP_ORDER)


def top_fp_distribution(dets: Sequence[Detection], gts: Sequence[GroundTruth], similarity: SimilarityMap,
                        weak_iou: float = DIAGNOSIS_THRESHOLDS['weak_iou'],
                        correct_iou: float = DIAGNOSIS_THRESHOLDS['correct_iou']) -> Dict[str, FPDistribution]:
    """
    Per category, categorises the false positives among its N highest-scoring
    detections, N being the number of ground-truth objects of that category.
    """
    kinds = match_detections(dets, gts, correct_iou)
    gt_counts = defaultdict(int)
    for gt in gts:
        gt_counts[gt.category] += 1
    det_indices = defaultdict(list)
    for i, det in enumerate(dets):
        det_indices[det.category].append(i)

    distributions = {}
    for category in sorted(set(gt_counts) | set(det_indices)):
        n_top = gt_counts[category]
        indices = det_indices[category]
        top = [indices[k] for k in _score_order([dets[i] for i in indices])][:n_top]
        counts = {c: 0 for c in FP_ORDER}
        for i in top:
            if kinds[i] is MatchKind.TP:
                continue
            label = categorize_fp(dets[i], gts, similarity, weak_iou, correct_iou,
                                  duplicate=kinds[i] is MatchKind.DUPLICATE)
            counts[label] += 1
        distributions[category] = FPDistribution(category=category, n_top=n_top, counts=counts)
    return distributions


def average_precision(dets: Sequence[Detection], gts: Sequence[GroundTruth], category: str,
                      iou_threshold: float = 0.5, use_07_metric: bool = False) -> float:
    """
    Area under the precision/recall curve of one category. The 11-point
    interpolation is used when `use_07_metric`; otherwise the all-point one.
    Returns NaN when the category has no ground truth.
    """
    cat_dets = [d for d in dets if d.category == category]
    cat_gts = [g for g in gts if g.category == category]
    if not cat_gts:
        return float('nan')
    if not cat_dets:
        return 0.0

    kinds = match_detections(cat_dets, cat_gts, iou_threshold)
    order = _score_order(cat_dets)
    tp = np.cumsum([kinds[i] is MatchKind.TP for i in order]).astype(np.float64)
    fp = np.arange(1, len(order) + 1) - tp
    recall = tp / len(cat_gts)
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)

    if use_07_metric:
        ap = 0.0
        for t in np.arange(0.0, 1.1, 0.1):
            p = precision[recall >= t].max() if np.any(recall >= t) else 0.0
            ap += p / 11.0
        return float(ap)

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def ap_table(dets: Sequence[Detection], gts: Sequence[GroundTruth], thresholds: Sequence[float] = (0.5, 0.75),
             use_07_metric: bool = False) -> pd.DataFrame:
    """One row per ground-truth category plus a 'mean' row; one AP column per threshold."""
    categories = sorted({g.category for g in gts})
    rows = []
    for category in categories:
        row = {'category': category}
        for t in thresholds:
            row[f'AP{int(round(t * 100))}'] = average_precision(dets, gts, category, t, use_07_metric)
        rows.append(row)
    table = pd.DataFrame(rows, columns=['category'] + [f'AP{int(round(t * 100))}' for t in thresholds])
    if rows:
        means = {'category': 'mean', **table.drop(columns='category').mean().to_dict()}
        table = pd.concat([table, pd.DataFrame([means])], ignore_index=True)
    return table


def _read_boxes(path: Path, columns: List[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Box file not found: {path}")
    frame = pd.read_csv(path, dtype={'image_id': str, 'category': str})
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}; expected header {','.join(columns)}")
    return frame


def _box_from_row(path: Path, line: int, row) -> Box:
    try:
        return Box(float(row.x_min), float(row.y_min), float(row.x_max), float(row.y_max))
    except ValueError as e:
        raise ValueError(f"{path}:{line}: {e}") from None


def read_detections(path: Path) -> List[Detection]:
    """Reads 'image_id,category,score,x_min,y_min,x_max,y_max' rows."""
    frame = _read_boxes(path, DETECTION_COLUMNS)
    detections = []
    for offset, row in enumerate(frame.itertuples(index=False)):
        line = offset + 2
        box = _box_from_row(path, line, row)
        if not np.isfinite(row.score):
            raise ValueError(f"{path}:{line}: score must be finite, got {row.score}")
        detections.append(Detection(box=box, score=float(row.score), category=row.category, image_id=row.image_id))
    logging.info(f"Loaded {len(detections)} detections from {path}")
    return detections


def read_ground_truth(path: Path) -> List[GroundTruth]:
    """Reads 'image_id,category,x_min,y_min,x_max,y_max' rows."""
    frame = _read_boxes(path, GROUND_TRUTH_COLUMNS)
    truths = [GroundTruth(box=_box_from_row(path, offset + 2, row), category=row.category, image_id=row.image_id)
              for offset, row in enumerate(frame.itertuples(index=False))]
    logging.info(f"Loaded {len(truths)} ground-truth boxes from {path}")
    return truths


def read_similarity_map(path: Path) -> SimilarityMap:
    """One group of similar categories per line, separated by whitespace or commas."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Similarity file not found: {path}")
    groups = []
    with open(path, encoding='utf-8') as handle:
        for line in handle:
            line = line.split('#', 1)[0].replace(',', ' ').split()
            if line:
                groups.append(line)
    return SimilarityMap.from_groups(groups)


def distribution_table(distributions: Dict[str, FPDistribution], method: Optional[str] = None) -> pd.DataFrame:
    rows = []
    for category, dist in distributions.items():
        row = {'category': category, 'n_top': dist.n_top, 'n_fp': dist.n_fp, 'empty': dist.empty}
        row.update({c.value: f for c, f in zip(FP_ORDER, dist.fractions())})
        if method is not None:
            row = {'method': method, **row}
        rows.append(row)
    return pd.DataFrame(rows)


def write_distribution_table(distributions: Dict[str, FPDistribution], path: Path,
                             method: Optional[str] = None) -> Path:
    return save_table(distribution_table(distributions, method), path)
