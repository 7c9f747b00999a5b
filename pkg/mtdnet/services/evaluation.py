"""
Single-shot CMC evaluation and the threshold-versus-ranking case study.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import special, stats

from ..core.errors import DatasetError
from ..models import CmcCurve, LabeledImage, ScoreMatrix, Scorer

logger = logging.getLogger(__name__)


def _scorer(value: Union[str, Scorer]) -> Scorer:
    return value if isinstance(value, Scorer) else Scorer(value)


def _first_per_camera(images: Sequence[LabeledImage]) -> Dict[int, Dict[int, List[LabeledImage]]]:
    views: Dict[int, Dict[int, List[LabeledImage]]] = {}
    for img in images:
        views.setdefault(img.person_id, {1: [], 2: []})[img.camera_id].append(img)
    return dict(sorted(views.items()))


def select_single_shot(test_set: Sequence[LabeledImage], distractors: Sequence[LabeledImage],
                       seed: int = 0) -> Tuple[List[LabeledImage], List[LabeledImage]]:
    """Seeded single-shot queries (camera 1) and gallery (camera 2, then distractors)."""
    rng = np.random.default_rng(seed)
    queries: List[LabeledImage] = []
    gallery: List[LabeledImage] = []
    for pid, views in _first_per_camera(test_set).items():
        for cam in (1, 2):
            if not views[cam]:
                raise DatasetError(f"Test identity {pid} has no camera-{cam} image")
        queries.append(views[1][rng.integers(len(views[1]))])
        gallery.append(views[2][rng.integers(len(views[2]))])
    if not queries:
        raise DatasetError("Test set is empty")
    test_ids = {img.person_id for img in queries}
    for pid, views in _first_per_camera(distractors).items():
        if pid in test_ids:
            raise DatasetError(f"Distractor identity {pid} also appears in the test set")
        pool = views[2] or views[1]
        gallery.append(pool[rng.integers(len(pool))])
    return queries, gallery


def build_single_shot_eval(test_set: Sequence[LabeledImage], distractors: Sequence[LabeledImage], net,
                           scorer: Union[str, Scorer] = Scorer.CLS_PROB, seed: int = 0) -> ScoreMatrix:
    """Score every query against the gallery; query ``i`` matches gallery item ``i``."""
    queries, gallery = select_single_shot(test_set, distractors, seed)
    scores = net.score_matrix(
        np.stack([img.image for img in queries]),
        np.stack([img.image for img in gallery]),
        _scorer(scorer),
    )
    return ScoreMatrix(
        scores=scores,
        match=np.arange(len(queries)),
        query_ids=[img.person_id for img in queries],
        gallery_ids=[img.person_id for img in gallery],
    )


def match_ranks(matrix: ScoreMatrix) -> np.ndarray:
    """1-based rank of each query's match; tied scores count against the match."""
    ranks = stats.rankdata(-matrix.scores, method="max", axis=1)
    return ranks[np.arange(matrix.n_queries), matrix.match].astype(np.int64)


def cmc(matrix: ScoreMatrix) -> CmcCurve:
    """Cumulative match characteristic over ranks 1..gallery size."""
    if matrix.n_queries == 0:
        raise ValueError("CMC needs at least one query")
    ranks = match_ranks(matrix)
    hits = np.bincount(ranks - 1, minlength=matrix.gallery_size)
    accuracies = np.cumsum(hits) / matrix.n_queries
    return CmcCurve(accuracies=accuracies, n_queries=matrix.n_queries, gallery_size=matrix.gallery_size)


def mean_curve(curves: Sequence[CmcCurve]) -> CmcCurve:
    if not curves:
        raise ValueError("No CMC curves to average")
    length = min(len(c.accuracies) for c in curves)
    return CmcCurve(
        accuracies=np.mean([c.accuracies[:length] for c in curves], axis=0),
        n_queries=curves[0].n_queries,
        gallery_size=curves[0].gallery_size,
    )


def evaluate(net, test_set: Sequence[LabeledImage], distractors: Sequence[LabeledImage] = (),
             scorer: Union[str, Scorer] = Scorer.CLS_PROB, seeds: Sequence[int] = (0,)) -> CmcCurve:
    """CMC averaged over gallery-selection seeds."""
    curves = [cmc(build_single_shot_eval(test_set, distractors, net, scorer, seed)) for seed in seeds]
    curve = mean_curve(curves)
    summary = ", ".join(f"{k} {v:.4f}" for k, v in curve.summary().items())
    logger.info(f"CMC over {len(list(seeds))} seeds ({curve.n_queries} queries, gallery {curve.gallery_size}): {summary}")
    return curve


# ---------------------------------------------------------------------------
# Case study: a low classification loss does not imply a correct ranking
# ---------------------------------------------------------------------------

# per query: (positive score, negative scores)
CASE_1 = [(0.9, (0.8, 0.7)), (0.6, (0.5, 0.45)), (0.4, (0.3, 0.35))]
CASE_2 = [(0.9, (0.4, 0.3)), (0.8, (0.2, 0.1)), (0.7, (0.75, 0.35))]

BETA_GRID = np.geomspace(0.1, 200.0, 80)
THRESHOLD_GRID = np.linspace(-0.5, 1.5, 401)


@dataclass
class CaseResult:
    """Ranking and thresholding quality of one score layout."""
    name: str
    rank1: float
    best_loss: float
    best_beta: float
    best_threshold: float
    min_errors: int


@dataclass
class CaseStudyReport:
    cases: List[CaseResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        first, second = self.cases
        return first.rank1 == 1.0 and second.rank1 < 1.0 and second.best_loss < first.best_loss

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(c) for c in self.cases])

    def summary(self) -> str:
        lines = [
            f"{c.name}: rank-1 {c.rank1:.4f}, best cross-entropy {c.best_loss:.4f} "
            f"(beta {c.best_beta:.3g}, threshold {c.best_threshold:.3f}), min threshold errors {c.min_errors}"
            for c in self.cases
        ]
        first, second = self.cases
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(
            f"{verdict}: rank-1 {first.name} = {first.rank1:.4f} > {second.name} = {second.rank1:.4f}, "
            f"while loss {second.name} = {second.best_loss:.4f} < {first.name} = {first.best_loss:.4f}"
        )
        return "\n".join(lines)


def _layout(case: Sequence[Tuple[float, Sequence[float]]]) -> Tuple[ScoreMatrix, np.ndarray, np.ndarray]:
    scores = np.array([[pos, *negs] for pos, negs in case])
    labels = np.zeros_like(scores)
    labels[:, 0] = 1
    return ScoreMatrix(scores=scores, match=np.zeros(len(case), dtype=np.int64)), scores.ravel(), labels.ravel()


def best_logistic_loss(scores: np.ndarray, labels: np.ndarray) -> Tuple[float, float, float]:
    """Minimum total cross-entropy of ``p = sigmoid(beta * (s - t))`` over the grid."""
    z = BETA_GRID[:, None, None] * (scores[None, None, :] - THRESHOLD_GRID[None, :, None])
    loss = -np.where(labels == 1, special.log_expit(z), special.log_expit(-z)).sum(axis=-1)
    b, t = np.unravel_index(np.argmin(loss), loss.shape)
    return float(loss[b, t]), float(BETA_GRID[b]), float(THRESHOLD_GRID[t])


def min_threshold_errors(scores: np.ndarray, labels: np.ndarray) -> int:
    """Fewest mistakes of any global rule ``same iff s > t``."""
    cuts = np.concatenate([[-np.inf], np.unique(scores)])
    errors = [int(np.sum((scores > t) != (labels == 1))) for t in cuts]
    return min(errors)


def fig1_case_study() -> CaseStudyReport:
    """Two layouts: one ranks every query correctly but admits no global threshold,
    the other is nearly separable by a threshold but has a false rank-1 match."""
    report = CaseStudyReport()
    for name, case in (("case 1", CASE_1), ("case 2", CASE_2)):
        matrix, scores, labels = _layout(case)
        loss, beta, threshold = best_logistic_loss(scores, labels)
        report.cases.append(CaseResult(
            name=name,
            rank1=cmc(matrix).rank(1),
            best_loss=loss,
            best_beta=beta,
            best_threshold=threshold,
            min_errors=min_threshold_errors(scores, labels),
        ))
    return report


def curve_frame(curve: CmcCurve, max_rank: Optional[int] = None) -> pd.DataFrame:
    """``rank,accuracy`` rows of a CMC curve."""
    n = len(curve.accuracies) if max_rank is None else min(max_rank, len(curve.accuracies))
    return pd.DataFrame({"rank": np.arange(1, n + 1), "accuracy": curve.accuracies[:n]})
