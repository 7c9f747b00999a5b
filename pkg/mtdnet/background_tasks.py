"""
Background tasks for the MTDnet engine.
Runs periodic evaluation of a training run on frozen parameter snapshots so the
optimisation loop does not wait for it.
"""
import logging
from concurrent.futures import Future, ThreadPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .models import CmcCurve, LabeledImage, Scorer
from .services.evaluation import evaluate

logger = logging.getLogger(__name__)

EvalData = Tuple[Sequence[LabeledImage], Sequence[LabeledImage]]


class BackgroundEvaluator:
    """Manager for periodic CMC evaluation on a worker thread."""

    def __init__(self, eval_data: EvalData, scorer: Scorer, seeds: Sequence[int] = (0,),
                 evaluate_fn: Optional[Callable[..., CmcCurve]] = None):
        self.test_set, self.distractors = eval_data
        self.scorer = scorer
        self.seeds = tuple(seeds)
        self.evaluate_fn = evaluate_fn or evaluate
        self.pending: List[Tuple[int, Future]] = []
        self.results: List[Dict[str, float]] = []
        self.running = False
        self._executor: Optional[ThreadPoolExecutor] = None

    def start(self):
        """Start the worker thread."""
        self.running = True
        self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix="mtdnet-eval")
        logger.info("Starting background evaluator")

    def submit(self, epoch: int, snapshot) -> None:
        """Queue an evaluation of a frozen network snapshot."""
        if not self.running:
            self.start()
        future = self._executor.submit(
            self.evaluate_fn, snapshot, self.test_set, self.distractors, self.scorer, self.seeds
        )
        self.pending.append((epoch, future))

    def collect(self, wait: bool = False) -> List[Dict[str, float]]:
        """Merge finished evaluations into ``results`` (all of them when ``wait``)."""
        still_pending = []
        for epoch, future in self.pending:
            if not (wait or future.done()):
                still_pending.append((epoch, future))
                continue
            try:
                curve = future.result()
                row = {"epoch": epoch, **curve.summary()}
                self.results.append(row)
                logger.info(f"Epoch {epoch} evaluation: rank-1 {row['rank-1']:.4f}, "
                            f"rank-5 {row['rank-5']:.4f}, rank-10 {row['rank-10']:.4f}")
            except Exception as e:
                logger.warning(f"Background evaluation for epoch {epoch} failed: {e}")
        self.pending = still_pending
        return self.results

    def stop(self) -> List[Dict[str, float]]:
        """Wait for outstanding evaluations and shut the worker down."""
        results = self.collect(wait=True)
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None
        self.running = False
        logger.info("Stopping background evaluator")
        return results
