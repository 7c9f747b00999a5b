"""
Training loops: single-domain multi-task training, the coupled cross-domain
regime with a contrastive loss between two networks, and the baselines built
from them (augmented-dataset training and plain fine-tuning).
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..background_tasks import BackgroundEvaluator, EvalData
from ..core.autodiff import Graph, Tensor, backward, first_non_finite, take_rows, weighted_sum
from ..core.errors import ConfigError, ShapeError, TrainingDivergedError
from ..core.losses import contrastive_loss, value_of, xnor_labels
from ..core.network import MTDNet, default_scorer
from ..models import Checkpoint, LabeledImage, LossConfig, Triplet, TripletBatch, TrainConfig
from .persistence import LOSS_COLUMNS
from .sampling import batch_iter, training_triplets

logger = logging.getLogger(__name__)

# source-side draws use their own seed stream so the target trajectory is unaffected
SOURCE_SEED_OFFSET = 7919
PAIR_STREAM = 2


def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float, momentum: float,
             velocity: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """``v <- momentum * v - lr * g``; ``theta <- theta + v``, in place."""
    for name, theta in params.items():
        grad = grads[name]
        if grad.shape != theta.shape:
            raise ShapeError(f"gradient for '{name}' has shape {grad.shape}, parameter has {theta.shape}")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(theta)
        v = momentum * v - lr * grad.astype(theta.dtype, copy=False)
        velocity[name] = v.astype(theta.dtype, copy=False)
        theta += velocity[name]
    return params


class SGDMomentum:
    """Momentum SGD over the parameters of one graph."""

    def __init__(self, learning_rate: float, momentum: float):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, graph: Graph, grads: Dict[str, np.ndarray]) -> None:
        params = {name: tensor.data for name, tensor in graph.params.items()}
        sgd_step(params, grads, self.learning_rate, self.momentum, self.velocity)


@dataclass
class TrainResult:
    """Outcome of a training run."""
    checkpoint: Checkpoint
    history: pd.DataFrame
    evaluations: List[Dict[str, float]] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return float(self.history["combined"].iloc[-1])


def check_finite(loss: Tensor, where: str) -> None:
    """Abort on a NaN or infinite loss, naming the first offending node."""
    if np.all(np.isfinite(loss.data)):
        return
    node = first_non_finite(loss)
    label = f"{node.label} ({node.op})" if node is not None else loss.label
    raise TrainingDivergedError(f"{where}: loss is not finite; first non-finite node: {label}")


class _EpochMeter:
    def __init__(self):
        self.sums = {key: 0.0 for key in LOSS_COLUMNS[1:]}
        self.count = 0

    def add(self, n: int, **values: float) -> None:
        for key, value in values.items():
            self.sums[key] += n * value
        self.count += n

    def row(self, epoch: int) -> Dict[str, float]:
        return {"epoch": epoch, **{k: v / max(1, self.count) for k, v in self.sums.items()}}


def _evaluator(net: MTDNet, cfg: TrainConfig, eval_data: Optional[EvalData]) -> Optional[BackgroundEvaluator]:
    if not cfg.eval_every or eval_data is None:
        return None
    evaluator = BackgroundEvaluator(eval_data, default_scorer(net.variant))
    evaluator.start()
    return evaluator


def _epoch_triplets(dataset: Sequence[LabeledImage], cfg: TrainConfig, seed: int, epoch: int,
                    current: Optional[List[Triplet]]) -> List[Triplet]:
    if current is not None and not cfg.regenerate_triplets:
        return current
    return training_triplets(dataset, cfg.triplets_per_pair, seed, cfg.augment_mirror,
                             epoch=epoch, regenerate=cfg.regenerate_triplets)


def train_single(net: MTDNet, dataset: Sequence[LabeledImage], cfg: TrainConfig,
                 eval_data: Optional[EvalData] = None) -> TrainResult:
    """Joint triplet + pair-classification training with momentum SGD."""
    optimizer = SGDMomentum(cfg.learning_rate, cfg.momentum)
    evaluator = _evaluator(net, cfg, eval_data)
    triplets: Optional[List[Triplet]] = None
    rows = []
    logger.info(f"Training {net.variant.value} network on {len(dataset)} images for {cfg.epochs} epochs")
    try:
        for epoch in range(cfg.epochs):
            triplets = _epoch_triplets(dataset, cfg, cfg.seed, epoch, triplets)
            meter = _EpochMeter()
            for batch in batch_iter(triplets, cfg.batch_size, cfg.seed, epoch):
                out = net.forward_batch(batch)
                check_finite(out.combined, f"epoch {epoch}")
                grads = backward(net.graph, out.combined)
                optimizer.step(net.graph, grads)
                meter.add(len(batch), l_trp=value_of(out.losses["trp"]), l_cls=value_of(out.losses["cls"]),
                          combined=out.combined.item())
            row = meter.row(epoch)
            rows.append(row)
            logger.info(f"Epoch {epoch}: l_trp {row['l_trp']:.5f}, l_cls {row['l_cls']:.5f}, "
                        f"combined {row['combined']:.5f}")
            if evaluator is not None:
                if (epoch + 1) % cfg.eval_every == 0:
                    evaluator.submit(epoch, net.frozen())
                evaluator.collect()
    finally:
        evaluations = evaluator.stop() if evaluator is not None else []
    history = pd.DataFrame(rows, columns=LOSS_COLUMNS)
    return TrainResult(net.to_checkpoint(epoch=cfg.epochs), history, evaluations)


@dataclass
class CrossDomainState:
    """Source and target networks coupled by the contrastive loss."""
    source: MTDNet
    target: MTDNet
    m: float

    def __post_init__(self):
        if self.source.cfg.model_dump() != self.target.cfg.model_dump():
            raise ConfigError("source and target networks must share one NetConfig")
        if self.source.variant != self.target.variant:
            raise ConfigError("source and target networks must be the same variant")
        if not (self.target.has_cls and self.source.has_cls):
            raise ConfigError("cross-domain training needs the classification head on both networks")

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, loss: Optional[LossConfig] = None,
                        dtype=None) -> "CrossDomainState":
        """Both networks start from the same source-trained checkpoint."""
        if loss is not None:
            net_cfg = checkpoint.net_config.model_copy(update={"loss": loss})
            checkpoint = Checkpoint(net_config=net_cfg, params=checkpoint.params, seed=checkpoint.seed,
                                    epoch=checkpoint.epoch, variant=checkpoint.variant)
        source = MTDNet.from_checkpoint(checkpoint, dtype=dtype)
        target = MTDNet.from_checkpoint(checkpoint, dtype=dtype)
        return cls(source=source, target=target, m=checkpoint.net_config.loss.m)


def _endless_batches(triplets: List[Triplet], batch_size: int, seed: int) -> Iterator[TripletBatch]:
    epoch = 0
    while True:
        yield from batch_iter(triplets, batch_size, seed, epoch)
        epoch += 1


def coupling_loss(source_fc7: Tensor, target_fc7: Tensor, n_source: int, n_target: int,
                  rng: np.random.Generator, m: float, cfg: LossConfig) -> Tuple[Tensor, np.ndarray]:
    """Contrastive loss between one randomly labelled source pair and one target pair per row.

    The fc7 tensors stack positive pairs above negative pairs, so label 1 picks
    row ``i`` and label 0 picks row ``n + i``.
    """
    n = min(n_source, n_target)
    rows = np.arange(n)
    label_a = rng.integers(0, 2, size=n)
    label_b = rng.integers(0, 2, size=n)
    f_a = take_rows(source_fc7, np.where(label_a == 1, rows, n_source + rows), name="source_fc7")
    f_b = take_rows(target_fc7, np.where(label_b == 1, rows, n_target + rows), name="target_fc7")
    y = xnor_labels(label_a, label_b)
    loss = contrastive_loss(f_a, f_b, y, m, cfg.reduction)
    loss.name = "l_cts"
    return loss, y


def train_cross(state: CrossDomainState, source_data: Sequence[LabeledImage],
                target_data: Sequence[LabeledImage], cfg: TrainConfig,
                eval_data: Optional[EvalData] = None) -> TrainResult:
    """Coupled training; returns the target network only."""
    source, target = state.source, state.target
    loss_cfg = target.cfg.loss
    source_seed = cfg.seed + SOURCE_SEED_OFFSET
    source_triplets = training_triplets(source_data, cfg.triplets_per_pair, source_seed, cfg.augment_mirror)
    source_batches = _endless_batches(source_triplets, cfg.batch_size, source_seed)
    pair_rng = np.random.default_rng([cfg.seed, PAIR_STREAM])
    opt_target = SGDMomentum(cfg.learning_rate, cfg.momentum)
    opt_source = SGDMomentum(cfg.learning_rate, cfg.momentum)
    evaluator = _evaluator(target, cfg, eval_data)
    triplets: Optional[List[Triplet]] = None
    rows = []
    logger.info(f"Cross-domain training: {len(source_data)} source / {len(target_data)} target images, "
                f"lambda_cts {loss_cfg.lambda_cts}, source {'frozen' if cfg.freeze_source else 'updated'}")
    try:
        for epoch in range(cfg.epochs):
            triplets = _epoch_triplets(target_data, cfg, cfg.seed, epoch, triplets)
            meter = _EpochMeter()
            for batch in batch_iter(triplets, cfg.batch_size, cfg.seed, epoch):
                t_out = target.forward_batch(batch)
                s_out = source.forward_batch(next(source_batches))
                terms, weights = [t_out.combined, s_out.combined], [1.0, 1.0]
                l_cts = None
                if loss_cfg.lambda_cts > 0:
                    l_cts, _ = coupling_loss(s_out.fc7, t_out.fc7, s_out.n, t_out.n, pair_rng, state.m, loss_cfg)
                    terms.append(l_cts)
                    weights.append(loss_cfg.lambda_cts)
                total = weighted_sum(terms, weights, name="total")
                check_finite(total, f"epoch {epoch}")

                target.graph.zero_grad()
                source.graph.zero_grad()
                backward(None, total)
                opt_target.step(target.graph, target.graph.gradients())
                if not cfg.freeze_source:
                    opt_source.step(source.graph, source.graph.gradients())

                meter.add(len(batch), l_trp=value_of(t_out.losses["trp"]), l_cls=value_of(t_out.losses["cls"]),
                          l_cts=value_of(l_cts), combined=total.item())
            row = meter.row(epoch)
            rows.append(row)
            logger.info(f"Epoch {epoch}: l_trp {row['l_trp']:.5f}, l_cls {row['l_cls']:.5f}, "
                        f"l_cts {row['l_cts']:.5f}, combined {row['combined']:.5f}")
            if evaluator is not None:
                if (epoch + 1) % cfg.eval_every == 0:
                    evaluator.submit(epoch, target.frozen())
                evaluator.collect()
    finally:
        evaluations = evaluator.stop() if evaluator is not None else []
    history = pd.DataFrame(rows, columns=LOSS_COLUMNS)
    return TrainResult(target.to_checkpoint(epoch=cfg.epochs), history, evaluations)


def offset_identities(dataset: Sequence[LabeledImage], offset: int) -> List[LabeledImage]:
    return [
        LabeledImage(image=img.image, person_id=img.person_id + offset, camera_id=img.camera_id,
                     mirrored=img.mirrored, path=img.path)
        for img in dataset
    ]


def merge_datasets(source_data: Sequence[LabeledImage], target_data: Sequence[LabeledImage]) -> List[LabeledImage]:
    """Target images followed by source images with identities moved past the target's."""
    offset = max(img.person_id for img in target_data) + 1 if target_data else 0
    return list(target_data) + offset_identities(source_data, offset)


def train_aug(net: MTDNet, source_data: Sequence[LabeledImage], target_data: Sequence[LabeledImage],
              cfg: TrainConfig, eval_data: Optional[EvalData] = None) -> TrainResult:
    """Single-domain training on target plus source images pooled together."""
    return train_single(net, merge_datasets(source_data, target_data), cfg, eval_data)


def fine_tune(source_checkpoint: Checkpoint, target_data: Sequence[LabeledImage], cfg: TrainConfig,
              eval_data: Optional[EvalData] = None, dtype=None) -> TrainResult:
    """Plain fine-tuning of a source-trained network on the target data."""
    net = MTDNet.from_checkpoint(source_checkpoint, dtype=dtype)
    return train_single(net, target_data, cfg, eval_data)
