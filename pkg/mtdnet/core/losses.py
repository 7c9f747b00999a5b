"""
Loss and label functions of the multi-task network.

Each loss takes single vectors (``[D]``) or batches (``[N, D]``) and returns
a scalar ``Tensor`` whose backward pass is written out in closed form.
"""
from typing import Dict, Optional, Sequence, Union

import numpy as np
from scipy import special

from ..models import ClassificationForm, LossConfig, Reduction
from .autodiff import Tensor, _accumulate, _result, weighted_sum
from .errors import ShapeError

PROB_EPS = 1e-12

Labels = Union[int, Sequence[int], np.ndarray]


def _as_batch(*tensors: Tensor) -> bool:
    """True when the inputs carry a batch axis; validates equal shapes."""
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"loss inputs differ in shape: {[t.shape for t in tensors]}")
    if len(shape) not in (1, 2):
        raise ShapeError(f"loss inputs must be [D] or [N, D], got {shape}")
    return len(shape) == 2


def _reduce_scale(n: int, reduction: Reduction) -> float:
    return 1.0 / n if reduction == Reduction.MEAN else 1.0


def _labels(y: Labels, n: int) -> np.ndarray:
    labels = np.broadcast_to(np.asarray(y, dtype=np.int64), (n,))
    if np.any((labels != 0) & (labels != 1)):
        raise ValueError(f"labels must be 0 or 1, got {np.unique(labels).tolist()}")
    return labels


def triplet_loss(f_a: Tensor, f_p: Tensor, f_n: Tensor, alpha: float,
                 reduction: Reduction = Reduction.SUM) -> Tensor:
    """Hinge ``max(0, |f_a - f_p|^2 - |f_a - f_n|^2 + alpha)`` summed (or averaged) over triplets."""
    if alpha < 0:
        raise ValueError(f"triplet margin alpha must be >= 0, got {alpha}")
    batched = _as_batch(f_a, f_p, f_n)
    a, p, n = (t.data if batched else t.data[None, :] for t in (f_a, f_p, f_n))
    d_ap = np.sum((a - p) ** 2, axis=1)
    d_an = np.sum((a - n) ** 2, axis=1)
    hinge = d_ap - d_an + alpha
    active = hinge > 0
    scale = _reduce_scale(len(a), reduction)
    value = scale * np.sum(np.where(active, hinge, 0.0))

    def _backward(grad: np.ndarray) -> None:
        g = float(grad) * scale * active[:, None]
        # d/da = 2(a-p) - 2(a-n) = 2(n-p)
        _accumulate(f_a, (2.0 * (n - p) * g).reshape(f_a.shape))
        _accumulate(f_p, (-2.0 * (a - p) * g).reshape(f_p.shape))
        _accumulate(f_n, (2.0 * (a - n) * g).reshape(f_n.shape))

    return _result(np.asarray(value, dtype=a.dtype), (f_a, f_p, f_n), "triplet_loss", _backward)


def classification_loss(probs: Tensor, y: Labels, reduction: Reduction = Reduction.SUM) -> Tensor:
    """Binary cross-entropy ``-[(1-y) log p0 + y log p1]`` on softmax outputs."""
    data = probs.data if probs.ndim == 2 else probs.data[None, :]
    if data.shape[-1] != 2:
        raise ShapeError(f"classification_loss expects two probabilities, got shape {probs.shape}")
    labels = _labels(y, len(data))
    rows = np.arange(len(data))
    picked = data[rows, labels]
    clipped = np.clip(picked, PROB_EPS, 1.0 - PROB_EPS)
    scale = _reduce_scale(len(data), reduction)
    value = -scale * np.sum(np.log(clipped))

    def _backward(grad: np.ndarray) -> None:
        g = np.zeros_like(data)
        inside = (picked > PROB_EPS) & (picked < 1.0 - PROB_EPS)
        g[rows, labels] = -float(grad) * scale * inside / clipped
        _accumulate(probs, g.reshape(probs.shape))

    return _result(np.asarray(value, dtype=data.dtype), (probs,), "classification_loss", _backward)


def logit_classification_loss(logits: Tensor, y: Labels, reduction: Reduction = Reduction.SUM) -> Tensor:
    """``classification_loss`` of ``softmax(logits)`` computed from log-softmax, with no probability clamp."""
    data = logits.data if logits.ndim == 2 else logits.data[None, :]
    if data.shape[-1] != 2:
        raise ShapeError(f"logit_classification_loss expects two logits, got shape {logits.shape}")
    labels = _labels(y, len(data))
    rows = np.arange(len(data))
    log_probs = special.log_softmax(data, axis=-1)
    scale = _reduce_scale(len(data), reduction)
    value = -scale * np.sum(log_probs[rows, labels])

    def _backward(grad: np.ndarray) -> None:
        g = np.exp(log_probs)
        g[rows, labels] -= 1.0
        _accumulate(logits, (float(grad) * scale * g).reshape(logits.shape))

    return _result(np.asarray(value, dtype=data.dtype), (logits,), "logit_classification_loss", _backward)


def linear_classification_loss(probs: Tensor, y: Labels, reduction: Reduction = Reduction.SUM) -> Tensor:
    """``-[(1-y) p0 + y p1]``: the classification loss read without the logarithm."""
    data = probs.data if probs.ndim == 2 else probs.data[None, :]
    if data.shape[-1] != 2:
        raise ShapeError(f"linear_classification_loss expects two probabilities, got shape {probs.shape}")
    labels = _labels(y, len(data))
    rows = np.arange(len(data))
    scale = _reduce_scale(len(data), reduction)
    value = -scale * np.sum(data[rows, labels])

    def _backward(grad: np.ndarray) -> None:
        g = np.zeros_like(data)
        g[rows, labels] = -float(grad) * scale
        _accumulate(probs, g.reshape(probs.shape))

    return _result(np.asarray(value, dtype=data.dtype), (probs,), "linear_classification_loss", _backward)


def pair_loss(probs: Tensor, y: Labels, cfg: LossConfig, logits: Optional[Tensor] = None) -> Tensor:
    """Classification loss in the form selected by ``cfg.cls_form``.

    The log form reads ``logits`` when given, so confidently wrong rows keep their gradient.
    """
    if cfg.cls_form == ClassificationForm.LINEAR:
        return linear_classification_loss(probs, y, cfg.reduction)
    if logits is not None:
        return logit_classification_loss(logits, y, cfg.reduction)
    return classification_loss(probs, y, cfg.reduction)


def xnor_label(label_a: int, label_b: int) -> int:
    """1 when both pair labels agree, else 0."""
    if label_a not in (0, 1) or label_b not in (0, 1):
        raise ValueError(f"xnor_label expects binary labels, got ({label_a}, {label_b})")
    return int(label_a == label_b)


def xnor_labels(labels_a: Labels, labels_b: Labels) -> np.ndarray:
    """Vectorised ``xnor_label``."""
    a = np.asarray(labels_a, dtype=np.int64)
    b = np.asarray(labels_b, dtype=np.int64)
    _labels(a, a.size)
    _labels(b, b.size)
    return (a == b).astype(np.int64)


def contrastive_loss(f_a: Tensor, f_b: Tensor, y: Labels, m: float,
                     reduction: Reduction = Reduction.SUM) -> Tensor:
    """``y * d^2 / 2 + (1 - y) * max(0, m - d)^2 / 2`` with ``d`` the Euclidean distance."""
    if m < 0:
        raise ValueError(f"contrastive margin m must be >= 0, got {m}")
    batched = _as_batch(f_a, f_b)
    a, b = (t.data if batched else t.data[None, :] for t in (f_a, f_b))
    labels = _labels(y, len(a)).astype(a.dtype)
    diff = a - b
    d = np.sqrt(np.sum(diff * diff, axis=1))
    gap = np.maximum(0.0, m - d)
    scale = _reduce_scale(len(a), reduction)
    value = scale * np.sum(labels * 0.5 * d * d + (1.0 - labels) * 0.5 * gap * gap)

    def _backward(grad: np.ndarray) -> None:
        safe_d = np.where(d > 0, d, 1.0)
        # similar pairs: d * dd/da = diff; dissimilar: -(m - d) * diff / d, zero at d = 0
        coef = labels - (1.0 - labels) * np.where(d > 0, gap / safe_d, 0.0)
        g = float(grad) * scale * coef[:, None] * diff
        _accumulate(f_a, g.reshape(f_a.shape))
        _accumulate(f_b, -g.reshape(f_b.shape))

    return _result(np.asarray(value, dtype=a.dtype), (f_a, f_b), "contrastive_loss", _backward)


LOSS_WEIGHTS = {"trp": "lambda_rnk", "cls": "lambda_cls", "cts": "lambda_cts"}


def combine(losses: Dict[str, Optional[Tensor]], cfg: LossConfig) -> Tensor:
    """Weighted sum of the available losses (keys ``trp``, ``cls``, ``cts``)."""
    terms, weights = [], []
    for key, value in losses.items():
        if key not in LOSS_WEIGHTS:
            raise ValueError(f"Unknown loss '{key}'; expected one of {sorted(LOSS_WEIGHTS)}")
        if value is None:
            continue
        terms.append(value)
        weights.append(getattr(cfg, LOSS_WEIGHTS[key]))
    if not terms:
        raise ValueError("combine needs at least one loss")
    out = weighted_sum(terms, weights)
    out.name = "combined"
    return out


def value_of(loss: Optional[Tensor]) -> float:
    return loss.item() if loss is not None else 0.0
