"""
Gradient verification of whole networks and layer shape tables.
"""
import logging
from typing import Callable, Dict, Union

import numpy as np
import pandas as pd

from ..core.autodiff import GradCheckReport, Tensor, backward, finite_diff_check, take_rows
from ..core.config import settings
from ..core.losses import contrastive_loss
from ..core.network import MTDNet, ablation_build, infer_shapes, parameter_shapes
from ..models import AblationVariant, NetConfig

logger = logging.getLogger(__name__)


def network_losses(net: MTDNet, n: int = 2, seed: int = 0) -> Dict[str, Callable[[], Tensor]]:
    """Loss closures over one fixed random triplet batch: combined and each loss alone."""
    rng = np.random.default_rng(seed)
    shape = (n, *net.cfg.input_shape)
    anchors, positives, negatives = (rng.uniform(0.0, 1.0, size=shape) for _ in range(3))

    def forward():
        return net.forward_train(anchors, positives, negatives)

    losses: Dict[str, Callable[[], Tensor]] = {"combined": lambda: forward().combined}
    if net.has_embed:
        losses["triplet"] = lambda: forward().losses["trp"]
    if net.has_cls:
        losses["classification"] = lambda: forward().losses["cls"]
        labels = np.arange(n) % 2

        def contrastive() -> Tensor:
            fc7 = forward().fc7
            return contrastive_loss(take_rows(fc7, np.arange(n)), take_rows(fc7, np.arange(n, 2 * n)),
                                    labels, net.cfg.loss.m, net.cfg.loss.reduction)

        losses["contrastive"] = contrastive
    return losses


def gradcheck_network(cfg: NetConfig, variant: Union[str, AblationVariant] = AblationVariant.FULL,
                      h: float = 1e-5, tol: float = 1e-4, max_entries: int = 16, seed: int = 0,
                      n: int = 2) -> Dict[str, GradCheckReport]:
    """Finite-difference check of every parameter for each loss of a network."""
    net = ablation_build(cfg, variant, dtype=np.dtype(settings.gradcheck_dtype), seed=seed)
    reports = {}
    for name, loss_fn in network_losses(net, n, seed).items():
        analytic = backward(net.graph, loss_fn())
        report = finite_diff_check(net.graph, loss_fn, h=h, tol=tol, analytic=analytic,
                                   max_entries=max_entries, seed=seed)
        logger.info(f"gradcheck {net.variant.value}/{name}: {report.summary()}")
        reports[name] = report
    return reports


def shape_table(cfg: NetConfig, variant: Union[str, AblationVariant] = AblationVariant.FULL) -> pd.DataFrame:
    """Layer output shapes and parameter counts without allocating the network."""
    shapes = infer_shapes(cfg, variant)
    params = parameter_shapes(cfg, variant=variant)
    rows = []
    for layer, shape in shapes.items():
        count = sum(int(np.prod(s)) for name, s in params.items() if name.rsplit(".", 1)[0] == layer)
        rows.append({"layer": layer, "shape": "x".join(str(d) for d in shape), "parameters": count})
    return pd.DataFrame(rows)
