"""
Multi-seed experiments: the single-task versus multi-task ablation and the
cross-domain comparison against fine-tuning and pooled-data training.
"""
import logging
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from ..core.config import with_overrides
from ..core.network import MTDNet, ablation_build, build, default_scorer
from ..models import AblationVariant, CmcCurve, ExperimentConfig, SplitProtocol, SynthSpec
from .evaluation import evaluate
from .synth_data import generate, split
from .trainer import CrossDomainState, fine_tune, train_aug, train_cross, train_single

logger = logging.getLogger(__name__)

RANK_COLUMNS = ["rank-1", "rank-5", "rank-10"]
GALLERY_SEEDS = (0, 1, 2)


def _row(label_key: str, label: str, seed: int, curve: CmcCurve) -> Dict[str, object]:
    return {label_key: label, "seed": seed, **curve.summary()}


def _table(rows: List[Dict[str, object]], label_key: str, order: Sequence[str]) -> pd.DataFrame:
    """Per-seed rows reduced to the mean rank-n accuracy per label."""
    frame = pd.DataFrame(rows)
    table = frame.groupby(label_key, sort=False)[RANK_COLUMNS].mean().reindex(list(order))
    table["seeds"] = frame.groupby(label_key, sort=False)["seed"].count().reindex(list(order))
    return table.reset_index()


def _seeded(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return cfg.model_copy(update={
        "data": cfg.data.model_copy(update={"seed": cfg.data.seed + seed}),
        "split": cfg.split.model_copy(update={"seed": cfg.split.seed + seed}),
        "train": cfg.train.model_copy(update={"seed": cfg.train.seed + seed}),
    })


def _score(net: MTDNet, test_set, distractors) -> CmcCurve:
    return evaluate(net, test_set, distractors, default_scorer(net.variant), GALLERY_SEEDS)


def run_ablation(cfg: ExperimentConfig, seeds: Sequence[int] = (0, 1, 2, 3, 4),
                 variants: Sequence[AblationVariant] = tuple(AblationVariant)) -> pd.DataFrame:
    """Mean rank-1/5/10 of each network variant over ``seeds``."""
    rows = []
    for seed in seeds:
        run = _seeded(cfg, seed)
        parts = split(generate(run.data), run.split)
        for variant in variants:
            net = ablation_build(run.net, variant, seed=run.net.init_seed + seed)
            train_single(net, parts.train, run.train)
            curve = _score(net, parts.test, parts.distractors)
            rows.append(_row("variant", variant.value, seed, curve))
            logger.info(f"seed {seed} {variant.value}: rank-1 {curve.rank(1):.4f}")
    return _table(rows, "variant", [v.value for v in variants])


def target_spec(cfg: ExperimentConfig, n_train: int = 8, n_test: int = 8, domain_shift: float = 0.5) -> SynthSpec:
    """Small shifted-camera dataset standing in for the target domain."""
    return with_overrides(cfg.data, "target domain", n_identities=n_train + n_test,
                          domain_shift=domain_shift, seed=cfg.data.seed + 104729)


def run_cross_domain(cfg: ExperimentConfig, target: Optional[SynthSpec] = None, n_target_test: int = 8,
                     seeds: Sequence[int] = (0, 1, 2, 3, 4), include_aug: bool = True) -> pd.DataFrame:
    """Compare cross-domain training with fine-tuning (and pooled training) on a small target set."""
    target = target or target_spec(cfg, n_test=n_target_test)
    methods = ["fine-tune", "cross"] + (["aug"] if include_aug else [])
    rows = []
    for seed in seeds:
        run = _seeded(cfg, seed)
        source_data = generate(run.data.model_copy(update={"domain_shift": 0.0}))
        target_run = target.model_copy(update={"seed": target.seed + seed})
        parts = split(generate(target_run), SplitProtocol(n_test_identities=n_target_test, seed=run.split.seed))

        source_net = build(run.net, seed=run.net.init_seed + seed)
        checkpoint = train_single(source_net, source_data, run.train).checkpoint

        results = {
            "fine-tune": fine_tune(checkpoint, parts.train, run.train),
            "cross": train_cross(CrossDomainState.from_checkpoint(checkpoint), source_data, parts.train, run.train),
        }
        if include_aug:
            aug_net = build(run.net, seed=run.net.init_seed + seed)
            results["aug"] = train_aug(aug_net, source_data, parts.train, run.train)
        for method in methods:
            net = MTDNet.from_checkpoint(results[method].checkpoint)
            curve = _score(net, parts.test, parts.distractors)
            rows.append(_row("method", method, seed, curve))
            logger.info(f"seed {seed} {method}: rank-1 {curve.rank(1):.4f}")
    return _table(rows, "method", methods)


def cross_matches_fine_tune(cfg: ExperimentConfig, target: Optional[SynthSpec] = None, seed: int = 0) -> bool:
    """Whether cross-domain training with the contrastive weight at zero reproduces fine-tuning bit for bit."""
    run = _seeded(cfg, seed)
    source_data = generate(run.data.model_copy(update={"domain_shift": 0.0}))
    target_data = generate(target or target_spec(cfg))
    checkpoint = build(run.net, seed=run.net.init_seed + seed).to_checkpoint()
    tuned = fine_tune(checkpoint, target_data, run.train).checkpoint
    no_cts = run.net.loss.model_copy(update={"lambda_cts": 0.0})
    crossed = train_cross(CrossDomainState.from_checkpoint(checkpoint, loss=no_cts),
                          source_data, target_data, run.train).checkpoint
    return all(np.array_equal(tuned.params[name], crossed.params[name]) for name in tuned.params)
