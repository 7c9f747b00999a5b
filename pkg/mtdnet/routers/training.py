"""
Training commands: single-domain multi-task training and cross-domain training.
"""
import argparse
import logging
from pathlib import Path
from typing import List, Optional, Tuple

from ..core.config import dump_config, with_overrides
from ..core.errors import ConfigError
from ..core.network import ablation_build
from ..models import ExperimentConfig, LabeledImage, TrainMode
from ..services.experiments import run_cross_domain, target_spec
from ..services.persistence import load_checkpoint, save_checkpoint, write_loss_history
from ..services.synth_data import generate, load_dataset, split
from ..services.trainer import CrossDomainState, TrainResult, train_aug, train_cross, train_single
from . import experiment_config, output_dir, stage, with_train_overrides

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "checkpoint.mtd"
HISTORY_FILE = "loss_history.csv"


def _image_size(cfg: ExperimentConfig) -> Tuple[int, int]:
    return cfg.net.input_shape[1], cfg.net.input_shape[2]


def _train_split(path: str, cfg: ExperimentConfig) -> List[LabeledImage]:
    # a gen-data root holds train/; anything else is the dataset itself
    root = Path(path)
    return load_dataset(root / "train" if (root / "train").is_dir() else root, _image_size(cfg))


def _eval_data(path: Optional[str], cfg: ExperimentConfig):
    if not path:
        return None
    root = Path(path)
    size = _image_size(cfg)
    test = load_dataset(root / "test" if (root / "test").is_dir() else root, size)
    distractors: List[LabeledImage] = []
    if (root / "distractors").is_dir():
        distractors = load_dataset(root / "distractors", size)
    return test, distractors


def _write_result(result: TrainResult, out: Path) -> None:
    with stage("save"):
        save_checkpoint(result.checkpoint, out / CHECKPOINT_FILE)
        write_loss_history(result.history, out / HISTORY_FILE)
    print(f"final combined loss: {result.final_loss:.6f}")
    for row in result.evaluations:
        print(f"epoch {row['epoch']}: rank-1 {row['rank-1']:.4f}")
    print(f"wrote {out / CHECKPOINT_FILE} and {out / HISTORY_FILE}")


def train(args: argparse.Namespace) -> int:
    """Train one network variant and write its checkpoint and loss history."""
    cfg = with_train_overrides(experiment_config(args.config, args.preset), args)
    mode = cfg.train.mode
    if mode == TrainMode.CROSS:
        raise ConfigError("train.mode=cross needs a source checkpoint; run `mtdnet train-cross`")
    if mode == TrainMode.AUG and not args.source_data:
        raise ConfigError("train.mode=aug pools a source dataset; pass --source-data")
    with stage("data"):
        if args.data:
            dataset = _train_split(args.data, cfg)
        else:
            dataset = split(generate(cfg.data), cfg.split).train
        source_data = _train_split(args.source_data, cfg) if mode == TrainMode.AUG else []
        eval_data = _eval_data(args.eval_data, cfg)
    with stage("train"):
        net = ablation_build(cfg.net, args.variant, seed=cfg.net.init_seed + cfg.train.seed)
        if mode == TrainMode.AUG:
            result = train_aug(net, source_data, dataset, cfg.train, eval_data)
        else:
            result = train_single(net, dataset, cfg.train, eval_data)
    out = output_dir(args.out)
    (out / "config.cfg").write_text(dump_config(cfg))
    _write_result(result, out)
    return 0


def train_cross_domain(args: argparse.Namespace) -> int:
    """Couple a target network to a source network, both starting from one checkpoint."""
    cfg = with_train_overrides(experiment_config(args.config, args.preset), args)
    if args.compare:
        with stage("compare"):
            table = run_cross_domain(cfg, target_spec(cfg, domain_shift=args.domain_shift),
                                     seeds=args.seeds, include_aug=not args.no_aug)
        out = output_dir(args.out)
        table.to_csv(out / "cross_domain.csv", index=False, float_format="%.6f")
        print(table.to_string(index=False))
        return 0

    if not (args.checkpoint and args.source_data and args.target_data):
        raise ConfigError("train-cross needs --checkpoint, --source-data and --target-data (or --compare)")
    with stage("checkpoint"):
        checkpoint = load_checkpoint(args.checkpoint)
    with stage("config"):
        loss = checkpoint.net_config.loss
        if args.lambda_cts is not None:
            loss = with_overrides(loss, "command-line override", lambda_cts=args.lambda_cts)
        train_cfg = with_overrides(cfg.train, "command-line override", freeze_source=args.freeze_source)
    size = (checkpoint.net_config.input_shape[1], checkpoint.net_config.input_shape[2])
    with stage("data"):
        source_data = load_dataset(args.source_data, size)
        target_data = load_dataset(args.target_data, size)
    with stage("train"):
        state = CrossDomainState.from_checkpoint(checkpoint, loss=loss)
        result = train_cross(state, source_data, target_data, train_cfg)
    _write_result(result, output_dir(args.out))
    return 0


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="experiment config file")
    parser.add_argument("--preset", default="desk", choices=["desk", "paper"], help="preset when no config")
    parser.add_argument("--out", help="output directory (default: MTDNET_OUTPUT_DIR)")
    parser.add_argument("--seed", type=int, help="overrides train.seed")
    parser.add_argument("--epochs", type=int, help="overrides train.epochs")
    parser.add_argument("--batch-size", type=int, help="overrides train.batch_size")


def register(subparsers) -> None:
    parser = subparsers.add_parser("train", help="train a network on one domain")
    _common(parser)
    parser.add_argument("--data", help="dataset directory (a train/ subdirectory is used when present)")
    parser.add_argument("--source-data", help="source dataset pooled with --data when train.mode=aug")
    parser.add_argument("--eval-data", help="dataset with test/ and distractors/ for periodic evaluation")
    parser.add_argument("--variant", default="full", choices=["full", "cls-only", "rnk-only"])
    parser.set_defaults(handler=train)

    parser = subparsers.add_parser("train-cross", help="cross-domain training from a source checkpoint")
    _common(parser)
    parser.add_argument("--checkpoint", help="source-trained checkpoint")
    parser.add_argument("--source-data", help="source dataset directory")
    parser.add_argument("--target-data", help="target dataset directory")
    parser.add_argument("--lambda-cts", type=float, help="contrastive loss weight")
    parser.add_argument("--freeze-source", action="store_true", help="keep the source network fixed")
    parser.add_argument("--compare", action="store_true",
                        help="run the fine-tune / cross / pooled comparison on synthetic domains")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2], help="seeds for --compare")
    parser.add_argument("--domain-shift", type=float, default=0.5, help="target shift for --compare")
    parser.add_argument("--no-aug", action="store_true", help="skip pooled-data training in --compare")
    parser.set_defaults(handler=train_cross_domain)
