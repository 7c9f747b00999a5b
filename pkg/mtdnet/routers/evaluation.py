"""
Evaluation commands: CMC of a checkpoint and the multi-seed ablation.
"""
import argparse
import logging
from pathlib import Path
from typing import List

from ..core.network import MTDNet, default_scorer, eval_mode
from ..models import AblationVariant, LabeledImage, Scorer
from ..services.evaluation import evaluate
from ..services.experiments import run_ablation
from ..services.persistence import load_checkpoint, summary_line, write_cmc
from ..services.synth_data import load_dataset
from . import experiment_config, output_dir, stage, with_train_overrides

logger = logging.getLogger(__name__)


def evaluate_checkpoint(args: argparse.Namespace) -> int:
    """Single-shot CMC of a trained checkpoint averaged over gallery seeds."""
    with stage("checkpoint"):
        checkpoint = load_checkpoint(args.checkpoint)
    cfg = checkpoint.net_config
    size = (cfg.input_shape[1], cfg.input_shape[2])
    root = Path(args.data)
    with stage("data"):
        test = load_dataset(root / "test" if (root / "test").is_dir() else root, size)
        distractors: List[LabeledImage] = []
        if args.distractors:
            distractors = load_dataset(args.distractors, size)
        elif (root / "distractors").is_dir():
            distractors = load_dataset(root / "distractors", size)
    scorer = Scorer(args.scorer) if args.scorer else default_scorer(checkpoint.variant)
    with stage("evaluate"):
        net = MTDNet.from_checkpoint(checkpoint, eval_mode(checkpoint.variant))
        curve = evaluate(net, test, distractors, scorer, args.seeds)
    out = output_dir(args.out)
    write_cmc(curve, out / "cmc.csv")
    print(summary_line(curve))
    return 0


def ablate(args: argparse.Namespace) -> int:
    """Train and score every variant over several seeds."""
    cfg = with_train_overrides(experiment_config(args.config, args.preset), args)
    variants = [AblationVariant(v) for v in args.variants]
    with stage("ablation"):
        table = run_ablation(cfg, args.seeds, variants)
    out = output_dir(args.out)
    table.to_csv(out / "ablation.csv", index=False, float_format="%.6f")
    print(table.to_string(index=False))
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("eval", help="CMC evaluation of a checkpoint")
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--data", required=True, help="test directory, or a root holding test/ and distractors/")
    parser.add_argument("--distractors", help="extra gallery identities")
    parser.add_argument("--scorer", choices=[s.value for s in Scorer], help="default depends on the variant")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4], help="gallery-selection seeds")
    parser.add_argument("--out", help="output directory (default: MTDNET_OUTPUT_DIR)")
    parser.set_defaults(handler=evaluate_checkpoint)

    parser = subparsers.add_parser("ablate", help="full versus single-task networks over several seeds")
    parser.add_argument("--config", help="experiment config file")
    parser.add_argument("--preset", default="desk", choices=["desk", "paper"], help="preset when no config")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--variants", nargs="+", default=[v.value for v in AblationVariant],
                        choices=[v.value for v in AblationVariant])
    parser.add_argument("--epochs", type=int, help="overrides train.epochs")
    parser.add_argument("--batch-size", type=int, help="overrides train.batch_size")
    parser.add_argument("--out", help="output directory (default: MTDNET_OUTPUT_DIR)")
    parser.set_defaults(handler=ablate)
