"""
Diagnostic commands: gradient checks, the threshold-versus-ranking case study
and layer shape tables.
"""
import argparse
import logging

from ..core.config import preset_config
from ..core.errors import ConfigError
from ..models import AblationVariant, Preset
from ..services.diagnostics import gradcheck_network, shape_table
from ..services.evaluation import fig1_case_study
from . import experiment_config, output_dir, stage

logger = logging.getLogger(__name__)


def gradcheck(args: argparse.Namespace) -> int:
    """Finite-difference check of every parameter gradient; exit 1 on any failure."""
    cfg = experiment_config(args.config, args.preset).net
    if cfg.preset == Preset.PAPER:
        raise ConfigError("gradcheck on the paper preset is too slow; use --preset desk "
                          "or inspect the shapes with `mtdnet shapes --preset paper`")
    failed = 0
    for variant in args.variants:
        with stage("gradcheck"):
            reports = gradcheck_network(cfg, variant, h=args.h, tol=args.tol, max_entries=args.entries,
                                        seed=args.seed)
        for name, report in reports.items():
            print(f"{variant}/{name}: {report.summary()}")
            failed += not report.passed
    print("PASS" if failed == 0 else f"FAIL ({failed} reports)")
    return 0 if failed == 0 else 1


def case_study(args: argparse.Namespace) -> int:
    """Score layouts showing that a lower pair loss can come with a worse ranking."""
    report = fig1_case_study()
    print(report.summary())
    if args.out:
        out = output_dir(args.out)
        report.to_frame().to_csv(out / "case_study.csv", index=False, float_format="%.6f")
    return 0 if report.passed else 1


def shapes(args: argparse.Namespace) -> int:
    with stage("config"):
        cfg = preset_config(args.preset)
    table = shape_table(cfg, args.variant)
    print(table.to_string(index=False))
    print(f"total parameters: {int(table['parameters'].sum())}")
    return 0


def register(subparsers) -> None:
    variants = [v.value for v in AblationVariant]

    parser = subparsers.add_parser("gradcheck", help="finite-difference gradient check")
    parser.add_argument("--config", help="experiment config file")
    parser.add_argument("--preset", default="desk", choices=["desk", "paper"], help="preset when no config")
    parser.add_argument("--variants", nargs="+", default=variants, choices=variants)
    parser.add_argument("--tol", type=float, default=1e-4, help="relative error tolerance")
    parser.add_argument("--h", type=float, default=1e-5, help="central-difference step")
    parser.add_argument("--entries", type=int, default=16, help="entries sampled per parameter")
    parser.add_argument("--seed", type=int, default=0)
    parser.set_defaults(handler=gradcheck)

    parser = subparsers.add_parser("case-study", help="threshold versus ranking score layouts")
    parser.add_argument("--out", help="write case_study.csv here")
    parser.set_defaults(handler=case_study)

    parser = subparsers.add_parser("shapes", help="layer shapes and parameter counts")
    parser.add_argument("--preset", default="desk", choices=["desk", "paper"])
    parser.add_argument("--variant", default="full", choices=variants)
    parser.set_defaults(handler=shapes)
