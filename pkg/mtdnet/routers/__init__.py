"""
Command groups of the ``mtdnet`` command line. Each module exposes
``register(subparsers)``; ``mtdnet.main`` includes them all.
"""
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

from ..core.config import load_config, parse_config, settings, with_overrides
from ..core.errors import CheckpointError, ConfigError, DatasetError, ShapeError, TrainingDivergedError
from ..models import ExperimentConfig

DOMAIN_ERRORS = (ShapeError, ConfigError, DatasetError, CheckpointError, TrainingDivergedError, OSError)


class StageFailure(Exception):
    """A domain error tagged with the pipeline stage that raised it."""

    def __init__(self, stage: str, error: Exception):
        super().__init__(str(error))
        self.stage = stage
        self.error = error


@contextmanager
def stage(name: str):
    try:
        yield
    except StageFailure:
        raise
    except DOMAIN_ERRORS as exc:
        raise StageFailure(name, exc) from exc


def experiment_config(path: Optional[str], preset: str = "desk") -> ExperimentConfig:
    """Config file when given, otherwise the named preset with default settings."""
    with stage("config"):
        if path:
            return load_config(path)
        return parse_config({"net.preset": preset}, source=f"preset {preset}")


def with_train_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    """Apply ``--seed`` / ``--epochs`` / ``--batch-size`` flags onto the train section."""
    updates = {}
    for flag, key in (("seed", "seed"), ("epochs", "epochs"), ("batch_size", "batch_size")):
        value = getattr(args, flag, None)
        if value is not None:
            updates[key] = value
    if not updates:
        return cfg
    with stage("config"):
        train = with_overrides(cfg.train, "command-line override", **updates)
    return cfg.model_copy(update={"train": train})


def output_dir(path: Optional[str]) -> Path:
    out = Path(path or settings.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out
