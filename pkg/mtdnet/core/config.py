"""
Configuration settings for the MTDnet engine.

Runtime settings come from the environment (``MTDNET_*``) and an optional
``.env`` file. Experiment settings come from flat ``key=value`` files with
dotted keys such as ``net.trunk.conv1.channels=16``.
"""
from pathlib import Path
from typing import Any, Dict, Optional, TypeVar, Union

from dotenv import dotenv_values
from pydantic import BaseModel, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from ..models import (
    ClsConvConfig,
    ConvStage,
    ExperimentConfig,
    LossConfig,
    NetConfig,
    Preset,
    TrunkConfig,
)
from .errors import ConfigError

ModelT = TypeVar("ModelT", bound=BaseModel)


class Settings(BaseSettings):
    """Application settings."""

    model_config = SettingsConfigDict(env_prefix="MTDNET_", env_file=".env", extra="ignore")

    # Parallelism cap for score-matrix construction; 1 keeps runs reproducible
    threads: int = 1

    log_level: str = "INFO"

    # Paths
    data_dir: str = "./data"
    output_dir: str = "./runs"

    # Numerics
    default_seed: int = 0
    float_dtype: str = "float32"
    gradcheck_dtype: str = "float64"


# Global settings instance
settings = Settings()


def paper_preset() -> NetConfig:
    """AlexNet-scale network: 224x224 input, 256x13x13 trunk maps, 512-d embedding."""
    return NetConfig(
        preset=Preset.PAPER,
        input_shape=[3, 224, 224],
        trunk=TrunkConfig(
            conv1=ConvStage(channels=96, kernel=11, stride=4, pad=2, pool_k=3, pool_stride=2),
            conv2=ConvStage(channels=256, kernel=5, stride=1, pad=2, pool_k=3, pool_stride=2),
        ),
        embed_dim=512,
        cls_convs=ClsConvConfig(
            conv3=ConvStage(channels=384, kernel=3, pad=1, in_channels=512),
            conv4=ConvStage(channels=384, kernel=3, pad=1),
            conv5=ConvStage(channels=256, kernel=3, pad=1, pool_k=3, pool_stride=2),
        ),
        fc_dims=[4096, 4096, 2],
        loss=LossConfig(),
    )


def desk_preset() -> NetConfig:
    """CPU-trainable network with the same topology at 32x32 input."""
    return NetConfig(
        preset=Preset.DESK,
        input_shape=[3, 32, 32],
        trunk=TrunkConfig(
            conv1=ConvStage(channels=16, kernel=5, pool_k=2, pool_stride=2),
            conv2=ConvStage(channels=32, kernel=3, pool_k=2, pool_stride=2),
        ),
        embed_dim=64,
        cls_convs=ClsConvConfig(
            conv3=ConvStage(channels=48, kernel=3, pad=1, in_channels=64),
            conv4=ConvStage(channels=48, kernel=3, pad=1),
            conv5=ConvStage(channels=32, kernel=3, pad=1, pool_k=2, pool_stride=2),
        ),
        fc_dims=[128, 64, 2],
        loss=LossConfig(),
    )


PRESETS = {
    Preset.PAPER.value: paper_preset,
    Preset.DESK.value: desk_preset,
}


def preset_config(name: str) -> NetConfig:
    """Return the NetConfig of a named preset."""
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"Unknown preset '{name}'; expected one of {sorted(PRESETS)}") from None


def _nest(flat: Dict[str, Any]) -> Dict[str, Any]:
    """Turn ``{"a.b.c": v}`` into ``{"a": {"b": {"c": v}}}``."""
    tree: Dict[str, Any] = {}
    for key, value in flat.items():
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"Config key '{key}' conflicts with scalar key '{part}'")
            node = child
        if isinstance(node.get(parts[-1]), dict):
            raise ConfigError(f"Config key '{key}' conflicts with section '{key}.*'")
        node[parts[-1]] = value
    return tree


def _merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _flatten(tree: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in tree.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


def _describe(error: ValidationError) -> str:
    first = error.errors()[0]
    key = ".".join(str(part) for part in first["loc"])
    return f"invalid value for '{key}': {first['msg']}"


def parse_config(flat: Dict[str, Optional[str]], source: str = "<config>") -> ExperimentConfig:
    """Validate a flat dotted-key mapping into an ExperimentConfig."""
    missing = [key for key, value in flat.items() if value is None]
    if missing:
        raise ConfigError(f"{source}: key '{missing[0]}' has no value")
    tree = _nest(flat)
    net_tree = tree.get("net")
    if not isinstance(net_tree, dict):
        raise ConfigError(f"{source}: missing 'net' section (set net.preset=desk or paper)")
    # "custom" means every architecture key is spelled out
    preset = net_tree.get("preset")
    if preset == Preset.CUSTOM.value:
        preset = None
    if preset is not None:
        net_tree.pop("preset")
        tree["net"] = _merge(preset_config(preset).model_dump(mode="json"), net_tree)
    try:
        config = ExperimentConfig.model_validate(tree)
    except ValidationError as exc:
        raise ConfigError(f"{source}: {_describe(exc)}") from exc
    if preset is not None:
        net = config.net.model_copy(update={"preset": _preset_label(config.net, preset)})
        config = config.model_copy(update={"net": net})
    return config


def with_overrides(model: ModelT, source: str = "override", **updates: Any) -> ModelT:
    """Copy of ``model`` with ``updates`` applied and re-validated."""
    if not updates:
        return model
    try:
        return type(model).model_validate({**model.model_dump(), **updates})
    except ValidationError as exc:
        raise ConfigError(f"{source}: {_describe(exc)}") from exc


def _preset_label(net: NetConfig, preset: str) -> Preset:
    # loss weights and init choices keep the preset label
    ignored = {"preset", "loss", "zero_init_final", "init_seed"}
    same = net.model_dump(exclude=ignored) == preset_config(preset).model_dump(exclude=ignored)
    return Preset(preset) if same else Preset.CUSTOM


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """Read a ``key=value`` experiment config file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    return parse_config(dotenv_values(path), source=str(path))


def dump_config(config: ExperimentConfig) -> str:
    """Render an ExperimentConfig back into the flat file format."""
    flat = _flatten(config.model_dump(mode="json", exclude_none=True))
    lines = []
    for key, value in flat.items():
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
