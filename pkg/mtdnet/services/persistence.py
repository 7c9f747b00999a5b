"""
Checkpoint files and CSV outputs.

Checkpoint layout (little-endian)::

    b"MTDNETV1"
    u32 header length, header JSON (net config, seed, epoch, variant)
    u32 blob count
    per blob: u32 name length, UTF-8 name, u32 ndim, u32 dims..., float32 values
"""
import json
import logging
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from ..core.errors import CheckpointError
from ..core.network import parameter_shapes
from ..models import AblationVariant, Checkpoint, CmcCurve, NetConfig
from .evaluation import curve_frame

logger = logging.getLogger(__name__)

MAGIC = b"MTDNETV1"
VALUE_DTYPE = np.dtype("<f4")
LOSS_COLUMNS = ["epoch", "l_trp", "l_cls", "l_cts", "combined"]
CMC_COLUMNS = ["rank", "accuracy"]


class CheckpointHeader(BaseModel):
    """JSON header stored ahead of the parameter blobs."""
    net: NetConfig
    seed: int
    epoch: int
    variant: AblationVariant = AblationVariant.FULL


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    header = CheckpointHeader(
        net=checkpoint.net_config, seed=checkpoint.seed, epoch=checkpoint.epoch, variant=checkpoint.variant
    ).model_dump_json().encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(header)), header, struct.pack("<I", len(checkpoint.params))]
    for name, value in checkpoint.params.items():
        encoded = name.encode("utf-8")
        array = np.ascontiguousarray(value, dtype=VALUE_DTYPE)
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape))
        parts.append(array.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        end = self.offset + n
        if end > len(self.data):
            raise CheckpointError(f"{self.source}: truncated while reading {what} at byte {self.offset}")
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    reader = _Reader(data, source)
    magic = reader.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    raw_header = reader.take(reader.u32("header length"), "header")
    try:
        header = CheckpointHeader.model_validate(json.loads(raw_header.decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, ValidationError) as exc:
        raise CheckpointError(f"{source}: unreadable header: {exc}") from exc

    params: Dict[str, np.ndarray] = {}
    for _ in range(reader.u32("blob count")):
        name_bytes = reader.take(reader.u32("name length"), "parameter name")
        try:
            name = name_bytes.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{source}: parameter name is not UTF-8") from exc
        ndim = reader.u32(f"rank of '{name}'")
        shape = tuple(reader.u32(f"shape of '{name}'") for _ in range(ndim))
        count = int(np.prod(shape, dtype=np.int64))
        raw = reader.take(count * VALUE_DTYPE.itemsize, f"values of '{name}'")
        params[name] = np.frombuffer(raw, dtype=VALUE_DTYPE).reshape(shape).copy()
    if reader.offset != len(data):
        raise CheckpointError(f"{source}: {len(data) - reader.offset} unexpected trailing bytes")
    return Checkpoint(net_config=header.net, params=params, seed=header.seed, epoch=header.epoch,
                      variant=header.variant)


def check_parameters(checkpoint: Checkpoint, expected: Optional[NetConfig] = None) -> None:
    """Reject parameters that do not match the config-derived parameter set."""
    cfg = expected or checkpoint.net_config
    wanted = parameter_shapes(cfg, variant=checkpoint.variant)
    for name, shape in wanted.items():
        if name not in checkpoint.params:
            raise CheckpointError(f"checkpoint lacks parameter '{name}'")
        if tuple(checkpoint.params[name].shape) != tuple(shape):
            raise CheckpointError(
                f"parameter '{name}' has shape {list(checkpoint.params[name].shape)}, "
                f"the network expects {list(shape)}"
            )
    extra = [name for name in checkpoint.params if name not in wanted]
    if extra:
        raise CheckpointError(f"checkpoint has unexpected parameter '{extra[0]}'")


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    check_parameters(checkpoint)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(checkpoint))
    logger.info(f"Saved checkpoint ({len(checkpoint.params)} tensors, epoch {checkpoint.epoch}) to {path}")
    return path


def load_checkpoint(path: Union[str, Path], expected: Optional[NetConfig] = None) -> Checkpoint:
    """Read a checkpoint; with ``expected`` the parameters must fit that config."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint not found: {path}")
    checkpoint = decode_checkpoint(path.read_bytes(), str(path))
    check_parameters(checkpoint, expected)
    return checkpoint


def write_loss_history(history: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    history.reindex(columns=LOSS_COLUMNS).to_csv(path, index=False, float_format="%.10g")
    return path


def write_cmc(curve: CmcCurve, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    curve_frame(curve)[CMC_COLUMNS].to_csv(path, index=False, float_format="%.10g")
    return path


def read_cmc(path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
    frame = pd.read_csv(path)
    return frame["rank"].to_numpy(), frame["accuracy"].to_numpy()


def summary_line(curve: CmcCurve) -> str:
    """``rank-1 0.6250 | rank-5 0.9375 | rank-10 1.0000``"""
    return " | ".join(f"{k} {v:.4f}" for k, v in curve.summary().items())
