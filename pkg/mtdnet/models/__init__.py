"""
Domain models for the MTDnet engine.

Configuration objects are pydantic models so they can be validated, dumped
into checkpoint headers and rebuilt from flat config files. Runtime records
(images, triplets, score matrices, curves) are plain dataclasses over numpy
arrays.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Annotated, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, field_validator, model_validator


class Preset(enum.Enum):
    """Named architecture presets."""
    PAPER = "paper"
    DESK = "desk"
    CUSTOM = "custom"


class ForwardMode(enum.Enum):
    """Which heads a network instantiates."""
    TRAIN_TRIPLET = "train_triplet"  # inputs A1, A2, B2
    TEST_PAIR = "test_pair"          # inputs I1, I2
    EMBED_ONLY = "embed_only"        # input I


class AblationVariant(enum.Enum):
    """Single-task and multi-task network variants."""
    FULL = "full"
    CLS_ONLY = "cls-only"
    RNK_ONLY = "rnk-only"


class Reduction(enum.Enum):
    """How per-sample losses are reduced over a batch."""
    SUM = "sum"
    MEAN = "mean"


class ClassificationForm(enum.Enum):
    """Reading of the binary classification loss."""
    LOG = "log"        # cross-entropy
    LINEAR = "linear"  # probability of the true class, no log


class Scorer(enum.Enum):
    """Similarity used to rank a gallery."""
    CLS_PROB = "cls_prob"
    NEG_EUCLID = "neg_euclid"


class TrainMode(enum.Enum):
    """Training regimes."""
    SINGLE = "single"
    CROSS = "cross"
    AUG = "aug"


def _split_ints(value):
    """Accept ``"3,32,32"`` from config files as ``[3, 32, 32]``."""
    if isinstance(value, str):
        return [int(part) for part in value.replace(" ", "").split(",") if part]
    return value


IntList = Annotated[List[int], BeforeValidator(_split_ints)]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ConvStage(_Strict):
    """One convolution + ReLU (+ optional max-pool) stage."""
    channels: int = Field(gt=0)
    kernel: int = Field(gt=0)
    stride: int = Field(default=1, ge=1)
    pad: int = Field(default=0, ge=0)
    pool_k: int = Field(default=0, ge=0)  # 0 disables pooling
    pool_stride: int = Field(default=1, ge=1)
    in_channels: Optional[int] = Field(default=None, gt=0)  # derived when omitted


class TrunkConfig(_Strict):
    """The two convolution stages shared by both tasks."""
    conv1: ConvStage
    conv2: ConvStage


class ClsConvConfig(_Strict):
    """The three convolution stages over joint feature maps."""
    conv3: ConvStage
    conv4: ConvStage
    conv5: ConvStage


class LossConfig(_Strict):
    """Margins, reduction and combination weights of the losses."""
    alpha: float = Field(default=1.0, ge=0)  # triplet margin
    m: float = Field(default=1.0, ge=0)      # contrastive margin
    reduction: Reduction = Reduction.MEAN
    lambda_rnk: float = Field(default=1.0, ge=0)
    lambda_cls: float = Field(default=1.0, ge=0)
    lambda_cts: float = Field(default=1.0, ge=0)
    normalize_embeddings: bool = False
    cls_form: ClassificationForm = ClassificationForm.LOG


class NetConfig(_Strict):
    """Full architectural description of an MTDnet."""
    preset: Preset = Preset.CUSTOM
    input_shape: IntList
    trunk: TrunkConfig
    embed_dim: int = Field(gt=0)
    cls_convs: ClsConvConfig
    fc_dims: IntList
    loss: LossConfig = Field(default_factory=LossConfig)
    zero_init_final: bool = False
    init_seed: int = 0

    @field_validator("input_shape")
    @classmethod
    def _check_input_shape(cls, value: List[int]) -> List[int]:
        if len(value) != 3 or any(v <= 0 for v in value):
            raise ValueError(f"input_shape must be [C, H, W] with positive dims, got {value}")
        return value

    @field_validator("fc_dims")
    @classmethod
    def _check_fc_dims(cls, value: List[int]) -> List[int]:
        if len(value) != 3 or any(v <= 0 for v in value):
            raise ValueError(f"fc_dims must hold three positive sizes, got {value}")
        if value[-1] != 2:
            raise ValueError(f"final FC output must be 2 (same/different), got {value[-1]}")
        return value

    @model_validator(mode="after")
    def _check_channel_flow(self) -> "NetConfig":
        trunk_out = self.trunk.conv2.channels
        joint = 2 * trunk_out
        conv3 = self.cls_convs.conv3
        if conv3.in_channels is not None and conv3.in_channels != joint:
            raise ValueError(
                f"cls_convs.conv3.in_channels must be 2 x trunk channels = {joint}, "
                f"got {conv3.in_channels}"
            )
        if self.trunk.conv1.in_channels not in (None, self.input_shape[0]):
            raise ValueError(
                f"trunk.conv1.in_channels {self.trunk.conv1.in_channels} does not match "
                f"input channels {self.input_shape[0]}"
            )
        if self.trunk.conv2.in_channels not in (None, self.trunk.conv1.channels):
            raise ValueError("trunk.conv2.in_channels must equal trunk.conv1.channels")
        if self.cls_convs.conv4.in_channels not in (None, conv3.channels):
            raise ValueError("cls_convs.conv4.in_channels must equal cls_convs.conv3.channels")
        if self.cls_convs.conv5.in_channels not in (None, self.cls_convs.conv4.channels):
            raise ValueError("cls_convs.conv5.in_channels must equal cls_convs.conv4.channels")
        return self


class TrainConfig(_Strict):
    """Optimisation settings shared by every training regime."""
    learning_rate: float = Field(default=1e-3, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    epochs: int = Field(default=30, ge=1)
    batch_size: int = Field(default=32, ge=1)
    seed: int = 0
    mode: TrainMode = TrainMode.SINGLE
    eval_every: int = Field(default=0, ge=0)  # 0 disables periodic evaluation
    triplets_per_pair: int = Field(default=10, ge=1)
    augment_mirror: bool = True
    regenerate_triplets: bool = False
    freeze_source: bool = False


class CameraTransform(_Strict):
    """Appearance change a simulated camera applies to every image."""
    brightness_shift: float = 0.0
    hue_rotation: float = 0.0  # radians around the grey axis
    horizontal_jitter: int = Field(default=0, ge=0)  # pixels
    noise_sigma: float = Field(default=0.0, ge=0)


class SynthSpec(_Strict):
    """Procedural two-camera pedestrian dataset description."""
    n_identities: int = Field(default=64, ge=2)
    images_per_camera: int = Field(default=1, ge=1)
    image_size: IntList = Field(default_factory=lambda: [32, 32])
    camera1: CameraTransform = Field(default_factory=CameraTransform)
    camera2: CameraTransform = Field(default_factory=CameraTransform)
    domain_shift: float = Field(default=0.0, ge=0, le=1)
    seed: int = 0

    @field_validator("image_size")
    @classmethod
    def _check_size(cls, value: List[int]) -> List[int]:
        if len(value) != 2:
            raise ValueError(f"image_size must be [H, W], got {value}")
        return value

    def camera(self, camera_id: int) -> CameraTransform:
        return self.camera1 if camera_id == 1 else self.camera2


class SplitProtocol(_Strict):
    """Identity-disjoint train/val/test/distractor partition."""
    n_test_identities: int = Field(default=16, ge=0)
    n_val_identities: int = Field(default=0, ge=0)
    gallery_distractors: int = Field(default=0, ge=0)
    seed: int = 0


class ExperimentConfig(_Strict):
    """Everything a config file can set."""
    net: NetConfig
    train: TrainConfig = Field(default_factory=TrainConfig)
    data: SynthSpec = Field(default_factory=SynthSpec)
    split: SplitProtocol = Field(default_factory=SplitProtocol)


@dataclass(eq=False)
class LabeledImage:
    """An image with its person and camera identity."""
    image: np.ndarray  # [3, H, W], values in [0, 1]
    person_id: int
    camera_id: int
    mirrored: bool = False
    path: Optional[str] = None

    def __post_init__(self):
        if self.person_id < 0:
            raise ValueError(f"person_id must be >= 0, got {self.person_id}")
        if self.camera_id not in (1, 2):
            raise ValueError(f"camera_id must be 1 or 2, got {self.camera_id}")
        if self.image.ndim != 3:
            raise ValueError(f"image must be [C, H, W], got shape {self.image.shape}")


@dataclass(frozen=True, eq=False)
class Triplet:
    """Anchor and positive of one identity plus a negative from the positive's camera."""
    anchor: LabeledImage
    positive: LabeledImage
    negative: LabeledImage

    def __post_init__(self):
        a, p, n = self.anchor, self.positive, self.negative
        if a.person_id != p.person_id or n.person_id == a.person_id:
            raise ValueError(
                f"triplet identities invalid: anchor {a.person_id}, positive {p.person_id}, "
                f"negative {n.person_id}"
            )
        if p.camera_id != n.camera_id or a.camera_id == p.camera_id:
            raise ValueError(
                f"triplet cameras invalid: anchor {a.camera_id}, positive {p.camera_id}, "
                f"negative {n.camera_id}"
            )


@dataclass
class TripletBatch:
    """A mini-batch of triplets with stacked image arrays."""
    triplets: List[Triplet]

    def __len__(self) -> int:
        return len(self.triplets)

    @property
    def anchors(self) -> np.ndarray:
        return np.stack([t.anchor.image for t in self.triplets])

    @property
    def positives(self) -> np.ndarray:
        return np.stack([t.positive.image for t in self.triplets])

    @property
    def negatives(self) -> np.ndarray:
        return np.stack([t.negative.image for t in self.triplets])


@dataclass
class DatasetSplit:
    """Identity-disjoint partitions of a dataset."""
    train: List[LabeledImage]
    val: List[LabeledImage]
    test: List[LabeledImage]
    distractors: List[LabeledImage]

    def identities(self, part: str) -> List[int]:
        return sorted({img.person_id for img in getattr(self, part)})


@dataclass
class ScoreMatrix:
    """Similarity of every query against every gallery item."""
    scores: np.ndarray  # [Q, G]
    match: np.ndarray   # [Q] gallery index of each query's true match
    query_ids: List[int] = field(default_factory=list)
    gallery_ids: List[int] = field(default_factory=list)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.match = np.asarray(self.match, dtype=np.int64)
        if self.scores.ndim != 2:
            raise ValueError(f"scores must be 2-D, got shape {self.scores.shape}")
        if self.match.shape != (self.scores.shape[0],):
            raise ValueError(
                f"need one match per query: {self.scores.shape[0]} queries, "
                f"{self.match.shape} matches"
            )
        if np.any(self.match < 0) or np.any(self.match >= self.scores.shape[1]):
            raise ValueError("every query needs its true match inside the gallery")

    @property
    def n_queries(self) -> int:
        return self.scores.shape[0]

    @property
    def gallery_size(self) -> int:
        return self.scores.shape[1]


@dataclass
class CmcCurve:
    """Cumulative match characteristic; ``accuracies[r - 1]`` is rank-r accuracy."""
    accuracies: np.ndarray
    n_queries: int
    gallery_size: int

    def rank(self, r: int) -> float:
        """Accuracy at rank r, saturating at the gallery size."""
        if r < 1:
            raise ValueError(f"rank must be >= 1, got {r}")
        return float(self.accuracies[min(r, len(self.accuracies)) - 1])

    def summary(self) -> Dict[str, float]:
        return {f"rank-{r}": self.rank(r) for r in (1, 5, 10)}


@dataclass
class Checkpoint:
    """Named parameters plus the configuration that produced them."""
    net_config: NetConfig
    params: Dict[str, np.ndarray]
    seed: int = 0
    epoch: int = 0
    variant: AblationVariant = AblationVariant.FULL
