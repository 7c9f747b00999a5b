"""
The multi-task re-identification network.

A two-stage convolutional trunk is shared by two heads:

* the ranking head flattens each trunk output into a single embedding layer
  whose vectors feed the triplet loss;
* the classification head concatenates the trunk maps of an image pair into
  joint feature maps and runs them through three more convolution stages and
  three fully connected layers down to a two-way softmax.

The same parameters serve every image that passes through a layer, so the
trunk receives gradient from both losses.
"""
from __future__ import annotations

import copy
import logging
import zlib
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist

from ..models import (
    AblationVariant,
    Checkpoint,
    ConvStage,
    ForwardMode,
    NetConfig,
    Scorer,
    TripletBatch,
)
from .autodiff import (
    Graph,
    Tensor,
    concat_channels,
    conv2d,
    conv_output_size,
    flatten,
    fully_connected,
    l2_normalize,
    maxpool2d,
    relu,
    softmax2,
    take_rows,
)
from .config import settings
from .errors import ConfigError, ShapeError
from .losses import combine, pair_loss, triplet_loss

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]

CLS_STAGES = ("conv3", "conv4", "conv5")
RNK_STAGES = ("rnk_conv3", "rnk_conv4", "rnk_conv5")
FC_LAYERS = ("fc6", "fc7", "fc8")
EVAL_CHUNK = 64


def as_variant(value: Union[str, AblationVariant]) -> AblationVariant:
    """Parse an ablation variant name."""
    if isinstance(value, AblationVariant):
        return value
    try:
        return AblationVariant(value)
    except ValueError:
        names = [v.value for v in AblationVariant]
        raise ConfigError(f"Unknown ablation variant '{value}'; expected one of {names}") from None


def heads(mode: ForwardMode, variant: AblationVariant) -> Tuple[bool, bool]:
    """(has ranking head, has classification head) for a mode and variant."""
    if variant == AblationVariant.RNK_ONLY and mode == ForwardMode.TEST_PAIR:
        raise ConfigError("rnk-only networks have no pair classifier; use EMBED_ONLY for testing")
    if variant == AblationVariant.CLS_ONLY and mode == ForwardMode.EMBED_ONLY:
        raise ConfigError("cls-only networks have no embedding head; use TEST_PAIR for testing")
    has_embed = variant != AblationVariant.CLS_ONLY and mode != ForwardMode.TEST_PAIR
    has_cls = variant != AblationVariant.RNK_ONLY and mode != ForwardMode.EMBED_ONLY
    return has_embed, has_cls


def _stage_shape(shape: Shape, stage: ConvStage, name: str, check_in: bool = True) -> Shape:
    c, h, w = shape
    if check_in and stage.in_channels is not None and stage.in_channels != c:
        raise ShapeError(f"{name}: expects {stage.in_channels} input channels, receives {c}")
    h_out = conv_output_size(h, stage.kernel, stage.stride, stage.pad)
    w_out = conv_output_size(w, stage.kernel, stage.stride, stage.pad)
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"{name}: kernel {stage.kernel} (pad {stage.pad}) does not fit a {h}x{w} input")
    if stage.pool_k:
        if stage.pool_k > h_out or stage.pool_k > w_out:
            raise ShapeError(f"{name}: pool window {stage.pool_k} larger than {h_out}x{w_out} maps")
        h_out = conv_output_size(h_out, stage.pool_k, stage.pool_stride, 0)
        w_out = conv_output_size(w_out, stage.pool_k, stage.pool_stride, 0)
    return stage.channels, h_out, w_out


def _rnk_stage(cfg: NetConfig, name: str) -> ConvStage:
    # the deepened ranking trunk reuses the cls geometry on single-image maps
    stage = getattr(cfg.cls_convs, name.replace("rnk_", ""))
    return stage.model_copy(update={"in_channels": None})


def infer_shapes(cfg: NetConfig, variant: Union[str, AblationVariant] = AblationVariant.FULL) -> Dict[str, Shape]:
    """Per-sample output shape of every layer, computed without allocating weights."""
    variant = as_variant(variant)
    shapes: Dict[str, Shape] = OrderedDict(input=tuple(cfg.input_shape))
    shapes["conv1"] = _stage_shape(shapes["input"], cfg.trunk.conv1, "conv1")
    shapes["conv2"] = _stage_shape(shapes["conv1"], cfg.trunk.conv2, "conv2")
    shapes["trunk"] = shapes["conv2"]

    if variant != AblationVariant.CLS_ONLY:
        current = shapes["trunk"]
        if variant == AblationVariant.RNK_ONLY:
            for name in RNK_STAGES:
                current = shapes[name] = _stage_shape(current, _rnk_stage(cfg, name), name, check_in=False)
        shapes["embed_in"] = (int(np.prod(current)),)
        shapes["embed"] = (cfg.embed_dim,)

    if variant != AblationVariant.RNK_ONLY:
        c, h, w = shapes["trunk"]
        current = shapes["joint"] = (2 * c, h, w)
        for name in CLS_STAGES:
            current = shapes[name] = _stage_shape(current, getattr(cfg.cls_convs, name), name)
        shapes["cls_flat"] = (int(np.prod(current)),)
        for name, dim in zip(FC_LAYERS, cfg.fc_dims):
            shapes[name] = (dim,)
    return shapes


def parameter_shapes(cfg: NetConfig, mode: ForwardMode = ForwardMode.TRAIN_TRIPLET,
                     variant: Union[str, AblationVariant] = AblationVariant.FULL) -> Dict[str, Shape]:
    """Name and shape of every parameter a network of this mode and variant owns."""
    variant = as_variant(variant)
    has_embed, has_cls = heads(mode, variant)
    shapes = infer_shapes(cfg, variant)
    params: Dict[str, Shape] = OrderedDict()

    def conv(name: str, stage: ConvStage, in_channels: int) -> None:
        params[f"{name}.weight"] = (stage.channels, in_channels, stage.kernel, stage.kernel)
        params[f"{name}.bias"] = (stage.channels,)

    def fc(name: str, d_out: int, d_in: int) -> None:
        params[f"{name}.weight"] = (d_out, d_in)
        params[f"{name}.bias"] = (d_out,)

    conv("conv1", cfg.trunk.conv1, cfg.input_shape[0])
    conv("conv2", cfg.trunk.conv2, cfg.trunk.conv1.channels)
    if has_embed:
        if variant == AblationVariant.RNK_ONLY:
            previous = "trunk"
            for name in RNK_STAGES:
                conv(name, _rnk_stage(cfg, name), shapes[previous][0])
                previous = name
        fc("embed", cfg.embed_dim, shapes["embed_in"][0])
    if has_cls:
        previous = "joint"
        for name in CLS_STAGES:
            conv(name, getattr(cfg.cls_convs, name), shapes[previous][0])
            previous = name
        d_in = shapes["cls_flat"][0]
        for name, d_out in zip(FC_LAYERS, cfg.fc_dims):
            fc(name, d_out, d_in)
            d_in = d_out
    return params


@dataclass
class ForwardOutput:
    """Everything one training forward pass produces.

    ``probs`` and ``fc7`` stack the positive joint pairs (rows ``0..N-1``)
    above the negative joint pairs (rows ``N..2N-1``).
    """
    losses: Dict[str, Optional[Tensor]]
    combined: Tensor
    n: int
    embeddings: Optional[Tensor] = None
    probs: Optional[Tensor] = None
    fc7: Optional[Tensor] = None


class MTDNet:
    """Network parameters plus the forward passes over them."""

    def __init__(self, cfg: NetConfig, mode: ForwardMode = ForwardMode.TRAIN_TRIPLET,
                 variant: Union[str, AblationVariant] = AblationVariant.FULL,
                 dtype=None, seed: Optional[int] = None):
        self.cfg = cfg
        self.mode = mode
        self.variant = as_variant(variant)
        self.has_embed, self.has_cls = heads(mode, self.variant)
        self.shapes = infer_shapes(cfg, self.variant)
        self.graph = Graph(np.dtype(dtype if dtype is not None else settings.float_dtype))
        self.seed = cfg.init_seed if seed is None else seed
        self._init_parameters()

    # -- construction -----------------------------------------------------

    def _init_parameters(self) -> None:
        for name, shape in parameter_shapes(self.cfg, self.mode, self.variant).items():
            if name.endswith(".bias") or (name.startswith("fc8.") and self.cfg.zero_init_final):
                value = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                rng = np.random.default_rng([self.seed, zlib.crc32(name.encode("utf-8"))])
                value = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            self.graph.add_parameter(name, value)

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, mode: ForwardMode = ForwardMode.TRAIN_TRIPLET,
                        dtype=None) -> "MTDNet":
        """Rebuild a network and load the parameters its mode needs."""
        net = cls(checkpoint.net_config, mode, checkpoint.variant, dtype=dtype, seed=checkpoint.seed)
        net.load_params(checkpoint.params, strict=mode == ForwardMode.TRAIN_TRIPLET)
        return net

    def load_params(self, params: Dict[str, np.ndarray], strict: bool = True) -> None:
        self.graph.load_state_dict(params, strict=strict)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return self.graph.state_dict()

    def to_checkpoint(self, epoch: int = 0) -> Checkpoint:
        return Checkpoint(
            net_config=self.cfg,
            params=self.state_dict(),
            seed=self.seed,
            epoch=epoch,
            variant=self.variant,
        )

    def astype(self, dtype) -> "MTDNet":
        twin = copy.copy(self)
        twin.graph = self.graph.astype(dtype)
        return twin

    def frozen(self) -> "MTDNet":
        """Read-only snapshot safe to evaluate on another thread."""
        twin = copy.copy(self)
        twin.graph = self.graph.frozen()
        return twin

    @property
    def params(self) -> Dict[str, Tensor]:
        return self.graph.params

    def num_parameters(self) -> int:
        return self.graph.num_parameters()

    # -- building blocks --------------------------------------------------

    def _input(self, images: np.ndarray, name: str) -> Tensor:
        images = np.asarray(images)
        expected = tuple(self.cfg.input_shape)
        if images.ndim == 3:
            images = images[None]
        if images.ndim != 4 or images.shape[1:] != expected:
            raise ShapeError(f"{name}: expected images of shape {list(expected)}, got {list(images.shape)}")
        return self.graph.constant(images, name=name)

    def _stage(self, x: Tensor, name: str, stage: ConvStage) -> Tensor:
        p = self.graph.parameter
        x = conv2d(x, p(f"{name}.weight"), p(f"{name}.bias"), stage.stride, stage.pad, name=name)
        x = relu(x, name=f"{name}.relu")
        if stage.pool_k:
            x = maxpool2d(x, stage.pool_k, stage.pool_stride, name=f"{name}.pool")
        return x

    def trunk(self, x: Tensor) -> Tensor:
        """Shared two-stage trunk: ``[N, 3, H, W] -> [N, C, h, w]``."""
        x = self._stage(x, "conv1", self.cfg.trunk.conv1)
        return self._stage(x, "conv2", self.cfg.trunk.conv2)

    def embed(self, trunk_maps: Tensor) -> Tensor:
        """Ranking-head embedding of trunk maps."""
        if not self.has_embed:
            raise ConfigError(f"{self.variant.value} network in {self.mode.value} mode has no embedding head")
        x = trunk_maps
        if self.variant == AblationVariant.RNK_ONLY:
            for name in RNK_STAGES:
                x = self._stage(x, name, _rnk_stage(self.cfg, name))
        p = self.graph.parameter
        f = fully_connected(flatten(x), p("embed.weight"), p("embed.bias"), name="embed")
        if self.cfg.loss.normalize_embeddings:
            f = l2_normalize(f, name="embed.l2")
        return f

    def classify(self, first: Tensor, second: Tensor) -> Tuple[Tensor, Tensor]:
        """Joint feature maps of (first camera, second camera) trunk maps to (logits, fc7 response)."""
        if not self.has_cls:
            raise ConfigError(f"{self.variant.value} network in {self.mode.value} mode has no classifier")
        x = concat_channels(first, second, name="joint")
        for name in CLS_STAGES:
            x = self._stage(x, name, getattr(self.cfg.cls_convs, name))
        p = self.graph.parameter
        x = flatten(x)
        x = relu(fully_connected(x, p("fc6.weight"), p("fc6.bias"), name="fc6"), name="fc6.relu")
        fc7 = relu(fully_connected(x, p("fc7.weight"), p("fc7.bias"), name="fc7"), name="fc7.relu")
        logits = fully_connected(fc7, p("fc8.weight"), p("fc8.bias"), name="fc8")
        return logits, fc7

    # -- forward passes ---------------------------------------------------

    def forward_train(self, anchors: np.ndarray, positives: np.ndarray, negatives: np.ndarray) -> ForwardOutput:
        """Triplet pass: both heads over (A1, A2, B2) with the trunk run once on all 3N images."""
        if self.mode != ForwardMode.TRAIN_TRIPLET:
            raise ConfigError(f"forward_train needs a TRAIN_TRIPLET network, this one is {self.mode.value}")
        n = len(anchors)
        if len(positives) != n or len(negatives) != n:
            raise ShapeError(f"triplet arrays differ in length: {n}, {len(positives)}, {len(negatives)}")
        x = self._input(np.concatenate([anchors, positives, negatives]), "triplet_images")
        maps = self.trunk(x)
        a_rows, p_rows, n_rows = np.arange(n), np.arange(n, 2 * n), np.arange(2 * n, 3 * n)
        loss_cfg = self.cfg.loss
        out = ForwardOutput(losses={"trp": None, "cls": None}, combined=None, n=n)

        if self.has_embed:
            f = self.embed(maps)
            out.embeddings = f
            out.losses["trp"] = triplet_loss(
                take_rows(f, a_rows), take_rows(f, p_rows), take_rows(f, n_rows),
                loss_cfg.alpha, loss_cfg.reduction,
            )
            out.losses["trp"].name = "l_trp"

        if self.has_cls:
            # positive pairs (A1, A2) above negative pairs (A1, B2)
            first = take_rows(maps, np.concatenate([a_rows, a_rows]), name="pair_first")
            second = take_rows(maps, np.concatenate([p_rows, n_rows]), name="pair_second")
            logits, fc7 = self.classify(first, second)
            out.probs = softmax2(logits, name="probs")
            out.fc7 = fc7
            labels = np.concatenate([np.ones(n, dtype=np.int64), np.zeros(n, dtype=np.int64)])
            out.losses["cls"] = pair_loss(out.probs, labels, loss_cfg, logits=logits)
            out.losses["cls"].name = "l_cls"

        out.combined = combine(out.losses, loss_cfg)
        return out

    def forward_batch(self, batch: TripletBatch) -> ForwardOutput:
        return self.forward_train(batch.anchors, batch.positives, batch.negatives)

    def pair_probability(self, img1: np.ndarray, img2: np.ndarray) -> np.ndarray:
        maps = self.trunk(self._input(np.concatenate([_batch(img1), _batch(img2)]), "pair_images"))
        n = len(_batch(img1))
        logits, _ = self.classify(take_rows(maps, np.arange(n)), take_rows(maps, np.arange(n, 2 * n)))
        return softmax2(logits).data[:, 1]

    def forward_similarity(self, img1: np.ndarray, img2: np.ndarray) -> Union[float, np.ndarray]:
        """p(same | img1, img2); a float for single images, an array for batches."""
        if not self.has_cls:
            raise ConfigError(f"{self.variant.value} network has no classifier to score pairs")
        probs = self.pair_probability(img1, img2)
        return float(probs[0]) if np.ndim(img1) == 3 else probs

    def forward_embedding(self, img: np.ndarray) -> np.ndarray:
        """Ranking-head embedding ``[embed_dim]`` (or ``[N, embed_dim]``)."""
        f = self.embed(self.trunk(self._input(img, "embed_images"))).data
        return f[0] if np.ndim(img) == 3 else f

    def joint_feature_fc2(self, img1: np.ndarray, img2: np.ndarray) -> np.ndarray:
        """Second FC response of the classifier for a pair (the quantity the contrastive loss couples)."""
        maps = self.trunk(self._input(np.concatenate([_batch(img1), _batch(img2)]), "pair_images"))
        n = len(_batch(img1))
        _, fc7 = self.classify(take_rows(maps, np.arange(n)), take_rows(maps, np.arange(n, 2 * n)))
        return fc7.data[0] if np.ndim(img1) == 3 else fc7.data

    # -- evaluation -------------------------------------------------------

    def trunk_features(self, images: np.ndarray) -> np.ndarray:
        """Trunk maps for many images, computed in chunks."""
        images = np.asarray(images)
        parts = [self.trunk(self._input(images[i:i + EVAL_CHUNK], "eval_images")).data
                 for i in range(0, len(images), EVAL_CHUNK)]
        return np.concatenate(parts)

    def score_matrix(self, queries: np.ndarray, gallery: np.ndarray,
                     scorer: Scorer = Scorer.CLS_PROB) -> np.ndarray:
        """Similarity of every query (camera 1) to every gallery image (camera 2), shape ``[Q, G]``."""
        snapshot = self.frozen()
        q_maps = snapshot.trunk_features(queries)
        g_maps = snapshot.trunk_features(gallery)

        if scorer == Scorer.NEG_EUCLID:
            q_emb = snapshot.embed(snapshot.graph.constant(q_maps)).data
            g_emb = snapshot.embed(snapshot.graph.constant(g_maps)).data
            return -cdist(q_emb.astype(np.float64), g_emb.astype(np.float64))

        def score_row(q: int) -> np.ndarray:
            row = []
            for start in range(0, len(g_maps), EVAL_CHUNK):
                g = g_maps[start:start + EVAL_CHUNK]
                first = snapshot.graph.constant(np.repeat(q_maps[q:q + 1], len(g), axis=0))
                logits, _ = snapshot.classify(first, snapshot.graph.constant(g))
                row.append(softmax2(logits).data[:, 1])
            return np.concatenate(row)

        threads = max(1, settings.threads)
        if threads == 1:
            rows = [score_row(q) for q in range(len(q_maps))]
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                rows = list(pool.map(score_row, range(len(q_maps))))
        return np.stack(rows).astype(np.float64)


def _batch(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    return images[None] if images.ndim == 3 else images


def build(cfg: NetConfig, mode: ForwardMode = ForwardMode.TRAIN_TRIPLET, dtype=None,
          seed: Optional[int] = None) -> MTDNet:
    """Full multi-task network for the given forward mode."""
    net = MTDNet(cfg, mode, AblationVariant.FULL, dtype=dtype, seed=seed)
    logger.debug(f"Built {mode.value} network with {net.num_parameters()} parameters")
    return net


def ablation_build(cfg: NetConfig, variant: Union[str, AblationVariant],
                   mode: ForwardMode = ForwardMode.TRAIN_TRIPLET, dtype=None,
                   seed: Optional[int] = None) -> MTDNet:
    """Single-task (``cls-only``, ``rnk-only``) or ``full`` network."""
    return MTDNet(cfg, mode, as_variant(variant), dtype=dtype, seed=seed)


def default_scorer(variant: AblationVariant) -> Scorer:
    """Ranking networks are scored by embedding distance, the others by pair probability."""
    return Scorer.NEG_EUCLID if variant == AblationVariant.RNK_ONLY else Scorer.CLS_PROB


def eval_mode(variant: AblationVariant) -> ForwardMode:
    return ForwardMode.EMBED_ONLY if variant == AblationVariant.RNK_ONLY else ForwardMode.TEST_PAIR


def forward_similarity(net: MTDNet, img1: np.ndarray, img2: np.ndarray) -> Union[float, np.ndarray]:
    return net.forward_similarity(img1, img2)


def forward_embedding(net: MTDNet, img: np.ndarray) -> np.ndarray:
    return net.forward_embedding(img)


def joint_feature_fc2(net: MTDNet, img1: np.ndarray, img2: np.ndarray) -> np.ndarray:
    return net.joint_feature_fc2(img1, img2)


def conv_weight_names(net_or_shapes: Union[MTDNet, Dict[str, Shape]]) -> List[str]:
    """Names of convolution weights, in layer order."""
    names: Sequence[str] = list(net_or_shapes.params) if isinstance(net_or_shapes, MTDNet) else list(net_or_shapes)
    return [n for n in names if n.endswith(".weight") and "conv" in n]
