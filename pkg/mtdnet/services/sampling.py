"""
Pair and triplet construction for training.
"""
import logging
from collections import defaultdict
from typing import Dict, Iterator, List, Sequence, Tuple, Union

import numpy as np

from ..core.errors import DatasetError
from ..models import LabeledImage, Triplet, TripletBatch

logger = logging.getLogger(__name__)

Pair = Tuple[LabeledImage, LabeledImage]


def group_by_identity(dataset: Sequence[LabeledImage]) -> Dict[int, Dict[int, List[LabeledImage]]]:
    """``{person_id: {camera_id: [images in dataset order]}}`` with sorted person ids."""
    groups: Dict[int, Dict[int, List[LabeledImage]]] = defaultdict(lambda: {1: [], 2: []})
    for img in dataset:
        groups[img.person_id][img.camera_id].append(img)
    return {pid: groups[pid] for pid in sorted(groups)}


def enumerate_positive_pairs(dataset: Sequence[LabeledImage]) -> List[Pair]:
    """All (camera 1, camera 2) same-person pairs, ordered by person id then image index."""
    cameras = {img.camera_id for img in dataset}
    if len(cameras) < 2:
        raise DatasetError(f"Need images from two cameras, found cameras {sorted(cameras)}")
    pairs: List[Pair] = []
    for pid, views in group_by_identity(dataset).items():
        if not views[1] or not views[2]:
            logger.warning(f"Person {pid} appears in only one camera; no positive pairs")
            continue
        pairs.extend((a, b) for a in views[1] for b in views[2])
    return pairs


def make_triplets(pairs: Sequence[Pair], dataset: Sequence[LabeledImage], k: int = 10,
                  rng_seed: Union[int, Sequence[int]] = 0) -> List[Triplet]:
    """``k`` triplets per positive pair, negatives drawn from other identities in the positive's camera."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    identities = {img.person_id for img in dataset}
    if len(identities) < 2:
        raise DatasetError(f"Need at least 2 identities to draw negatives, found {len(identities)}")

    by_camera: Dict[int, List[LabeledImage]] = {1: [], 2: []}
    for img in dataset:
        by_camera[img.camera_id].append(img)
    rng = np.random.default_rng(rng_seed)

    triplets: List[Triplet] = []
    short = 0
    for anchor, positive in pairs:
        candidates = [img for img in by_camera[positive.camera_id] if img.person_id != anchor.person_id]
        if not candidates:
            raise DatasetError(
                f"No camera-{positive.camera_id} images of other identities for person {anchor.person_id}"
            )
        replace = len(candidates) < k
        short += replace
        picks = rng.choice(len(candidates), size=k, replace=replace)
        triplets.extend(Triplet(anchor, positive, candidates[i]) for i in picks)
    if short:
        logger.warning(f"{short} positive pairs had fewer than {k} negatives; sampled with replacement")
    return triplets


def mirror(img: LabeledImage) -> LabeledImage:
    """Horizontally flipped copy with the ``mirrored`` flag toggled."""
    return LabeledImage(
        image=np.ascontiguousarray(img.image[:, :, ::-1]),
        person_id=img.person_id,
        camera_id=img.camera_id,
        mirrored=not img.mirrored,
        path=img.path,
    )


def mirror_augment(dataset: Sequence[LabeledImage]) -> List[LabeledImage]:
    """Each image followed by its mirrored twin; pairs over the result quadruple."""
    augmented: List[LabeledImage] = []
    for img in dataset:
        augmented.append(img)
        augmented.append(mirror(img))
    return augmented


def batch_iter(triplets: Sequence[Triplet], batch_size: int, rng_seed: int, epoch: int) -> Iterator[TripletBatch]:
    """Shuffle by ``(rng_seed, epoch)`` and yield batches, keeping the last partial one."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if not triplets:
        raise DatasetError("Cannot batch an empty triplet list")
    order = np.random.default_rng([rng_seed, epoch]).permutation(len(triplets))
    return (
        TripletBatch([triplets[i] for i in order[start:start + batch_size]])
        for start in range(0, len(order), batch_size)
    )


def count_batches(n_triplets: int, batch_size: int) -> int:
    return -(-n_triplets // batch_size)


def training_triplets(dataset: Sequence[LabeledImage], k: int, seed: int, augment: bool = True,
                      epoch: int = 0, regenerate: bool = False) -> List[Triplet]:
    """Mirror (optionally), enumerate pairs and draw triplets for one run or one epoch."""
    images = mirror_augment(dataset) if augment else list(dataset)
    pairs = enumerate_positive_pairs(images)
    if not pairs:
        raise DatasetError("Dataset has no cross-camera positive pairs")
    triplets = make_triplets(pairs, images, k, [seed, epoch] if regenerate else seed)
    logger.debug(f"{len(images)} images -> {len(pairs)} positive pairs -> {len(triplets)} triplets")
    return triplets
