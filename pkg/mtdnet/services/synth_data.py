"""
Procedural two-camera pedestrian datasets plus on-disk image ingestion.

Each identity is a small parameter vector (torso colour, leg colour, body
width, stripe phase) rendered as a blocky figure. Camera 2 applies its own
appearance transform, so positive pairs differ in illumination, hue and
position the way real cross-camera pairs do.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image, UnidentifiedImageError
from scipy.spatial.distance import cdist

from ..core.errors import DatasetError
from ..models import CameraTransform, DatasetSplit, LabeledImage, ScoreMatrix, SplitProtocol, SynthSpec
from .evaluation import cmc

logger = logging.getLogger(__name__)

MIN_IMAGE_SIDE = 16
MANIFEST = "manifest.csv"
MANIFEST_COLUMNS = ["path", "person_id", "camera_id"]
BACKGROUND = 0.45
SKIN = np.array([0.85, 0.65, 0.5])

# camera-2 divergence added at domain_shift = 1
SHIFT_BRIGHTNESS = -0.25
SHIFT_HUE = np.pi / 2
SHIFT_JITTER_FRACTION = 0.125
SHIFT_NOISE = 0.05


@dataclass
class Identity:
    """Appearance code of one synthetic person."""
    torso: np.ndarray
    legs: np.ndarray
    width: float   # torso width as a fraction of the image width
    phase: float   # stripe texture phase, radians
    stripes: int   # stripe count over the torso


def identity_code(seed: int, person_id: int) -> Identity:
    rng = np.random.default_rng([seed, person_id])
    return Identity(
        torso=rng.uniform(0.05, 0.95, size=3),
        legs=rng.uniform(0.05, 0.95, size=3),
        width=float(rng.uniform(0.3, 0.6)),
        phase=float(rng.uniform(0, 2 * np.pi)),
        stripes=int(rng.integers(0, 4)),
    )


def render(identity: Identity, height: int, width: int) -> np.ndarray:
    """Draw an identity as a ``[3, H, W]`` image in [0, 1]."""
    img = np.full((3, height, width), BACKGROUND)
    cx = width / 2.0
    rows = np.arange(height)

    head_h0, head_h1 = int(0.05 * height), int(0.2 * height)
    head_w = max(2, int(0.18 * width))
    img[:, head_h0:head_h1, int(cx - head_w / 2):int(cx + head_w / 2)] = SKIN[:, None, None]

    torso_h0, torso_h1 = head_h1, int(0.58 * height)
    half = max(2, int(identity.width * width / 2))
    t_rows = rows[torso_h0:torso_h1]
    stripe = 1.0 + 0.2 * np.sin(2 * np.pi * identity.stripes * (t_rows - torso_h0) / max(1, torso_h1 - torso_h0)
                                + identity.phase)
    img[:, torso_h0:torso_h1, int(cx - half):int(cx + half)] = \
        identity.torso[:, None, None] * stripe[None, :, None]

    leg_h0, leg_h1 = torso_h1, int(0.95 * height)
    leg_w = max(1, int(0.7 * half))
    gap = max(1, half // 4)
    img[:, leg_h0:leg_h1, int(cx - gap - leg_w):int(cx - gap)] = identity.legs[:, None, None]
    img[:, leg_h0:leg_h1, int(cx + gap):int(cx + gap + leg_w)] = identity.legs[:, None, None]
    return np.clip(img, 0.0, 1.0)


def hue_matrix(angle: float) -> np.ndarray:
    """Rotation of RGB space about the grey axis."""
    axis = np.ones(3) / np.sqrt(3.0)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def effective_transform(spec: SynthSpec, camera_id: int, width: int) -> CameraTransform:
    """Camera transform with the domain shift folded into camera 2."""
    base = spec.camera(camera_id)
    if camera_id == 1 or spec.domain_shift == 0:
        return base
    s = spec.domain_shift
    return CameraTransform(
        brightness_shift=base.brightness_shift + s * SHIFT_BRIGHTNESS,
        hue_rotation=base.hue_rotation + s * SHIFT_HUE,
        horizontal_jitter=base.horizontal_jitter + int(round(s * SHIFT_JITTER_FRACTION * width)),
        noise_sigma=base.noise_sigma + s * SHIFT_NOISE,
    )


def apply_camera(img: np.ndarray, transform: CameraTransform, rng: np.random.Generator) -> np.ndarray:
    out = img
    if transform.hue_rotation:
        out = np.einsum("ij,jhw->ihw", hue_matrix(transform.hue_rotation), out)
    if transform.brightness_shift:
        out = out + transform.brightness_shift
    if transform.horizontal_jitter:
        shift = int(rng.integers(-transform.horizontal_jitter, transform.horizontal_jitter + 1))
        if shift:
            shifted = np.full_like(out, BACKGROUND)
            if shift > 0:
                shifted[:, :, shift:] = out[:, :, :-shift]
            else:
                shifted[:, :, :shift] = out[:, :, -shift:]
            out = shifted
    if transform.noise_sigma:
        out = out + rng.normal(0.0, transform.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def generate(spec: SynthSpec) -> List[LabeledImage]:
    """Render every identity in both cameras, ordered by person, camera, image index."""
    height, width = spec.image_size
    if height < MIN_IMAGE_SIDE or width < MIN_IMAGE_SIDE:
        raise DatasetError(f"image_size {height}x{width} too small; need at least {MIN_IMAGE_SIDE} px a side")
    transforms = {cam: effective_transform(spec, cam, width) for cam in (1, 2)}
    dataset: List[LabeledImage] = []
    for pid in range(spec.n_identities):
        base = render(identity_code(spec.seed, pid), height, width)
        for cam in (1, 2):
            for idx in range(spec.images_per_camera):
                rng = np.random.default_rng([spec.seed, pid, cam, idx, 1])
                image = apply_camera(base, transforms[cam], rng).astype(np.float32)
                dataset.append(LabeledImage(image=image, person_id=pid, camera_id=cam))
    logger.info(f"Generated {len(dataset)} images of {spec.n_identities} identities "
                f"(domain_shift={spec.domain_shift})")
    return dataset


def split(dataset: Sequence[LabeledImage], protocol: SplitProtocol) -> DatasetSplit:
    """Identity-disjoint test / val / distractor / train partition."""
    ids = np.array(sorted({img.person_id for img in dataset}))
    wanted = protocol.n_test_identities + protocol.n_val_identities + protocol.gallery_distractors
    if wanted > len(ids):
        raise DatasetError(
            f"Split needs {wanted} identities for test/val/distractors but the dataset has {len(ids)}"
        )
    order = ids[np.random.default_rng(protocol.seed).permutation(len(ids))]
    bounds = np.cumsum([protocol.n_test_identities, protocol.n_val_identities, protocol.gallery_distractors])
    test_ids, val_ids, distractor_ids, train_ids = (set(part.tolist()) for part in np.split(order, bounds))

    def pick(ids_: set) -> List[LabeledImage]:
        return [img for img in dataset if img.person_id in ids_]

    result = DatasetSplit(train=pick(train_ids), val=pick(val_ids), test=pick(test_ids),
                          distractors=pick(distractor_ids))
    logger.info(f"Split identities: train {len(train_ids)}, val {len(val_ids)}, test {len(test_ids)}, "
                f"distractors {len(distractor_ids)}")
    return result


def _to_array(image: Image.Image, size: Optional[Tuple[int, int]]) -> np.ndarray:
    image = image.convert("RGB")
    if size is not None and image.size != (size[1], size[0]):
        image = image.resize((size[1], size[0]), Image.BILINEAR)
    return (np.asarray(image, dtype=np.float32) / 255.0).transpose(2, 0, 1).copy()


def read_image(path: Path, size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Decode an image file to ``[3, H, W]`` in [0, 1], resizing bilinearly to ``size = (H, W)``."""
    try:
        with Image.open(path) as image:
            return _to_array(image, size)
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"Cannot read image {path}: {exc}") from exc


def _int_dir(path: Path, what: str) -> int:
    try:
        return int(path.name)
    except ValueError:
        raise DatasetError(f"Expected a numeric {what} directory, found {path}") from None


def _check_labels(person_id: int, camera_id: int, where: str) -> None:
    if person_id < 0 or camera_id not in (1, 2):
        raise DatasetError(f"{where}: person_id must be >= 0 and camera_id 1 or 2, "
                           f"got person_id={person_id} camera_id={camera_id}")


def load_folder(path: Union[str, Path], size: Optional[Tuple[int, int]] = None) -> List[LabeledImage]:
    """Read a ``<person_id>/<camera_id>/<image>`` tree."""
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"Dataset directory not found: {root}")
    dataset: List[LabeledImage] = []
    for person_dir in sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: _int_dir(p, "person")):
        pid = _int_dir(person_dir, "person")
        for camera_dir in sorted(p for p in person_dir.iterdir() if p.is_dir()):
            cam = _int_dir(camera_dir, "camera")
            _check_labels(pid, cam, str(camera_dir))
            for file in sorted(f for f in camera_dir.iterdir() if f.is_file()):
                dataset.append(LabeledImage(image=read_image(file, size), person_id=pid, camera_id=cam,
                                            path=str(file.relative_to(root).as_posix())))
    if not dataset:
        raise DatasetError(f"No images found under {root}")
    logger.info(f"Loaded {len(dataset)} images from {root}")
    return dataset


def export_dataset(dataset: Sequence[LabeledImage], root: Union[str, Path]) -> Path:
    """Write PNG files under ``<root>/<person>/<camera>/`` plus ``manifest.csv``."""
    root = Path(root)
    counters: dict = {}
    records = []
    for img in dataset:
        key = (img.person_id, img.camera_id)
        index = counters.get(key, 0)
        counters[key] = index + 1
        rel = Path(str(img.person_id)) / str(img.camera_id) / f"{index:04d}.png"
        (root / rel).parent.mkdir(parents=True, exist_ok=True)
        pixels = np.clip(np.round(img.image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(pixels).save(root / rel)
        records.append({"path": rel.as_posix(), "person_id": img.person_id, "camera_id": img.camera_id})
    manifest = root / MANIFEST
    root.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(records, columns=MANIFEST_COLUMNS).to_csv(manifest, index=False)
    logger.info(f"Exported {len(records)} images to {root}")
    return manifest


def load_manifest(root: Union[str, Path], size: Optional[Tuple[int, int]] = None) -> List[LabeledImage]:
    """Read a dataset written by ``export_dataset``."""
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise DatasetError(f"Manifest not found: {manifest}")
    frame = pd.read_csv(manifest)
    missing = [c for c in MANIFEST_COLUMNS if c not in frame.columns]
    if missing:
        raise DatasetError(f"{manifest} lacks columns {missing}")
    if frame.empty:
        raise DatasetError(f"{manifest} lists no images")
    dataset = []
    for line, row in enumerate(frame.itertuples(index=False), start=2):
        try:
            pid, cam = int(row.person_id), int(row.camera_id)
        except (TypeError, ValueError):
            raise DatasetError(f"{manifest}:{line}: non-integer person_id or camera_id") from None
        _check_labels(pid, cam, f"{manifest}:{line}")
        dataset.append(LabeledImage(image=read_image(root / row.path, size), person_id=pid, camera_id=cam,
                                    path=row.path))
    return dataset


def load_dataset(root: Union[str, Path], size: Optional[Tuple[int, int]] = None) -> List[LabeledImage]:
    """Manifest when present, directory layout otherwise."""
    root = Path(root)
    if (root / MANIFEST).is_file():
        return load_manifest(root, size)
    return load_folder(root, size)


def nearest_neighbor_rank1(dataset: Sequence[LabeledImage]) -> float:
    """Cross-camera rank-1 of raw-pixel nearest neighbour (first image per identity and camera)."""
    first = {}
    for img in dataset:
        first.setdefault((img.person_id, img.camera_id), img)
    ids = sorted(pid for pid, cam in first if cam == 1 and (pid, 2) in first)
    if len(ids) < 2:
        raise DatasetError("Need at least 2 identities seen by both cameras")
    queries = np.stack([first[(pid, 1)].image.ravel() for pid in ids]).astype(np.float64)
    gallery = np.stack([first[(pid, 2)].image.ravel() for pid in ids]).astype(np.float64)
    scores = ScoreMatrix(scores=-cdist(queries, gallery), match=np.arange(len(ids)))
    return cmc(scores).rank(1)
