"""
Image datasets: loading from disk, synthetic class-structured data, and splits.

Images are stored as float32 arrays of shape H x W x C with values in [0, 1].
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image as PILImage

from config.augmentations import MIN_IMAGE_SIZE

IMAGE_EXTENSIONS = ('.png', '.ppm')


@dataclass
class Image:
    pixels: np.ndarray
    source: str = ''

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float32)
        if pixels.ndim == 2:
            pixels = pixels[:, :, None]
        if pixels.ndim != 3:
            raise ValueError(f"Image '{self.source}' must be H x W x C, got shape {pixels.shape}")
        height, width, channels = pixels.shape
        if height < MIN_IMAGE_SIZE or width < MIN_IMAGE_SIZE:
            raise ValueError(f"Image '{self.source}' is {height}x{width}; minimum is {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}")
        if channels not in (1, 3):
            raise ValueError(f"Image '{self.source}' has {channels} channels; expected 1 or 3")
        if not np.all(np.isfinite(pixels)) or pixels.min() < 0.0 or pixels.max() > 1.0:
            raise ValueError(f"Image '{self.source}' has values outside [0, 1]")
        self.pixels = pixels

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.pixels.shape


@dataclass
class LabeledImageSet:
    images: List[Image]
    labels: np.ndarray
    class_names: Optional[List[str]] = None
    _num_classes: int = field(init=False, repr=False, default=0)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or len(self.labels) != len(self.images):
            raise ValueError(f"Got {len(self.images)} images but {self.labels.size} labels")
        if len(self.labels) and self.labels.min() < 0:
            raise ValueError("Labels must be non-negative")
        observed = int(self.labels.max()) + 1 if len(self.labels) else 0
        if self.class_names is not None:
            if observed > len(self.class_names):
                raise ValueError(f"Label {observed - 1} has no entry in {len(self.class_names)} class names")
            self._num_classes = len(self.class_names)
        else:
            self._num_classes = observed

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return self._num_classes

    def as_array(self) -> np.ndarray:
        """Stacks all images into an N x H x W x C array (images must share a shape)."""
        shapes = {image.shape for image in self.images}
        if len(shapes) != 1:
            raise ValueError(f"Cannot stack images of differing shapes: {sorted(shapes)}")
        return np.stack([image.pixels for image in self.images])

    def subset(self, indices: Sequence[int]) -> 'LabeledImageSet':
        indices = [int(i) for i in indices]
        return LabeledImageSet(
            images=[self.images[i] for i in indices],
            labels=self.labels[indices],
            class_names=self.class_names,
        )

    def class_indices(self) -> Dict[int, np.ndarray]:
        return {int(c): np.flatnonzero(self.labels == c) for c in np.unique(self.labels)}

    def split(self, train_fraction: float = 0.8, seed: int = 0) -> Tuple['LabeledImageSet', 'LabeledImageSet']:
        """
        Stratified train/test split: each class contributes the same fraction to train.

        Args:
            train_fraction: Share of each class placed in the training split.
            seed: Seed for the within-class shuffle.

        Returns:
            (train, test) subsets.
        """
        if not 0.0 < train_fraction < 1.0:
            raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
        rng = np.random.default_rng(seed)
        train_idx, test_idx = [], []
        for _, members in sorted(self.class_indices().items()):
            members = rng.permutation(members)
            if len(members) == 1:
                n_train = 1
            else:
                n_train = int(np.clip(round(len(members) * train_fraction), 1, len(members) - 1))
            train_idx.extend(members[:n_train])
            test_idx.extend(members[n_train:])
        return self.subset(sorted(train_idx)), self.subset(sorted(test_idx))

    def class_split(self, fractions: Sequence[float], seed: int = 0) -> List['LabeledImageSet']:
        """
        Partitions the classes (not the images) into disjoint groups, e.g. base /
        validation / novel classes for few-shot evaluation. Labels keep their
        original ids.
        """
        classes = np.unique(self.labels)
        rng = np.random.default_rng(seed)
        classes = rng.permutation(classes)
        total = float(sum(fractions))
        bounds = np.round(np.cumsum(fractions) / total * len(classes)).astype(int)
        groups, start = [], 0
        for end in bounds:
            chosen = set(int(c) for c in classes[start:end])
            if not chosen:
                raise ValueError(f"Class split {list(fractions)} leaves an empty group for {len(classes)} classes")
            groups.append(self.subset([i for i, y in enumerate(self.labels) if int(y) in chosen]))
            start = end
        return groups


def read_image(path: Path) -> Image:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Image file not found: {path}")
    try:
        with PILImage.open(path) as handle:
            if handle.mode not in ('L', 'RGB'):
                handle = handle.convert('RGB')
            array = np.asarray(handle, dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise ValueError(f"Unreadable image '{path}': {e}") from e
    return Image(pixels=array, source=str(path))


def save_image(image: Image, path: Path) -> Path:
    """Writes an image as 8-bit PNG (or PPM, by extension)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    array = np.clip(np.round(image.pixels * 255.0), 0, 255).astype(np.uint8)
    if array.shape[2] == 1:
        array = array[:, :, 0]
    PILImage.fromarray(array).save(path)
    return path


def load_dataset(path: Path, format: str = 'directory') -> LabeledImageSet:
    """
    Loads a labeled image set from disk.

    Args:
        path: A directory with one subdirectory per class ('directory'), or a
            manifest of "relative_path<TAB>label" lines ('manifest').
        format: 'directory' or 'manifest'.

    Returns:
        The dataset, ordered by class then filename.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset path not found: {path}")
    if format == 'directory':
        return _load_directory_dataset(path)
    if format == 'manifest':
        return _load_manifest_dataset(path)
    raise ValueError(f"Unknown dataset format '{format}'; expected 'directory' or 'manifest'")


def _load_directory_dataset(root: Path) -> LabeledImageSet:
    if not root.is_dir():
        raise ValueError(f"Dataset path '{root}' is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValueError(f"no classes found in '{root}'")

    images, labels = [], []
    for label, class_dir in enumerate(class_dirs):
        files = sorted(p for p in class_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            raise ValueError(f"Class '{class_dir.name}' in '{root}' contains no images")
        for file in files:
            images.append(read_image(file))
            labels.append(label)

    logging.info(f"Loaded {len(images)} images in {len(class_dirs)} classes from {root}")
    return LabeledImageSet(images=images, labels=np.array(labels), class_names=[d.name for d in class_dirs])


def _load_manifest_dataset(manifest: Path) -> LabeledImageSet:
    base = manifest.parent
    images, labels = [], []
    with open(manifest, encoding='utf-8') as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.rstrip('\n')
            if not line.strip():
                continue
            parts = line.split('\t')
            if len(parts) != 2:
                raise ValueError(f"{manifest}:{line_no}: expected 'relative_path<TAB>label', got '{line}'")
            relative, label = parts
            try:
                label = int(label)
            except ValueError:
                raise ValueError(f"{manifest}:{line_no}: label '{label}' is not an integer") from None
            file = base / relative
            if not file.exists():
                raise FileNotFoundError(f"{manifest}:{line_no}: missing image file '{relative}'")
            images.append(read_image(file))
            labels.append(label)

    if not images:
        raise ValueError(f"Manifest '{manifest}' lists no images")
    order = sorted(range(len(images)), key=lambda i: images[i].source)
    logging.info(f"Loaded {len(images)} images from manifest {manifest}")
    return LabeledImageSet(images=[images[i] for i in order], labels=np.array(labels)[order])


def make_synthetic_dataset(n_classes: int, per_class: int, size: int, seed: int) -> LabeledImageSet:
    """
    Generates a class-structured RGB dataset.

    Each class is a parametric family: an oriented sinusoidal grating with a
    class-specific orientation, frequency and colour, plus a class-specific
    blob placement pattern. Per-image draws vary phase, contrast, blob jitter
    and additive noise. Classes stay separable after grayscale conversion
    because orientation and frequency differ, not only colour.
    """
    if n_classes < 1 or per_class < 1 or size < 1:
        raise ValueError(f"n_classes, per_class and size must be >= 1, got {n_classes}, {per_class}, {size}")
    if size < MIN_IMAGE_SIZE:
        raise ValueError(f"size must be >= {MIN_IMAGE_SIZE}, got {size}")

    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) / size
    images, labels = [], []
    for c in range(n_classes):
        angle = np.pi * c / n_classes
        frequency = 2.0 + 3.0 * ((c * 7) % n_classes) / max(n_classes, 1)
        hue = c / n_classes
        colour = _hue_to_rgb(hue)
        blob_centre = np.array([0.3 + 0.4 * ((c * 3) % n_classes) / n_classes,
                                0.3 + 0.4 * ((c * 5) % n_classes) / n_classes])
        for i in range(per_class):
            phase = rng.uniform(0, 2 * np.pi)
            contrast = rng.uniform(0.6, 1.0)
            grating = 0.5 + 0.5 * contrast * np.sin(
                2 * np.pi * frequency * (xs * np.cos(angle) + ys * np.sin(angle)) + phase)
            centre = blob_centre + rng.normal(0, 0.05, size=2)
            blob = np.exp(-((xs - centre[0]) ** 2 + (ys - centre[1]) ** 2) / (2 * 0.12 ** 2))
            base = 0.7 * grating + 0.3 * blob
            pixels = base[:, :, None] * colour[None, None, :] + 0.15 * (1 - colour[None, None, :]) * blob[:, :, None]
            pixels = pixels + rng.normal(0, 0.03, size=pixels.shape)
            images.append(Image(pixels=np.clip(pixels, 0.0, 1.0), source=f"synthetic/{c}/{i}"))
            labels.append(c)

    return LabeledImageSet(images=images, labels=np.array(labels), class_names=[f"class_{c}" for c in range(n_classes)])


def _hue_to_rgb(hue: float) -> np.ndarray:
    """Fully saturated colour for a hue in [0, 1), lifted away from black."""
    k = (np.array([5.0, 3.0, 1.0]) + hue * 6.0) % 6.0
    rgb = 1.0 - np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)
    return 0.35 + 0.65 * rgb
