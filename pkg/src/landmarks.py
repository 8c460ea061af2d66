"""
Facial-landmark regression on top of a (frozen or finetuned) backbone, with
inter-ocular normalised error.
"""
import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from src.datasets import Image
from src.encoders import ConvEncoder, images_to_tensor
from src.evaluation import EvalResult, confidence_interval

DEFAULT_LANDMARKS = 5
HEAD_CHANNELS = 128

# Face-relative template: left eye, right eye, nose, left and right mouth corner.
FACE_TEMPLATE = np.array([[-0.35, -0.25], [0.35, -0.25], [0.0, 0.05], [-0.25, 0.35], [0.25, 0.35]])


@dataclass
class LandmarkSet:
    coords: np.ndarray
    inter_ocular: Optional[float] = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise ValueError(f"Landmark coordinates must be L x 2, got shape {self.coords.shape}")
        if self.inter_ocular is not None and not self.inter_ocular > 0:
            raise ValueError(f"inter_ocular must be > 0, got {self.inter_ocular}")

    def __len__(self) -> int:
        return len(self.coords)


def landmark_error(pred: LandmarkSet, gt: LandmarkSet) -> float:
    """Mean Euclidean landmark distance divided by the ground-truth inter-ocular distance."""
    if gt.inter_ocular is None or not gt.inter_ocular > 0:
        raise ValueError(f"Ground truth needs inter_ocular > 0, got {gt.inter_ocular}")
    if len(pred) != len(gt):
        raise ValueError(f"Predicted {len(pred)} landmarks, ground truth has {len(gt)}")
    distances = np.linalg.norm(pred.coords - gt.coords, axis=1)
    return float(distances.mean() / gt.inter_ocular)


class LandmarkHead(nn.Module):
    """
    1x1 conv (c -> 128), LeakyReLU, BatchNorm, flatten, fully connected -> 2L.
    """

    def __init__(self, in_channels: int, spatial: Tuple[int, int], n_landmarks: int = DEFAULT_LANDMARKS,
                 hidden: int = HEAD_CHANNELS):
        super().__init__()
        self.in_channels = in_channels
        self.spatial = tuple(spatial)
        self.n_landmarks = n_landmarks
        self.reduce = nn.Conv2d(in_channels, hidden, kernel_size=1)
        self.activation = nn.LeakyReLU(0.2)
        self.norm = nn.BatchNorm2d(hidden)
        self.output = nn.Linear(hidden * self.spatial[0] * self.spatial[1], 2 * n_landmarks)
        self.backbone: Optional[nn.Module] = None

    def forward(self, feature_maps: torch.Tensor) -> torch.Tensor:
        x = self.norm(self.activation(self.reduce(feature_maps)))
        return self.output(torch.flatten(x, 1)).view(-1, self.n_landmarks, 2)


def landmark_head_forward(feature_map: torch.Tensor, head: LandmarkHead) -> torch.Tensor:
    """Maps one h x w x c feature map to L x 2 coordinates."""
    if feature_map.dim() != 3 or feature_map.shape[2] != head.in_channels:
        raise ValueError(f"Expected an h x w x {head.in_channels} feature map, got {tuple(feature_map.shape)}")
    return head(feature_map.permute(2, 0, 1).unsqueeze(0))[0]


def load_landmark_file(path: Path) -> List[Tuple[Path, LandmarkSet]]:
    """
    Reads "path x1 y1 ... xL yL iod" lines. Image paths are resolved relative
    to the landmark file. Blank lines and '#' comments are skipped.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Landmark file not found: {path}")

    entries = []
    with open(path, encoding='utf-8') as handle:
        for line_number, line in enumerate(handle, start=1):
            tokens = line.split()
            if not tokens or tokens[0].startswith('#'):
                continue
            if len(tokens) < 4 or len(tokens) % 2 != 0:
                raise ValueError(f"{path}:{line_number}: expected 'path x1 y1 ... xL yL iod', got {len(tokens)} fields")
            try:
                values = [float(t) for t in tokens[1:]]
            except ValueError:
                raise ValueError(f"{path}:{line_number}: non-numeric coordinate") from None
            try:
                landmarks = LandmarkSet(coords=np.array(values[:-1]).reshape(-1, 2), inter_ocular=values[-1])
            except ValueError as e:
                raise ValueError(f"{path}:{line_number}: {e}") from None
            entries.append((path.parent / tokens[0], landmarks))

    logging.info(f"Loaded {len(entries)} landmark annotations from {path}")
    return entries


def make_synthetic_landmark_set(n: int, size: int, seed: int) -> Tuple[List[Image], List[LandmarkSet]]:
    """
    Renders colour "faces": an ellipse with dark eye, nose and
    mouth-corner dots at jittered position, scale and rotation. Coordinates
    are (x, y) pixels; inter-ocular distance is the eye-to-eye distance.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images, landmarks = [], []
    for i in range(n):
        center = rng.uniform(0.42, 0.58, size=2) * size
        scale = rng.uniform(0.45, 0.6) * size
        angle = rng.uniform(-0.3, 0.3)
        rotation = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
        points = FACE_TEMPLATE @ rotation.T * scale + center

        background = rng.uniform(0.0, 0.3, size=3)
        skin = rng.uniform(0.6, 0.9, size=3)
        dx, dy = xx - center[0], yy - center[1]
        u = np.cos(angle) * dx + np.sin(angle) * dy
        v = -np.sin(angle) * dx + np.cos(angle) * dy
        face = ((u / (0.5 * scale)) ** 2 + (v / (0.62 * scale)) ** 2) <= 1.0
        pixels = np.where(face[:, :, None], skin, background)

        dot_sigma = max(0.04 * scale, 0.6)
        for x, y in points:
            dot = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * dot_sigma ** 2))
            pixels = pixels * (1.0 - 0.85 * dot[:, :, None])
        pixels = np.clip(pixels + rng.normal(0.0, 0.02, size=pixels.shape), 0.0, 1.0)

        images.append(Image(pixels=pixels.astype(np.float32), source=f'face_{i}'))
        landmarks.append(LandmarkSet(coords=points, inter_ocular=float(np.linalg.norm(points[1] - points[0]))))
    return images, landmarks


@dataclass
class LandmarkConfig:
    epochs: int = 100
    lr: float = 0.001
    batch_size: int = 32
    finetune_backbone: bool = False
    image_size: Optional[int] = None
    seed: int = 0
    progress: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("Landmark training needs epochs >= 1, batch_size >= 1 and lr > 0")


def train_landmark_head(encoder: ConvEncoder, images: Sequence[Image], landmarks: Sequence[LandmarkSet],
                        config: LandmarkConfig = None) -> LandmarkHead:
    """
    Fits a landmark head with Adam on mean squared coordinate error.

    With `finetune_backbone` a copy of the encoder is trained end-to-end and
    attached to the returned head as `head.backbone`; the passed encoder is
    never modified.
    """
    config = config or LandmarkConfig()
    if len(images) != len(landmarks) or not images:
        raise ValueError(f"Need one landmark set per image, got {len(images)} images and {len(landmarks)} sets")
    torch.manual_seed(config.seed)

    dtype = next(encoder.parameters()).dtype
    x = images_to_tensor(images, size=config.image_size, dtype=dtype)
    scale = x.shape[-1] / images[0].shape[1]
    targets = torch.as_tensor(np.stack([lm.coords for lm in landmarks]) * scale, dtype=dtype)

    backbone = copy.deepcopy(encoder) if config.finetune_backbone else encoder
    backbone.train(config.finetune_backbone)
    with torch.no_grad():
        frozen_maps = None if config.finetune_backbone else backbone.feature_map(x)
        sample = frozen_maps if frozen_maps is not None else backbone.feature_map(x[:1])

    head = LandmarkHead(sample.shape[1], tuple(sample.shape[2:]), n_landmarks=targets.shape[1]).to(dtype)
    with torch.no_grad():
        head.output.weight.mul_(0.1)
        head.output.bias.copy_(targets.mean(dim=0).flatten())

    params = list(head.parameters())
    if config.finetune_backbone:
        params += list(backbone.parameters())
        head.backbone = backbone
    optimizer = torch.optim.Adam(params, lr=config.lr)

    rng = np.random.default_rng(config.seed)
    normaliser = float(x.shape[-1])
    head.train()
    for epoch in tqdm(range(config.epochs), desc='landmark head', disable=not config.progress):
        order = rng.permutation(len(x))
        for start in range(0, len(x), config.batch_size):
            idx = torch.as_tensor(order[start:start + config.batch_size])
            if len(idx) < 2:
                continue
            maps = frozen_maps[idx] if frozen_maps is not None else backbone.feature_map(x[idx])
            loss = F.mse_loss(head(maps) / normaliser, targets[idx] / normaliser)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

    head.eval()
    backbone.eval()
    logging.info(f"Trained landmark head for {config.epochs} epochs on {len(x)} images "
                 f"({'finetuned' if config.finetune_backbone else 'frozen'} backbone)")
    return head


@torch.no_grad()
def predict_landmarks(encoder: ConvEncoder, head: LandmarkHead, images: Sequence[Image],
                      image_size: Optional[int] = None) -> List[LandmarkSet]:
    """Predictions in the pixel frame of each input image."""
    backbone = head.backbone if head.backbone is not None else encoder
    was_training = (backbone.training, head.training)
    backbone.eval()
    head.eval()
    dtype = next(head.parameters()).dtype
    x = images_to_tensor(images, size=image_size, dtype=dtype)
    coords = head(backbone.feature_map(x)).double().numpy()
    backbone.train(was_training[0])
    head.train(was_training[1])
    scales = [x.shape[-1] / image.shape[1] for image in images]
    return [LandmarkSet(coords=c / s) for c, s in zip(coords, scales)]


def evaluate_landmarks(encoder: ConvEncoder, head: LandmarkHead, images: Sequence[Image],
                       landmarks: Sequence[LandmarkSet], image_size: Optional[int] = None) -> EvalResult:
    predictions = predict_landmarks(encoder, head, images, image_size)
    errors = [landmark_error(pred, gt) for pred, gt in zip(predictions, landmarks)]
    result = confidence_interval(errors)
    logging.info(f"Landmark error (fraction of inter-ocular distance): {result}")
    return result
