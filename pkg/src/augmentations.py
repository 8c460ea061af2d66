"""
Staged augmentation pipeline producing paired views of an image.

All randomness comes from an explicit numpy Generator so that (image,
pipeline, seed) determines the output exactly; torchvision only supplies the
deterministic pixel operations.
"""
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch
import torchvision.transforms.functional as TF
from torchvision.transforms import InterpolationMode

from config.augmentations import AUGMENTATION_DEFAULTS, AUGMENTATION_STAGES, CROP_SCALE_MIN, MIN_IMAGE_SIZE
from src.datasets import Image


@dataclass(frozen=True)
class AugmentationPipeline:
    stage: int
    mode: str = 'unsupervised'
    output_size: int = AUGMENTATION_DEFAULTS['output_size']
    flip_p: float = AUGMENTATION_DEFAULTS['flip_p']
    crop_scale_min: float = CROP_SCALE_MIN['unsupervised']
    crop_ratio: Tuple[float, float] = AUGMENTATION_DEFAULTS['crop_ratio']
    jitter: Tuple[float, float, float, float] = AUGMENTATION_DEFAULTS['jitter']
    jitter_p: float = AUGMENTATION_DEFAULTS['jitter_p']
    grayscale_p: float = AUGMENTATION_DEFAULTS['grayscale_p']
    blur_sigma: Tuple[float, float] = AUGMENTATION_DEFAULTS['blur_sigma']
    blur_p: float = AUGMENTATION_DEFAULTS['blur_p']

    def __post_init__(self):
        if not 1 <= self.stage <= len(AUGMENTATION_STAGES):
            raise ValueError(f"Augmentation stage must be in 1..{len(AUGMENTATION_STAGES)}, got {self.stage}")
        for name in ('flip_p', 'jitter_p', 'grayscale_p', 'blur_p'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if not 0.0 < self.crop_scale_min <= 1.0:
            raise ValueError(f"crop_scale_min must be in (0, 1], got {self.crop_scale_min}")
        if not 0.0 < self.blur_sigma[0] <= self.blur_sigma[1]:
            raise ValueError(f"blur_sigma bounds must satisfy 0 < min <= max, got {self.blur_sigma}")
        if self.output_size < MIN_IMAGE_SIZE:
            raise ValueError(f"output_size must be >= {MIN_IMAGE_SIZE}, got {self.output_size}")

    @property
    def transforms(self) -> Tuple[str, ...]:
        """Names of the enabled transforms, in stage order."""
        return tuple(AUGMENTATION_STAGES[:self.stage])

    def enabled(self, name: str) -> bool:
        return name in self.transforms


def pipeline_stage(level: int, mode: str = 'unsupervised', **overrides) -> AugmentationPipeline:
    """
    Builds the cumulative pipeline for a stage: stage k enables every transform
    of stages 1..k. The crop scale lower bound depends on the pretraining mode.
    """
    if mode not in CROP_SCALE_MIN:
        raise ValueError(f"Unknown augmentation mode '{mode}'; expected one of {sorted(CROP_SCALE_MIN)}")
    if not 1 <= level <= len(AUGMENTATION_STAGES):
        raise ValueError(f"Augmentation stage must be in 1..{len(AUGMENTATION_STAGES)}, got {level}")
    params = {'crop_scale_min': CROP_SCALE_MIN[mode]}
    params.update(overrides)
    return AugmentationPipeline(stage=level, mode=mode, **params)


def to_tensor(image: Image) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image.pixels.transpose(2, 0, 1)))


def from_tensor(tensor: torch.Tensor, source: str = '') -> Image:
    pixels = tensor.clamp(0.0, 1.0).permute(1, 2, 0).contiguous().numpy()
    return Image(pixels=pixels, source=source)


def augment(image: Image, pipeline: AugmentationPipeline, rng: np.random.Generator) -> Image:
    """
    Applies one random draw of the pipeline. The enabled transforms run in the
    order crop (or plain resize when cropping is off), flip, colour jitter,
    grayscale, blur; the flip comes after the crop even though it is stage 1.

    Returns:
        An output_size x output_size x C image with values in [0, 1].
    """
    height, width, channels = image.shape
    if min(height, width) < MIN_IMAGE_SIZE:
        raise ValueError(f"Image '{image.source}' is {height}x{width}; too small to crop (minimum {MIN_IMAGE_SIZE})")

    x = to_tensor(image)
    size = [pipeline.output_size, pipeline.output_size]

    if pipeline.enabled('random_resized_crop'):
        top, left, crop_h, crop_w = _sample_crop(height, width, pipeline.crop_scale_min, pipeline.crop_ratio, rng)
        x = TF.resized_crop(x, top, left, crop_h, crop_w, size, interpolation=InterpolationMode.BILINEAR, antialias=True)
    elif (height, width) != tuple(size):
        x = TF.resize(x, size, interpolation=InterpolationMode.BILINEAR, antialias=True)

    if rng.random() < pipeline.flip_p:
        x = TF.hflip(x)

    if pipeline.enabled('color_jitter') and rng.random() < pipeline.jitter_p:
        x = _color_jitter(x, pipeline.jitter, rng)

    if pipeline.enabled('grayscale') and rng.random() < pipeline.grayscale_p and channels == 3:
        x = TF.rgb_to_grayscale(x, num_output_channels=3)

    if pipeline.enabled('gaussian_blur') and rng.random() < pipeline.blur_p:
        sigma = float(rng.uniform(*pipeline.blur_sigma))
        x = TF.gaussian_blur(x, kernel_size=_blur_kernel_size(pipeline.output_size), sigma=sigma)

    return from_tensor(x, source=image.source)


def make_two_views(image: Image, pipeline: AugmentationPipeline, rng: np.random.Generator) -> Tuple[Image, Image]:
    """Two independent draws of the same pipeline: the query and key views."""
    return augment(image, pipeline, rng), augment(image, pipeline, rng)


def _sample_crop(height: int, width: int, scale_min: float, ratio: Tuple[float, float],
                 rng: np.random.Generator) -> Tuple[int, int, int, int]:
    """RandomResizedCrop parameter sampling with a center-crop fallback."""
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target_area = area * rng.uniform(scale_min, 1.0)
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w

    in_ratio = width / height
    if in_ratio < ratio[0]:
        w = width
        h = int(round(w / ratio[0]))
    elif in_ratio > ratio[1]:
        h = height
        w = int(round(h * ratio[1]))
    else:
        w, h = width, height
    return (height - h) // 2, (width - w) // 2, h, w


def _color_jitter(x: torch.Tensor, strengths: Tuple[float, float, float, float],
                  rng: np.random.Generator) -> torch.Tensor:
    """Brightness, contrast, saturation and hue adjustments in a random order."""
    brightness, contrast, saturation, hue = strengths
    factors = {
        'brightness': rng.uniform(max(0.0, 1 - brightness), 1 + brightness),
        'contrast': rng.uniform(max(0.0, 1 - contrast), 1 + contrast),
        'saturation': rng.uniform(max(0.0, 1 - saturation), 1 + saturation),
        'hue': rng.uniform(-hue, hue),
    }
    rgb = x.shape[0] == 3
    for name in rng.permutation(list(factors)):
        value = float(factors[name])
        if name == 'brightness':
            x = TF.adjust_brightness(x, value)
        elif name == 'contrast':
            x = TF.adjust_contrast(x, value)
        elif name == 'saturation' and rgb:
            x = TF.adjust_saturation(x, value)
        elif name == 'hue' and rgb:
            x = TF.adjust_hue(x, value)
    return x


def _blur_kernel_size(output_size: int) -> int:
    # Roughly 10% of the image side, odd, at least 3.
    return max(3, int(0.1 * output_size) // 2 * 2 + 1)
