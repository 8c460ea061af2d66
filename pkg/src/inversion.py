"""
Feature inversion with a deep image prior.

A randomly initialised reconstructor r_theta maps a fixed noise tensor z0 to an
image; theta is optimised with Adam so that the encoder's features of r_theta(z0)
match the features of the target. The reconstructor's structure is the only
image prior.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from tqdm import tqdm

from src.augmentations import from_tensor, to_tensor
from src.datasets import Image
from src.encoders import ConvEncoder
from src.exceptions import NumericAbortError
from src.reconstructor import build_reconstructor, default_reconstructor_spec, output_shape

DISTANCES = ('l2',)


@dataclass
class InversionConfig:
    iterations: int = 3000
    lr: float = 0.001
    distance: str = 'l2'
    noise_low: float = 0.0
    noise_high: float = 0.1
    seed: int = 0
    depth: int = 6
    dtype: str = 'float32'
    progress: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not self.noise_low < self.noise_high:
            raise ValueError(f"Noise bounds must satisfy low < high, got ({self.noise_low}, {self.noise_high})")
        if self.distance not in DISTANCES:
            raise ValueError(f"Unknown distance '{self.distance}'; expected one of {DISTANCES}")
        if self.dtype not in ('float32', 'float64'):
            raise ValueError(f"dtype must be float32 or float64, got '{self.dtype}'")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == 'float64' else torch.float32


@dataclass
class ReconstructionResult:
    image: Image
    last_image: Image
    trace: np.ndarray
    final_objective: float

    @property
    def running_minimum(self) -> np.ndarray:
        return np.minimum.accumulate(self.trace)


def _feature_fn(encoder: nn.Module) -> Callable[[torch.Tensor], torch.Tensor]:
    if isinstance(encoder, ConvEncoder):
        return encoder.feature_map
    return encoder


def invert_features(encoder: nn.Module, target: Image, config: InversionConfig = None) -> ReconstructionResult:
    """
    Reconstructs an image whose encoder features match those of `target`.

    Args:
        encoder: A frozen ConvEncoder (its last spatial feature map is matched)
            or any module mapping N x C x H x W images to features.
        target: Image whose height and width are divisible by 2**depth.
        config: Optimisation settings.

    Returns:
        The best-objective image, the last-iterate image and the objective trace.
    """
    config = config or InversionConfig()
    spec = default_reconstructor_spec(config.depth, out_channels=target.shape[2])
    output_shape(spec, target.shape[0], target.shape[1])
    dtype = config.torch_dtype
    encoder_param = next(encoder.parameters(), None)
    if encoder_param is not None and encoder_param.dtype != dtype:
        raise ValueError(f"Encoder is {encoder_param.dtype} but inversion runs in {dtype}")

    reconstructor = build_reconstructor(spec, seed=config.seed, dtype=dtype)
    generator = torch.Generator().manual_seed(config.seed)
    z0 = torch.rand((1, spec.noise_channels, target.shape[0], target.shape[1]), generator=generator, dtype=dtype)
    z0 = z0 * (config.noise_high - config.noise_low) + config.noise_low

    encoder_state = [(p, p.requires_grad) for p in encoder.parameters()]
    was_training = encoder.training
    encoder.eval()
    for p, _ in encoder_state:
        p.requires_grad_(False)
    features = _feature_fn(encoder)
    with torch.no_grad():
        target_features = features(to_tensor(target).to(dtype).unsqueeze(0))

    optimizer = torch.optim.Adam(reconstructor.parameters(), lr=config.lr)
    trace = np.empty(config.iterations, dtype=np.float64)
    best_objective, best_image, x = np.inf, None, None
    try:
        for iteration in tqdm(range(config.iterations), desc='inversion', disable=not config.progress):
            optimizer.zero_grad()
            x = reconstructor(z0)
            objective = ((features(x) - target_features) ** 2).sum()
            value = float(objective.detach())
            if not np.isfinite(value):
                raise NumericAbortError(f"Non-finite inversion objective at iteration {iteration}", iteration)
            trace[iteration] = value
            if value < best_objective:
                best_objective, best_image = value, x.detach().clone()
            objective.backward()
            optimizer.step()
    finally:
        for p, requires_grad in encoder_state:
            p.requires_grad_(requires_grad)
        encoder.train(was_training)

    logging.info(f"Inversion of '{target.source}': objective {trace[0]:.4g} -> best {best_objective:.4g} "
                 f"over {config.iterations} iterations")
    return ReconstructionResult(
        image=from_tensor(best_image[0].float(), source=target.source),
        last_image=from_tensor(x.detach()[0].float(), source=target.source),
        trace=trace,
        final_objective=float(best_objective),
    )


def _normalize_channels(feature_map: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    return feature_map / (feature_map.norm(dim=1, keepdim=True) + eps)


@torch.no_grad()
def perceptual_distance(a: Image, b: Image, metric_encoder: ConvEncoder) -> float:
    """
    Sum over the encoder's blocks of channel-normalised feature differences:
    squared differences averaged over space and summed over channels.
    """
    if a.shape != b.shape:
        raise ValueError(f"Images differ in shape: {a.shape} vs {b.shape}")
    dtype = next(metric_encoder.parameters()).dtype
    was_training = metric_encoder.training
    metric_encoder.eval()
    batch = torch.stack([to_tensor(a), to_tensor(b)]).to(dtype)
    total = 0.0
    for block in metric_encoder.block_features(batch):
        normalized = _normalize_channels(block)
        total += float(((normalized[0] - normalized[1]) ** 2).mean(dim=(1, 2)).sum())
    metric_encoder.train(was_training)
    return total


def psnr(a: Image, b: Image) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]."""
    if a.shape != b.shape:
        raise ValueError(f"Images differ in shape: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.pixels.astype(np.float64) - b.pixels.astype(np.float64)) ** 2))
    return float('inf') if mse == 0 else float(10.0 * np.log10(1.0 / mse))


@dataclass
class ReconstructionReport:
    table: pd.DataFrame
    means: pd.Series
    reconstructions: Dict[Tuple[str, str], ReconstructionResult] = field(default_factory=dict)

    def wide(self) -> pd.DataFrame:
        """One row per image, one column per encoder."""
        return self.table.pivot(index='image', columns='encoder', values='distance')


def image_ids(images: Sequence[Image]) -> List[str]:
    return [image.source or f'image_{i}' for i, image in enumerate(images)]


def reconstruction_report(images: Sequence[Image], encoders: Dict[str, nn.Module], metric_encoder: ConvEncoder,
                          config: InversionConfig = None) -> ReconstructionReport:
    """
    Inverts every image through every named encoder and scores each
    reconstruction against its input with the perceptual distance.
    """
    if not images or not encoders:
        raise ValueError("Reconstruction report needs at least one image and one encoder")
    config = config or InversionConfig()

    rows, reconstructions = [], {}
    for image_id, image in zip(image_ids(images), images):
        for name, encoder in encoders.items():
            logging.info(f"--- Inverting {image_id} through {name} ---")
            result = invert_features(encoder, image, config)
            reconstructions[(image_id, name)] = result
            rows.append({
                'image': image_id,
                'encoder': name,
                'distance': perceptual_distance(result.image, image, metric_encoder),
            })

    table = pd.DataFrame(rows, columns=['image', 'encoder', 'distance'])
    means = table.groupby('encoder', sort=False)['distance'].mean()
    for name, mean in means.items():
        logging.info(f"  -> {name}: mean perceptual distance {mean:.4f}")
    return ReconstructionReport(table=table, means=means, reconstructions=reconstructions)
