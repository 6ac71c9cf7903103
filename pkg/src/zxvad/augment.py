"""Normal-frame augmentation g(.): color jitter, random affine and random perspective.

Parameters are drawn from a numpy generator so an augmentation is reproducible from the
rng state alone. Transforms run on [0, 1] pixels; regions moved in from outside the
frame are black (-1 after mapping back).
"""
from typing import Callable, List, Tuple

import numpy as np
import torch
from torchvision.transforms import InterpolationMode
from torchvision.transforms.v2 import functional as TF

from zxvad.config import AugmentConfig
from zxvad.ingest import Frame

Op = Callable[[torch.Tensor], torch.Tensor]


def _jitter_factor(rng: np.random.Generator, magnitude: float) -> float:
    return float(rng.uniform(max(0.0, 1.0 - magnitude), 1.0 + magnitude))


def _perspective_points(height: int, width: int, scale: float,
                        rng: np.random.Generator) -> Tuple[List[List[int]], List[List[int]]]:
    half_h, half_w = height // 2, width // 2
    dx = int(scale * half_w) + 1
    dy = int(scale * half_h) + 1
    top_left = [int(rng.integers(0, dx)), int(rng.integers(0, dy))]
    top_right = [width - int(rng.integers(0, dx)) - 1, int(rng.integers(0, dy))]
    bottom_right = [width - int(rng.integers(0, dx)) - 1, height - int(rng.integers(0, dy)) - 1]
    bottom_left = [int(rng.integers(0, dx)), height - int(rng.integers(0, dy)) - 1]
    start = [[0, 0], [width - 1, 0], [width - 1, height - 1], [0, height - 1]]
    return start, [top_left, top_right, bottom_right, bottom_left]


def _sample_ops(height: int, width: int, cfg: AugmentConfig, rng: np.random.Generator) -> List[Op]:
    """Draw every parameter (always, so rng consumption is fixed) and keep the active ops"""
    ops: List[Op] = []

    def keep(op: Op) -> None:
        if float(rng.random()) < cfg.p:
            ops.append(op)

    brightness = _jitter_factor(rng, cfg.brightness)
    contrast = _jitter_factor(rng, cfg.contrast)
    saturation = _jitter_factor(rng, cfg.saturation)
    hue = float(rng.uniform(-cfg.hue, cfg.hue))
    if brightness != 1.0:
        keep(lambda x: TF.adjust_brightness(x, brightness))
    if contrast != 1.0:
        keep(lambda x: TF.adjust_contrast(x, contrast))
    if saturation != 1.0:
        keep(lambda x: TF.adjust_saturation(x, saturation))
    if hue != 0.0:
        keep(lambda x: TF.adjust_hue(x, hue))

    angle = float(rng.uniform(-cfg.degrees, cfg.degrees))
    angle = (angle + 180.0) % 360.0 - 180.0
    if angle != 0.0:
        keep(lambda x: TF.affine(x, angle=angle, translate=[0, 0], scale=1.0, shear=[0.0, 0.0],
                                 interpolation=InterpolationMode.BILINEAR, fill=0.0))

    start, end = _perspective_points(height, width, cfg.distortion_scale, rng)
    if start != end:
        keep(lambda x: TF.perspective(x, startpoints=start, endpoints=end,
                                      interpolation=InterpolationMode.BILINEAR, fill=0.0))
    return ops


def augment_pixels(pixels: torch.Tensor, cfg: AugmentConfig, rng: np.random.Generator) -> torch.Tensor:
    """Augment one C x H x W tensor in [-1, 1]; identity when every op is inactive"""
    ops = _sample_ops(pixels.shape[-2], pixels.shape[-1], cfg, rng)
    if not ops:
        return pixels
    x = ((pixels + 1.0) / 2.0).clamp(0.0, 1.0)
    for op in ops:
        x = op(x)
    return (x.clamp(0.0, 1.0) * 2.0 - 1.0).clamp(-1.0, 1.0)


def augment(frame: Frame, cfg: AugmentConfig, rng: np.random.Generator) -> Frame:
    return Frame(pixels=augment_pixels(frame.pixels, cfg, rng), source_id=frame.source_id, index=frame.index)


def augment_batch(frames: torch.Tensor, cfg: AugmentConfig, rng: np.random.Generator) -> torch.Tensor:
    """Independent augmentation of every frame of a B x C x H x W batch"""
    return torch.stack([augment_pixels(frame, cfg, rng) for frame in frames])


def identity_config() -> AugmentConfig:
    return AugmentConfig(brightness=0.0, contrast=0.0, saturation=0.0, hue=0.0, degrees=0.0,
                         distortion_scale=0.0)
