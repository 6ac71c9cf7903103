"""Pseudo-anomaly synthesis with an untrained, frozen CNN.

A randomly initialised network localizes foreground objects in a donor frame
(channel-sum attention, min-max normalized and thresholded); the object is then
pasted at a random position and size onto a normal frame. The paste mask becomes
the ground truth for the classifier's attention losses.
"""
import hashlib
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from eliot import start_action
from pydantic import BaseModel, ConfigDict, Field
from torch import nn
from torchvision import models as tv_models

from zxvad.config import SynthesisConfig
from zxvad.errors import ContractError, NumericError
from zxvad.ingest import Frame


def _truncate(arch: str, network: nn.Module) -> nn.Module:
    """Keep everything before global pooling / classification"""
    if arch.startswith("resnet"):
        return nn.Sequential(*list(network.children())[:-2])
    if arch.startswith("densenet"):
        return nn.Sequential(network.features, nn.ReLU())
    if arch == "alexnet":
        return network.features
    if arch.startswith("mnasnet"):
        return network.layers
    raise ContractError(f"Unsupported extractor architecture: {arch}")


class FrozenFeatureExtractor(nn.Module):
    """Seeded, randomly initialised CNN body whose parameters never change"""

    def __init__(self, arch: str = "resnet50", seed: int = 0, input_size: Optional[int] = 256):
        super().__init__()
        self.arch = arch
        self.seed = seed
        self.input_size = input_size
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            network = tv_models.get_model(arch, weights=None)
        self.body = _truncate(arch, network)
        self.requires_grad_(False)
        super().train(False)

    def train(self, mode: bool = True) -> "FrozenFeatureExtractor":
        # batch-norm statistics stay at their initial values
        return super().train(False)

    @torch.no_grad()
    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        if self.input_size is not None and frames.shape[-2:] != (self.input_size, self.input_size):
            frames = F.interpolate(frames, size=(self.input_size, self.input_size), mode="bilinear",
                                   align_corners=False)
        return self.body(frames)

    def parameter_digest(self) -> str:
        digest = hashlib.sha256()
        for name, tensor in sorted(self.state_dict().items()):
            digest.update(name.encode("utf-8"))
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()

    @classmethod
    def from_config(cls, cfg: SynthesisConfig) -> "FrozenFeatureExtractor":
        return cls(arch=cfg.extractor_arch, seed=cfg.extractor_seed, input_size=cfg.extractor_input_size)


class PasteBox(BaseModel):
    """Paste rectangle in pixel coordinates: x in [b1, b2), y in [b3, b4)"""
    model_config = ConfigDict(frozen=True)

    b1: int
    b2: int
    b3: int
    b4: int
    b_x: float
    b_y: float
    b_w: float
    b_h: float
    beta: float
    degenerate: bool = Field(False, description="Resampling budget exhausted, box forced to one pixel")

    @property
    def width(self) -> int:
        return self.b2 - self.b1

    @property
    def height(self) -> int:
        return self.b4 - self.b3


class Provenance(BaseModel):
    base_id: str = ""
    base_index: int = 0
    donor_id: str = ""
    donor_index: int = 0
    box: PasteBox
    seed: Optional[int] = None
    mixing: str = "paste"
    empty: bool = False


@dataclass
class PseudoAnomaly:
    frame: torch.Tensor
    mask: torch.Tensor
    box: PasteBox
    empty: bool = False
    provenance: Optional[Provenance] = None


def scda_attention(features: torch.Tensor, normalize: bool = True) -> torch.Tensor:
    """Channel-wise sum of ``features`` (..., d, h, w), min-max normalized per map.

    A constant map normalizes to all zeros.
    """
    if features.dim() < 3 or features.shape[-3] < 1:
        raise ContractError(f"features must be (..., d, h, w) with d >= 1, got {tuple(features.shape)}")
    if not torch.isfinite(features).all():
        raise NumericError("features contain non-finite values")
    summed = features.sum(dim=-3)
    if not normalize:
        return summed
    low = summed.amin(dim=(-2, -1), keepdim=True)
    high = summed.amax(dim=(-2, -1), keepdim=True)
    span = high - low
    varying = span > 0
    safe_span = torch.where(varying, span, torch.ones_like(span))
    return (summed - low) / safe_span * varying


def binarize(attention: torch.Tensor, threshold: float = 0.1) -> torch.Tensor:
    return (attention > threshold).to(torch.float32)


def paste_box_from_draws(H: int, W: int, b_x: float, b_y: float, beta: float) -> Optional[PasteBox]:
    """Evaluate the box formulas for given draws; None when the clipped box is empty"""
    b_w = W * math.sqrt(max(1.0 - beta, 0.0))
    b_h = H * math.sqrt(max(1.0 - beta, 0.0))

    def clip(value: float, upper: int) -> int:
        return int(min(max(math.floor(value + 0.5), 0), upper))

    b1, b2 = clip(b_x - b_w / 2, W), clip(b_x + b_w / 2, W)
    b3, b4 = clip(b_y - b_h / 2, H), clip(b_y + b_h / 2, H)
    if b2 <= b1 or b4 <= b3:
        return None
    return PasteBox(b1=b1, b2=b2, b3=b3, b4=b4, b_x=b_x, b_y=b_y, b_w=b_w, b_h=b_h, beta=beta)


def sample_paste_box(H: int, W: int, rng: np.random.Generator, max_resample: int = 16) -> PasteBox:
    if H <= 0 or W <= 0:
        raise ContractError(f"frame size must be positive, got {H}x{W}")
    b_x = b_y = beta = 0.0
    for _ in range(max_resample + 1):
        b_x = float(rng.uniform(0, W))
        b_y = float(rng.uniform(0, H))
        beta = float(rng.uniform(0, 1))
        box = paste_box_from_draws(H, W, b_x, b_y, beta)
        if box is not None:
            return box
    x = min(int(b_x), W - 1)
    y = min(int(b_y), H - 1)
    return PasteBox(b1=x, b2=x + 1, b3=y, b4=y + 1, b_x=b_x, b_y=b_y, b_w=1.0, b_h=1.0, beta=beta,
                    degenerate=True)


def _resize_mask(mask: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    if tuple(mask.shape[-2:]) == tuple(size):
        return mask
    return F.interpolate(mask[None, None].float(), size=size, mode="nearest-exact")[0, 0]


def paste_object(base: torch.Tensor, donor: torch.Tensor, mask: torch.Tensor, box: PasteBox,
                 mixing: str = "paste", rng: Optional[np.random.Generator] = None) -> PseudoAnomaly:
    """Paste the masked donor object into ``box`` of ``base``.

    ``mask`` is the donor's binary object mask at any resolution; it is brought to the
    frame size and then to the box extent with nearest-neighbour resizing, while the
    masked donor is resized bilinearly and re-masked.
    """
    if base.shape != donor.shape or base.dim() != 3:
        raise ContractError(f"base and donor must share a C x H x W shape, got {tuple(base.shape)} "
                            f"and {tuple(donor.shape)}")
    _, H, W = base.shape
    full_mask = _resize_mask(mask.to(base.device), (H, W))
    extent = (box.height, box.width)
    if mixing == "cutmix":
        box_mask = torch.ones(extent, dtype=base.dtype, device=base.device)
        obj = F.interpolate(donor[None], size=extent, mode="bilinear", align_corners=False)[0]
    else:
        box_mask = _resize_mask(full_mask, extent).to(base.dtype)
        masked_donor = donor * full_mask
        obj = F.interpolate(masked_donor[None], size=extent, mode="bilinear", align_corners=False)[0] * box_mask

    frame = base.clone()
    region = frame[:, box.b3:box.b4, box.b1:box.b2]
    if mixing == "mixup":
        if rng is None:
            raise ContractError("mixup mixing needs an rng for the blend factor")
        lam = float(rng.uniform(0, 1))
        obj = lam * obj + (1.0 - lam) * region
    frame[:, box.b3:box.b4, box.b1:box.b2] = torch.where(box_mask.bool(), obj, region)

    paste_mask = torch.zeros((H, W), dtype=base.dtype, device=base.device)
    paste_mask[box.b3:box.b4, box.b1:box.b2] = box_mask
    return PseudoAnomaly(frame=frame, mask=paste_mask, box=box, empty=bool(box_mask.sum() == 0))


def localize_objects(donors: torch.Tensor, extractor: FrozenFeatureExtractor, threshold: float = 0.1,
                     normalize: bool = True) -> torch.Tensor:
    """Binary foreground masks (B x H x W) of a batch of donor frames"""
    features = extractor(donors)
    masks = binarize(scda_attention(features, normalize=normalize), threshold)
    return F.interpolate(masks[:, None], size=donors.shape[-2:], mode="nearest-exact")[:, 0]


def _paste_with_redraw(base: torch.Tensor, donor: torch.Tensor, mask: torch.Tensor,
                       rng: np.random.Generator, mixing: str, max_resample: int) -> PseudoAnomaly:
    _, H, W = base.shape
    result = None
    for _ in range(max_resample + 1):
        box = sample_paste_box(H, W, rng, max_resample)
        result = paste_object(base, donor, mask, box, mixing, rng)
        if not result.empty:
            break
    return result


def synthesize(base: Frame, donor: Frame, extractor: FrozenFeatureExtractor, threshold: float,
               rng: np.random.Generator, mixing: str = "paste", max_resample: int = 16,
               normalize: bool = True, seed: Optional[int] = None) -> PseudoAnomaly:
    """Create one pseudo-abnormal frame from a normal ``base`` and a ``donor`` frame"""
    mask = localize_objects(donor.pixels[None], extractor, threshold, normalize)[0]
    anomaly = _paste_with_redraw(base.pixels, donor.pixels, mask, rng, mixing, max_resample)
    anomaly.provenance = Provenance(base_id=base.source_id, base_index=base.index, donor_id=donor.source_id,
                                    donor_index=donor.index, box=anomaly.box, seed=seed, mixing=mixing,
                                    empty=anomaly.empty)
    return anomaly


def synthesize_batch(bases: torch.Tensor, donors: torch.Tensor, extractor: FrozenFeatureExtractor,
                     cfg: SynthesisConfig,
                     rng: np.random.Generator) -> Tuple[torch.Tensor, torch.Tensor, List[PasteBox]]:
    """Batched synthesis: one pseudo-anomaly per (base, donor) pair.

    Returns pseudo-abnormal frames (B x C x H x W), masks (B x H x W) and the boxes.
    """
    with start_action(action_type="synthesis:synthesize_batch", batch=int(bases.shape[0])) as action:
        masks = localize_objects(donors, extractor, cfg.threshold, cfg.normalize_attention).to(bases.device)
        frames, paste_masks, boxes = [], [], []
        empty = 0
        for base, donor, mask in zip(bases, donors.to(bases.device), masks):
            anomaly = _paste_with_redraw(base, donor, mask, rng, cfg.mixing, cfg.max_resample)
            frames.append(anomaly.frame)
            paste_masks.append(anomaly.mask)
            boxes.append(anomaly.box)
            empty += int(anomaly.empty)
        if empty:
            action.log(message_type="warning:empty_paste", count=empty)
        return torch.stack(frames), torch.stack(paste_masks), boxes
