"""Generator with a memory bank at its bottleneck, and the patch critics.

The generator is an encoder-decoder with lateral skips that maps T stacked frames to
the next frame. The discriminator and the normalcy classifier share one patch
architecture; the classifier additionally exposes its last hidden feature map for
attention extraction.
"""
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from zxvad.config import NetworkConfig
from zxvad.errors import ContractError
from zxvad.synthesis import scda_attention

SHRINK_EPS = 1e-12


@dataclass
class MemoryReadout:
    z_hat: torch.Tensor
    weights: torch.Tensor
    fallback: torch.Tensor


def memory_address(z: torch.Tensor, items: torch.Tensor, shrink_threshold: float = 0.0005,
                   eps: float = SHRINK_EPS) -> MemoryReadout:
    """Address a K x Q memory with queries ``z`` (Q,) or (N, Q).

    Cosine-similarity softmax, hard shrinkage ``max(w - l, 0) * w / (|w - l| + eps)`` and
    L1 re-normalization. Rows whose shrunk weights all vanish fall back to the plain
    softmax weights and are flagged in ``fallback``.
    """
    single = z.dim() == 1
    queries = z[None] if single else z
    if queries.dim() != 2 or items.dim() != 2 or queries.shape[1] != items.shape[1]:
        raise ContractError(f"query {tuple(z.shape)} does not match memory {tuple(items.shape)}")
    similarity = F.cosine_similarity(queries[:, None, :], items[None, :, :], dim=-1)
    weights = torch.softmax(similarity, dim=1)
    if shrink_threshold > 0:
        shifted = weights - shrink_threshold
        shrunk = F.relu(shifted) * weights / (shifted.abs() + eps)
        total = shrunk.sum(dim=1, keepdim=True)
        fallback = total.squeeze(1) <= 0
        normalized = shrunk / torch.where(total > 0, total, torch.ones_like(total))
        weights = torch.where(fallback[:, None], weights, normalized)
    else:
        fallback = torch.zeros(queries.shape[0], dtype=torch.bool, device=queries.device)
    z_hat = weights @ items
    if single:
        return MemoryReadout(z_hat=z_hat[0], weights=weights[0], fallback=fallback[0])
    return MemoryReadout(z_hat=z_hat, weights=weights, fallback=fallback)


class MemoryBank(nn.Module):
    """K prototype items of dimension Q, read by :func:`memory_address`"""

    def __init__(self, num_items: int, item_dim: int, shrink_threshold: float = 0.0005,
                 addressing: str = "spatial"):
        super().__init__()
        if num_items < 1:
            raise ContractError("memory needs at least one item")
        self.shrink_threshold = shrink_threshold
        self.addressing = addressing
        bound = 1.0 / item_dim ** 0.5
        self.items = nn.Parameter(torch.empty(num_items, item_dim).uniform_(-bound, bound))

    @property
    def num_items(self) -> int:
        return self.items.shape[0]

    @property
    def item_dim(self) -> int:
        return self.items.shape[1]

    def forward(self, features: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Read a B x Q x h x w bottleneck; returns (z_hat map, weights N x K, fallback flags)"""
        batch, channels, height, width = features.shape
        if self.addressing == "global":
            readout = memory_address(features.mean(dim=(2, 3)), self.items, self.shrink_threshold)
            z_hat = readout.z_hat[:, :, None, None].expand(-1, -1, height, width)
            return z_hat, readout.weights, readout.fallback
        queries = features.permute(0, 2, 3, 1).reshape(-1, channels)
        readout = memory_address(queries, self.items, self.shrink_threshold)
        z_hat = readout.z_hat.reshape(batch, height, width, channels).permute(0, 3, 1, 2)
        return z_hat, readout.weights, readout.fallback


def _double_conv(in_channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
    )


class _Up(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_channels, out_channels, kernel_size=2, stride=2)
        self.conv = _double_conv(2 * out_channels, out_channels)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        return self.conv(torch.cat([skip, self.up(x)], dim=1))


@dataclass
class GeneratorOutput:
    frame: torch.Tensor
    weights: torch.Tensor
    fallback: torch.Tensor


class MemoryGenerator(nn.Module):
    """Future-frame predictor: T x C frames in, one C x H x W frame in [-1, 1] out"""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        widths = list(cfg.gen_widths)
        self.T = cfg.T
        self.channels = cfg.channels
        self.inc = _double_conv(cfg.T * cfg.channels, widths[0])
        self.downs = nn.ModuleList(
            nn.Sequential(nn.MaxPool2d(2), _double_conv(w_in, w_out)) for w_in, w_out in zip(widths, widths[1:])
        )
        self.memory = (
            MemoryBank(cfg.memory_items, widths[-1], cfg.shrink_threshold, cfg.memory_addressing)
            if cfg.use_memory else None
        )
        self.ups = nn.ModuleList(_Up(w_in, w_out) for w_in, w_out in zip(widths[::-1], widths[::-1][1:]))
        self.out = nn.Conv2d(widths[0], cfg.channels, kernel_size=1)

    def forward(self, frames: torch.Tensor) -> GeneratorOutput:
        if frames.dim() != 5 or frames.shape[1] != self.T or frames.shape[2] != self.channels:
            raise ContractError(
                f"expected B x {self.T} x {self.channels} x H x W input, got {tuple(frames.shape)}"
            )
        x = self.inc(frames.flatten(1, 2))
        skips = [x]
        for down in self.downs:
            x = down(x)
            skips.append(x)
        skips.pop()
        if self.memory is not None:
            x, weights, fallback = self.memory(x)
        else:
            weights = x.new_zeros((0, 1))
            fallback = torch.zeros(0, dtype=torch.bool, device=x.device)
        for up in self.ups:
            x = up(x, skips.pop())
        return GeneratorOutput(frame=torch.tanh(self.out(x)), weights=weights, fallback=fallback)


def generator_predict(inputs: torch.Tensor, model: MemoryGenerator) -> torch.Tensor:
    """Predict frame T+1 from T input frames (T x C x H x W or B x T x C x H x W)"""
    batched = inputs.dim() == 5
    output = model(inputs if batched else inputs[None]).frame
    return output if batched else output[0]


class PatchCritic(nn.Module):
    """Patch network producing an S x S logit map (no terminal squashing)"""

    def __init__(self, widths: Sequence[int] = (64, 128, 256, 512), in_channels: int = 3):
        super().__init__()
        layers: List[nn.Module] = []
        previous = in_channels
        for i, width in enumerate(widths):
            stride = 1 if i == len(widths) - 1 else 2
            layers.append(nn.Conv2d(previous, width, kernel_size=4, stride=stride, padding=1))
            if i > 0:
                layers.append(nn.InstanceNorm2d(width))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            previous = width
        self.features = nn.Sequential(*layers)
        self.head = nn.Conv2d(previous, 1, kernel_size=4, stride=1, padding=1)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(frames))[:, 0]

    def forward_with_features(self, frames: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        features = self.features(frames)
        return self.head(features)[:, 0], features


def reduce_logits(logits: torch.Tensor) -> torch.Tensor:
    """Mean over the patch map: B x S x S -> B"""
    return logits.flatten(1).mean(dim=1)


def critic_score(frame: torch.Tensor, critic: PatchCritic) -> torch.Tensor:
    """Mean patch logit of a frame (C x H x W -> scalar) or a batch (B x C x H x W -> B)"""
    batched = frame.dim() == 4
    scores = reduce_logits(critic(frame if batched else frame[None]))
    return scores if batched else scores[0]


def extract_attention(frame: torch.Tensor, classifier: PatchCritic) -> torch.Tensor:
    """Channel-sum attention over the classifier's last hidden convolutional features"""
    batched = frame.dim() == 4
    _, features = classifier.forward_with_features(frame if batched else frame[None])
    attention = scda_attention(features)
    return attention if batched else attention[0]


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
