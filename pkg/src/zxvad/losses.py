"""Scalar objectives of the generator, the discriminator and the normalcy classifier.

Element-wise losses are mean-reduced. Frames enter in [-1, 1]; SSIM remaps them to
[0, 1] first.
"""
import math
from dataclasses import dataclass, fields
from typing import Dict, Literal, Tuple, Union

import torch
import torch.nn.functional as F
from torchmetrics.functional.image import structural_similarity_index_measure

from zxvad.config import LossWeights
from zxvad.errors import ContractError, NonFiniteLossError

SSIM_KERNEL = 11
SSIM_SIGMA = 1.5
COS_CLAMP = 1e-7

Scalar = Union[torch.Tensor, float]


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ContractError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _non_empty(*scores: torch.Tensor) -> None:
    for s in scores:
        if s.numel() == 0:
            raise ContractError("scores of an empty batch")


def loss_mse(predicted: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _same_shape(predicted, target, "loss_mse")
    return F.mse_loss(predicted, target)


def loss_ssim(predicted: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """1 - SSIM with an 11x11 Gaussian window (sigma 1.5) on frames remapped to [0, 1]"""
    _same_shape(predicted, target, "loss_ssim")
    if predicted.shape[-1] < SSIM_KERNEL or predicted.shape[-2] < SSIM_KERNEL:
        raise ContractError(f"SSIM needs frames of at least {SSIM_KERNEL}x{SSIM_KERNEL}, "
                            f"got {tuple(predicted.shape[-2:])}")
    if predicted.dim() == 3:
        predicted, target = predicted[None], target[None]
    ssim = structural_similarity_index_measure(
        (predicted + 1) / 2, (target + 1) / 2,
        gaussian_kernel=True, sigma=SSIM_SIGMA, kernel_size=SSIM_KERNEL,
        data_range=1.0, k1=0.01, k2=0.03,
    )
    return 1.0 - ssim


def loss_gradient(predicted: torch.Tensor, target: torch.Tensor,
                  reduction: Literal["mean", "sum"] = "mean") -> torch.Tensor:
    """Gradient difference: | |grad v_hat| - |grad v| | over horizontal and vertical neighbours"""
    _same_shape(predicted, target, "loss_gradient")
    reduce = torch.mean if reduction == "mean" else torch.sum
    total = predicted.new_zeros(())
    for dim in (-1, -2):
        if predicted.shape[dim] < 2:
            continue
        grad_p = torch.diff(predicted, dim=dim).abs()
        grad_t = torch.diff(target, dim=dim).abs()
        total = total + reduce((grad_p - grad_t).abs())
    return total


def loss_memory_entropy(weights: torch.Tensor) -> torch.Tensor:
    """Mean Shannon entropy of addressing rows (..., K), with 0 log 0 = 0"""
    if weights.numel() == 0:
        return weights.new_zeros(())
    if (weights < 0).any():
        raise ContractError("memory addressing weights must be non-negative")
    entropy = -torch.special.xlogy(weights, weights).sum(dim=-1)
    return entropy.mean()


def loss_normalcy(n_hat: torch.Tensor, n_tilde: torch.Tensor) -> torch.Tensor:
    _non_empty(n_hat, n_tilde)
    return 0.5 * ((n_hat - 1) ** 2).mean() + 0.5 * (n_tilde ** 2).mean()


def loss_relative_normalcy(n_hat: torch.Tensor, n_tilde: torch.Tensor) -> torch.Tensor:
    """Relativistic-average form: each side is compared to the other side's batch mean"""
    _non_empty(n_hat, n_tilde)
    return (0.5 * ((n_hat - n_tilde.mean() - 1) ** 2).mean()
            + 0.5 * ((n_tilde - n_hat.mean() + 1) ** 2).mean())


def downsample_mask(mask: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbour resize of (B x) H x W masks to the attention resolution"""
    if tuple(mask.shape[-2:]) == tuple(size):
        return mask
    batched = mask.dim() == 3
    resized = F.interpolate((mask if batched else mask[None])[:, None].float(), size=size, mode="nearest-exact")[:, 0]
    return resized if batched else resized[0]


def loss_attention_affirmation(attention_hat: torch.Tensor, attention_tilde: torch.Tensor,
                               mask_small: torch.Tensor) -> torch.Tensor:
    _same_shape(attention_hat, attention_tilde, "loss_attention_affirmation")
    _same_shape(attention_tilde, mask_small, "loss_attention_affirmation")
    return 0.5 * ((1 - attention_hat) ** 2).mean() + 0.5 * ((mask_small - attention_tilde) ** 2).mean()


def arcface_logits(embeddings: torch.Tensor, labels: torch.Tensor, centers: torch.Tensor,
                   scale: float = 64.0, margin: float = math.radians(28.6)) -> torch.Tensor:
    """Scaled cosine logits with an additive angular margin on the target class"""
    vectors = embeddings.flatten(1)
    if vectors.shape[1] != centers.shape[1]:
        raise ContractError(f"attention dimension {vectors.shape[1]} does not match centers {tuple(centers.shape)}")
    if (vectors.norm(dim=1) == 0).any():
        raise ContractError("attention vector with zero norm cannot be normalized")
    if (centers.norm(dim=1) == 0).any():
        raise ContractError("class center with zero norm cannot be normalized")
    cosine = F.linear(F.normalize(vectors, dim=1), F.normalize(centers, dim=1))
    cosine = cosine.clamp(-1 + COS_CLAMP, 1 - COS_CLAMP)
    sine = torch.sqrt(1.0 - cosine ** 2)
    with_margin = cosine * math.cos(margin) - sine * math.sin(margin)
    target = F.one_hot(labels.long(), num_classes=centers.shape[0]).bool()
    return scale * torch.where(target, with_margin, cosine)


def loss_relative_attention(embeddings: torch.Tensor, labels: torch.Tensor, centers: torch.Tensor,
                            scale: float = 64.0, margin: float = math.radians(28.6)) -> torch.Tensor:
    """ArcFace over vectorized attention maps; label 1 = normal, 0 = pseudo-abnormal"""
    if embeddings.shape[0] == 0 or embeddings.shape[0] != labels.shape[0]:
        raise ContractError(f"{embeddings.shape[0]} attention vectors for {labels.shape[0]} labels")
    return F.cross_entropy(arcface_logits(embeddings, labels, centers, scale, margin), labels.long())


def loss_adversarial(d_hat: torch.Tensor, d_real: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Least-squares GAN terms: (generator term, discriminator term)"""
    _non_empty(d_hat, d_real)
    gen_term = 0.5 * ((d_hat - 1) ** 2).mean()
    disc_term = 0.5 * (d_hat ** 2).mean() + 0.5 * ((d_real - 1) ** 2).mean()
    return gen_term, disc_term


def generator_normalcy_term(n_hat: torch.Tensor) -> torch.Tensor:
    """Pressure on the generator to make the classifier call v_hat normal"""
    _non_empty(n_hat)
    return 0.5 * ((n_hat - 1) ** 2).mean()


@dataclass
class LossTerms:
    L_MSE: Scalar = 0.0
    L_SSM: Scalar = 0.0
    L_GD: Scalar = 0.0
    L_MEM: Scalar = 0.0
    L_N: Scalar = 0.0
    L_RN: Scalar = 0.0
    L_AA: Scalar = 0.0
    L_RAA: Scalar = 0.0
    adv_gen: Scalar = 0.0
    adv_disc: Scalar = 0.0
    normalcy_gen: Scalar = 0.0

    def as_floats(self) -> Dict[str, float]:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


def compose_objectives(terms: LossTerms, weights: LossWeights) -> Tuple[Scalar, Scalar, Scalar]:
    """Weighted sums (L_G, L_D, L_N_total) of the component losses"""
    components = terms.as_floats()
    for name, value in components.items():
        if not math.isfinite(value):
            raise NonFiniteLossError(name, components)
    reconstruction = terms.L_MSE + terms.L_SSM + terms.L_GD
    backbone = reconstruction + weights.alpha_MEM * terms.L_MEM
    generator = backbone + weights.alpha_D * terms.adv_gen + weights.alpha_N * terms.normalcy_gen
    classifier = (weights.alpha_n * terms.L_N + weights.alpha_rn * terms.L_RN
                  + weights.alpha_aa * terms.L_AA + weights.alpha_raa * terms.L_RAA)
    return generator, terms.adv_disc, classifier
