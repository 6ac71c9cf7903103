"""End-to-end training of the generator, the discriminator and the normalcy classifier.

One iteration: the generator predicts v_hat, pseudo-anomalies are synthesized from the
ground-truth frames, then the discriminator, the classifier and finally the generator
are updated in that order. All randomness of iteration ``i`` comes from
``numpy.random.default_rng([seed, i, stream])`` so resuming from a checkpoint replays
the uninterrupted run.
"""
import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from eliot import start_action
from pydantic import BaseModel
from torch import nn
from torch.utils.data import DataLoader, Dataset, Sampler
from tqdm import tqdm

from zxvad.augment import augment_batch
from zxvad.config import DEVICE_ENV, TrainConfig, config_hash, dump_config
from zxvad.errors import ConfigError, ContractError, ManifestError
from zxvad.ingest import ClipDataset, DatasetManifest, load_frame
from zxvad.losses import (
    LossTerms,
    compose_objectives,
    downsample_mask,
    generator_normalcy_term,
    loss_adversarial,
    loss_attention_affirmation,
    loss_gradient,
    loss_memory_entropy,
    loss_mse,
    loss_normalcy,
    loss_relative_attention,
    loss_relative_normalcy,
    loss_ssim,
)
from zxvad.networks import MemoryGenerator, PatchCritic, reduce_logits
from zxvad.synthesis import FrozenFeatureExtractor, scda_attention, synthesize_batch

LOG_FILE = "train_log.csv"
CHECKPOINT_DIR = "checkpoints"
RESOLVED_CONFIG = "config.resolved.cfg"
SAMPLER_STREAM = 0
STEP_STREAM = 1
TI_SUBSET_STREAM = 2
# where a run writes, not what it computes; kept out of checkpoints
RUN_LOCATION_FIELDS = {"output_dir", "resume_from"}


class LossReport(BaseModel):
    iter: int
    L_MSE: float
    L_SSM: float
    L_GD: float
    L_MEM: float
    L_N: float
    L_RN: float
    L_AA: float
    L_RAA: float
    L_G: float
    L_D: float
    L_N_total: float


@dataclass
class TrainState:
    """Every trainable part of a run plus its optimizers and the iteration counter"""
    generator: MemoryGenerator
    discriminator: PatchCritic
    classifier: PatchCritic
    centers: nn.Parameter
    opt_G: torch.optim.Adam
    opt_D: torch.optim.Adam
    opt_N: torch.optim.Adam
    extractor: FrozenFeatureExtractor
    iteration: int = 0
    seed: int = 0

    @property
    def device(self) -> torch.device:
        return self.centers.device

    def state_dict(self) -> Dict[str, object]:
        return {
            "generator": self.generator.state_dict(),
            "discriminator": self.discriminator.state_dict(),
            "classifier": self.classifier.state_dict(),
            "centers": self.centers.detach().clone(),
            "opt_G": self.opt_G.state_dict(),
            "opt_D": self.opt_D.state_dict(),
            "opt_N": self.opt_N.state_dict(),
            "iteration": self.iteration,
            "seed": self.seed,
        }

    def load_state_dict(self, payload: Dict[str, object]) -> None:
        self.generator.load_state_dict(payload["generator"])
        self.discriminator.load_state_dict(payload["discriminator"])
        self.classifier.load_state_dict(payload["classifier"])
        with torch.no_grad():
            self.centers.copy_(payload["centers"])
        self.opt_G.load_state_dict(payload["opt_G"])
        self.opt_D.load_state_dict(payload["opt_D"])
        self.opt_N.load_state_dict(payload["opt_N"])
        self.iteration = int(payload["iteration"])
        self.seed = int(payload["seed"])


def resolve_device(name: str = "auto") -> torch.device:
    name = os.getenv(DEVICE_ENV, name)
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


def configure_determinism(deterministic: bool) -> None:
    if deterministic:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
    torch.use_deterministic_algorithms(deterministic)
    torch.backends.cudnn.benchmark = not deterministic
    torch.backends.cudnn.deterministic = deterministic


def attention_size(classifier: PatchCritic, channels: int, image_size: int) -> Tuple[int, int]:
    """Spatial size h_N x w_N of the classifier's last hidden feature map"""
    with torch.no_grad():
        blank = torch.zeros(1, channels, image_size, image_size, device=next(classifier.parameters()).device)
        features = classifier.features(blank)
    return int(features.shape[-2]), int(features.shape[-1])


def build_state(cfg: TrainConfig, device: Optional[torch.device] = None) -> TrainState:
    """Initialise all networks from ``cfg.seed``; the extractor from its own seed"""
    device = device or resolve_device(cfg.device)
    net_cfg = cfg.network_config
    torch.manual_seed(cfg.seed)
    generator = MemoryGenerator(net_cfg).to(device)
    discriminator = PatchCritic(cfg.critic_widths, net_cfg.channels).to(device)
    classifier = PatchCritic(cfg.critic_widths, net_cfg.channels).to(device)
    h, w = attention_size(classifier, net_cfg.channels, cfg.image_size)
    centers = nn.Parameter(nn.functional.normalize(torch.randn(2, h * w), dim=1).to(device))
    betas = (cfg.beta1, cfg.beta2)
    return TrainState(
        generator=generator,
        discriminator=discriminator,
        classifier=classifier,
        centers=centers,
        opt_G=torch.optim.Adam(generator.parameters(), lr=cfg.lr_G, betas=betas),
        opt_D=torch.optim.Adam(discriminator.parameters(), lr=cfg.lr_D, betas=betas),
        opt_N=torch.optim.Adam(list(classifier.parameters()) + [centers], lr=cfg.lr_N, betas=betas),
        extractor=FrozenFeatureExtractor.from_config(cfg.synthesis_config).to(device),
        iteration=0,
        seed=cfg.seed,
    )


def parameter_digest(parameters: Sequence[torch.Tensor]) -> str:
    digest = hashlib.sha256()
    for tensor in parameters:
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(state: TrainState, cfg: TrainConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = state.state_dict()
    payload["config"] = cfg.model_dump(mode="json", exclude=RUN_LOCATION_FIELDS)
    payload["config_hash"] = config_hash(cfg, exclude=RUN_LOCATION_FIELDS)
    torch.save(payload, path)
    return path


def read_checkpoint(path: Union[str, Path], device: Optional[torch.device] = None) -> Dict[str, object]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"Checkpoint not found: {path}"])
    return torch.load(path, map_location=device or "cpu", weights_only=True)


def load_checkpoint(path: Union[str, Path], device: Optional[torch.device] = None) -> Tuple[TrainState, TrainConfig]:
    """Rebuild the networks from the stored config and restore every tensor"""
    payload = read_checkpoint(path, device)
    cfg = TrainConfig.model_validate(payload["config"])
    state = build_state(cfg, device)
    state.load_state_dict(payload)
    return state, cfg


def checkpoint_path(output_dir: Path, iteration: int) -> Path:
    return output_dir / CHECKPOINT_DIR / f"ckpt_{iteration:06d}.pt"


@dataclass(frozen=True)
class SampleKey:
    window: int
    donor_video: int
    donor_frame: int


class TrainingSamples(Dataset):
    """Clip windows of the generator source paired with donor frames of the donor pool"""

    def __init__(self, clips: ClipDataset, donors: DatasetManifest):
        self.clips = clips
        self.donors = donors

    def __len__(self) -> int:
        return len(self.clips)

    def __getitem__(self, key: SampleKey) -> Dict[str, torch.Tensor]:
        item = self.clips[key.window]
        donor = load_frame(self.donors.videos[key.donor_video], key.donor_frame, self.clips.size)
        item["donor"] = donor.pixels
        return item


class IterationBatchSampler(Sampler[List[SampleKey]]):
    """Yields the batch of iteration ``i`` from ``default_rng([seed, i, 0])``"""

    def __init__(self, num_windows: int, donors: DatasetManifest, batch_size: int, seed: int,
                 start: int, stop: int):
        self.num_windows = num_windows
        self.donor_counts = [video.frame_count for video in donors.videos]
        self.batch_size = batch_size
        self.seed = seed
        self.start = start
        self.stop = stop

    def batch_for(self, iteration: int) -> List[SampleKey]:
        rng = np.random.default_rng([self.seed, iteration, SAMPLER_STREAM])
        windows = rng.choice(self.num_windows, size=self.batch_size, replace=self.num_windows < self.batch_size)
        keys = []
        for window in windows:
            video = int(rng.integers(len(self.donor_counts)))
            frame = int(rng.integers(self.donor_counts[video]))
            keys.append(SampleKey(window=int(window), donor_video=video, donor_frame=frame))
        return keys

    def __iter__(self) -> Iterator[List[SampleKey]]:
        for iteration in range(self.start, self.stop):
            yield self.batch_for(iteration)

    def __len__(self) -> int:
        return max(self.stop - self.start, 0)


def select_ti_subset(manifest: DatasetManifest, fraction: float, seed: int) -> DatasetManifest:
    """Seeded random subset holding ``fraction`` of the videos (at least one)"""
    if fraction >= 1.0 or not manifest.videos:
        return manifest
    rng = np.random.default_rng([seed, TI_SUBSET_STREAM])
    count = max(1, int(round(fraction * len(manifest.videos))))
    chosen = sorted(rng.choice(len(manifest.videos), size=count, replace=False).tolist())
    return DatasetManifest(kind=manifest.kind, videos=[manifest.videos[i] for i in chosen])


def _load_manifest(path: Optional[Path], what: str) -> DatasetManifest:
    if path is None:
        raise ConfigError([f"{what}: no manifest configured"])
    try:
        return DatasetManifest.load(path)
    except ManifestError as e:
        raise ConfigError([f"{what}: {e}"]) from e


def resolve_sources(cfg: TrainConfig) -> Tuple[DatasetManifest, DatasetManifest]:
    """(generator-input manifest, donor manifest) according to the configured sources"""
    pools: Dict[str, DatasetManifest] = {}
    for source in {cfg.generator_source, cfg.donor_source}:
        if source == "vad":
            pools[source] = _load_manifest(cfg.train_manifest, "train_manifest")
        else:
            pools[source] = select_ti_subset(_load_manifest(cfg.ti_manifest, "ti_manifest"), cfg.ti_fraction, cfg.seed)
    return pools[cfg.generator_source], pools[cfg.donor_source]


def build_samples(cfg: TrainConfig) -> TrainingSamples:
    clips_manifest, donors = resolve_sources(cfg)
    clips = ClipDataset(clips_manifest, cfg.T, cfg.image_size)
    if len(clips) == 0:
        raise ConfigError([f"{cfg.generator_source} source has no clip of {cfg.T + 1} consecutive frames"])
    if donors.total_frames == 0:
        raise ConfigError([f"{cfg.donor_source} donor pool has no frames"])
    return TrainingSamples(clips, donors)


def _classify(classifier: PatchCritic, frames: torch.Tensor, sigmoid: bool) -> Tuple[torch.Tensor, torch.Tensor]:
    logits, features = classifier.forward_with_features(frames)
    scores = reduce_logits(logits)
    return (torch.sigmoid(scores) if sigmoid else scores), scda_attention(features)


def _relative_attention_term(attention: torch.Tensor, labels: torch.Tensor, centers: torch.Tensor,
                             cfg: TrainConfig) -> torch.Tensor:
    vectors = attention.flatten(1)
    keep = vectors.norm(dim=1) > 0
    if not keep.any():
        return centers.new_zeros(())
    return loss_relative_attention(vectors[keep], labels[keep], centers, cfg.arcface_scale, cfg.arcface_margin)


def _set_trainable(module: nn.Module, flag: bool) -> None:
    for parameter in module.parameters():
        parameter.requires_grad_(flag)


def train_step(batch: Dict[str, torch.Tensor], state: TrainState, cfg: TrainConfig,
               rng: Optional[np.random.Generator] = None) -> LossReport:
    """One D -> N -> G update on a batch with ``inputs``, ``target`` and ``donor`` tensors"""
    device = state.device
    inputs = batch["inputs"].to(device)
    target = batch["target"].to(device)
    donors = batch["donor"].to(device)
    if inputs.shape[0] != target.shape[0] or donors.shape != target.shape:
        raise ContractError("inputs, targets and donors must share the batch size and frame shape")
    rng = rng if rng is not None else np.random.default_rng([state.seed, state.iteration, STEP_STREAM])
    weights = cfg.loss_weights
    state.generator.train()
    state.discriminator.train()
    state.classifier.train()

    output = state.generator(inputs)
    v_hat = output.frame
    v_hat_fixed = v_hat.detach()
    v_tilde, masks, _ = synthesize_batch(target, donors, state.extractor, cfg.synthesis_config, rng)
    v_aug = augment_batch(v_hat_fixed, cfg.augment_config, rng)

    # discriminator
    disc = target.new_zeros(())
    if cfg.use_adversarial:
        _, disc = loss_adversarial(reduce_logits(state.discriminator(v_hat_fixed)),
                                   reduce_logits(state.discriminator(target)))
        _, L_D, _ = compose_objectives(LossTerms(adv_disc=disc), weights)
        state.opt_D.zero_grad(set_to_none=True)
        L_D.backward()
        state.opt_D.step()

    # normalcy classifier
    n_hat, a_hat = _classify(state.classifier, v_hat_fixed, cfg.normalcy_sigmoid)
    n_tilde, a_tilde = _classify(state.classifier, v_tilde, cfg.normalcy_sigmoid)
    _, a_aug = _classify(state.classifier, v_aug, cfg.normalcy_sigmoid)
    mask_small = downsample_mask(masks, tuple(a_tilde.shape[-2:]))
    batch_size = v_hat.shape[0]
    labels = torch.cat([
        torch.ones(2 * batch_size, dtype=torch.long, device=device),
        torch.zeros(batch_size, dtype=torch.long, device=device),
    ])
    classifier_terms = LossTerms(
        L_N=loss_normalcy(n_hat, n_tilde),
        L_RN=loss_relative_normalcy(n_hat, n_tilde),
        L_AA=loss_attention_affirmation(a_hat, a_tilde, mask_small),
        L_RAA=_relative_attention_term(torch.cat([a_hat, a_aug, a_tilde]), labels, state.centers, cfg),
    )
    _, _, L_N_total = compose_objectives(classifier_terms, weights)
    state.opt_N.zero_grad(set_to_none=True)
    L_N_total.backward()
    state.opt_N.step()

    # generator, with both critics frozen
    _set_trainable(state.discriminator, False)
    _set_trainable(state.classifier, False)
    try:
        adv_gen = target.new_zeros(())
        if cfg.use_adversarial:
            adv_gen, _ = loss_adversarial(reduce_logits(state.discriminator(v_hat)), target.new_ones(1))
        n_for_g, _ = _classify(state.classifier, v_hat, cfg.normalcy_sigmoid)
        generator_terms = LossTerms(
            L_MSE=loss_mse(v_hat, target),
            L_SSM=loss_ssim(v_hat, target),
            L_GD=loss_gradient(v_hat, target),
            L_MEM=loss_memory_entropy(output.weights),
            adv_gen=adv_gen,
            normalcy_gen=generator_normalcy_term(n_for_g),
        )
        L_G, _, _ = compose_objectives(generator_terms, weights)
        state.opt_G.zero_grad(set_to_none=True)
        L_G.backward()
        state.opt_G.step()
    finally:
        _set_trainable(state.discriminator, True)
        _set_trainable(state.classifier, True)

    state.iteration += 1
    return LossReport(
        iter=state.iteration,
        L_MSE=float(generator_terms.L_MSE),
        L_SSM=float(generator_terms.L_SSM),
        L_GD=float(generator_terms.L_GD),
        L_MEM=float(generator_terms.L_MEM),
        L_N=float(classifier_terms.L_N),
        L_RN=float(classifier_terms.L_RN),
        L_AA=float(classifier_terms.L_AA),
        L_RAA=float(classifier_terms.L_RAA),
        L_G=float(L_G),
        L_D=float(disc),
        L_N_total=float(L_N_total),
    )


def _previous_log(path: Path, upto: int) -> List[Dict[str, float]]:
    if not path.is_file():
        return []
    frame = pd.read_csv(path, float_precision="round_trip")
    return frame[frame["iter"] <= upto].to_dict(orient="records")


def write_log(rows: List[Dict[str, float]], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=list(LossReport.model_fields)).to_csv(path, index=False)
    return path


def train(cfg: TrainConfig) -> Path:
    """Run ``cfg.iterations`` iterations (from ``cfg.resume_from`` if set); returns the last checkpoint"""
    output_dir = Path(cfg.output_dir)
    with start_action(action_type="training:train", output_dir=str(output_dir), seed=cfg.seed,
                      iterations=cfg.iterations) as action:
        configure_determinism(cfg.deterministic)
        samples = build_samples(cfg)
        device = resolve_device(cfg.device)
        state = build_state(cfg, device)
        if cfg.resume_from is not None:
            state.load_state_dict(read_checkpoint(cfg.resume_from, device))
            action.log(message_type="train:resumed", checkpoint=str(cfg.resume_from), iteration=state.iteration)
        extractor_digest = state.extractor.parameter_digest()
        dump_config(cfg, output_dir / RESOLVED_CONFIG)
        log_path = output_dir / LOG_FILE
        rows = _previous_log(log_path, state.iteration) if cfg.resume_from is not None else []

        sampler = IterationBatchSampler(len(samples), samples.donors, cfg.batch_size, cfg.seed,
                                        state.iteration, cfg.iterations)
        workers = 0 if cfg.deterministic else cfg.num_workers
        loader = DataLoader(samples, batch_sampler=sampler, num_workers=workers)
        last = None
        for batch in tqdm(loader, total=len(sampler), desc="train"):
            report = train_step(batch, state, cfg)
            rows.append(report.model_dump())
            if state.iteration % cfg.log_every == 0:
                action.log(message_type="train:losses", **report.model_dump())
            if state.iteration % cfg.checkpoint_every == 0 or state.iteration == cfg.iterations:
                last = save_checkpoint(state, cfg, checkpoint_path(output_dir, state.iteration))
                write_log(rows, log_path)
        if last is None:
            last = save_checkpoint(state, cfg, checkpoint_path(output_dir, state.iteration))
            write_log(rows, log_path)
        if state.extractor.parameter_digest() != extractor_digest:
            raise ContractError("frozen extractor parameters changed during training")
        action.add_success_fields(checkpoint=str(last), iteration=state.iteration)
        return last
