"""Frame-level anomaly scoring, ROC-AUC and efficiency figures of a trained generator."""
import json
import math
import time
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import matplotlib
import numpy as np
import pandas as pd
import torch
from eliot import start_action
from PIL import Image
from pydantic import BaseModel, Field
from sklearn.metrics import roc_auc_score, roc_curve
from torch import nn
from torch.utils.data import DataLoader
from tqdm import tqdm

from zxvad.config import dump_config
from zxvad.errors import ContractError, UndefinedAUCError
from zxvad.ingest import ClipDataset, DatasetManifest, VideoEntry, sample_clip
from zxvad.networks import MemoryBank, MemoryGenerator, count_parameters
from zxvad.training import RESOLVED_CONFIG, load_checkpoint, resolve_device

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PSNR_CAP = 100.0
MSE_FLOOR = 1e-10
Orientation = Literal["inverse_psnr", "psnr"]


class AnomalyScoreSeries(BaseModel):
    video_id: str
    frame_index: List[int] = Field(default_factory=list, description="Index of each scored frame (T..L-1)")
    psnr: List[float] = Field(default_factory=list)
    anomaly: List[float] = Field(default_factory=list)
    labels: Optional[List[int]] = None


class EfficiencyReport(BaseModel):
    parameters: int
    parameters_m: float
    gmacs: float
    fps: Optional[float] = Field(None, description="Forward passes per second; None when not measured")


def psnr(predicted: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """PSNR in dB of [0, 1] frames, per frame over the last three dimensions, capped at 100 dB"""
    if predicted.shape != target.shape:
        raise ContractError(f"psnr: shape mismatch {tuple(predicted.shape)} vs {tuple(target.shape)}")
    mse = ((predicted.double() - target.double()) ** 2).mean(dim=(-3, -2, -1))
    capped = torch.full_like(mse, PSNR_CAP)
    return torch.where(mse < MSE_FLOOR, capped, 10.0 * torch.log10(1.0 / mse.clamp_min(MSE_FLOOR)))


def frame_psnr(predicted: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """PSNR of normalized [-1, 1] frames, remapped to [0, 1] first"""
    return psnr((predicted + 1) / 2, (target + 1) / 2)


def normalize_and_score(psnr_series: Sequence[float], orientation: Orientation = "inverse_psnr") -> np.ndarray:
    """Per-video min-max normalization; a constant series scores all zeros"""
    values = np.asarray(psnr_series, dtype=np.float64)
    if values.size == 0:
        raise ContractError("cannot normalize an empty PSNR series")
    span = values.max() - values.min()
    if span == 0:
        return np.zeros_like(values)
    normalized = (values - values.min()) / span
    return 1.0 - normalized if orientation == "inverse_psnr" else normalized


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    labels = np.asarray(labels)
    if labels.size == 0 or np.unique(labels).size < 2:
        raise UndefinedAUCError("ROC-AUC is undefined unless both normal and abnormal frames are present")
    return float(roc_auc_score(labels, np.asarray(scores, dtype=np.float64)))


def pooled_scores(series: Sequence[AnomalyScoreSeries]) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.concatenate([np.asarray(s.anomaly, dtype=np.float64) for s in series]) if series else np.zeros(0)
    labels = np.concatenate([np.asarray(s.labels or [], dtype=np.int64) for s in series]) if series else np.zeros(0)
    return scores, labels


@torch.no_grad()
def score_video(generator: MemoryGenerator, video: VideoEntry, T: int, image_size: int,
                device: torch.device, orientation: Orientation = "inverse_psnr",
                batch_size: int = 8, num_workers: int = 0) -> AnomalyScoreSeries:
    """Stride-1 sliding window over one video: PSNR of every predicted frame, then its anomaly score"""
    manifest = DatasetManifest.model_construct(kind="vad-test", videos=[video])
    loader = DataLoader(ClipDataset(manifest, T, image_size), batch_size=batch_size, shuffle=False,
                        num_workers=num_workers)
    generator.eval()
    values: List[float] = []
    starts: List[int] = []
    for batch in loader:
        predicted = generator(batch["inputs"].to(device)).frame
        values.extend(frame_psnr(predicted, batch["target"].to(device)).cpu().tolist())
        starts.extend(batch["start"].tolist())
    frame_index = [start + T for start in starts]
    labels = [video.labels[i] for i in frame_index] if video.labels is not None else None
    return AnomalyScoreSeries(
        video_id=video.video_id,
        frame_index=frame_index,
        psnr=values,
        anomaly=normalize_and_score(values, orientation).tolist(),
        labels=labels,
    )


def score_manifest(generator: MemoryGenerator, manifest: DatasetManifest, T: int, image_size: int,
                   device: torch.device, orientation: Orientation = "inverse_psnr",
                   batch_size: int = 8, num_workers: int = 0) -> Tuple[List[AnomalyScoreSeries], Optional[float]]:
    with start_action(action_type="scoring:score_dataset", videos=len(manifest.videos)) as action:
        series: List[AnomalyScoreSeries] = []
        for video in tqdm(manifest.videos, desc="score"):
            if video.frame_count < T + 1:
                action.log(message_type="warning:short_video", video_id=video.video_id,
                           frame_count=video.frame_count, needed=T + 1)
                continue
            series.append(score_video(generator, video, T, image_size, device, orientation, batch_size, num_workers))
        scores, labels = pooled_scores(series)
        auc = None
        if all(s.labels is not None for s in series):
            try:
                auc = roc_auc(scores, labels)
            except UndefinedAUCError as e:
                action.log(message_type="warning:undefined_auc", reason=str(e))
        action.add_success_fields(auc=auc)
        return series, auc


def score_dataset(checkpoint: Union[str, Path], manifest: DatasetManifest,
                  device: Optional[torch.device] = None,
                  orientation: Optional[Orientation] = None) -> Tuple[List[AnomalyScoreSeries], Optional[float]]:
    """Score every video of a manifest with the generator of a checkpoint; returns the series and pooled AUC"""
    device = device or resolve_device("auto")
    state, cfg = load_checkpoint(checkpoint, device)
    return score_manifest(state.generator, manifest, cfg.T, cfg.image_size, device,
                          orientation or cfg.anomaly_orientation, cfg.batch_size, 0)


def per_video_auc(series: Sequence[AnomalyScoreSeries]) -> Dict[str, Optional[float]]:
    result: Dict[str, Optional[float]] = {}
    for s in series:
        try:
            result[s.video_id] = roc_auc(s.anomaly, s.labels or [])
        except UndefinedAUCError:
            result[s.video_id] = None
    return result


def _conv_macs(module: nn.Module, inputs: Tuple[torch.Tensor, ...], output: torch.Tensor) -> int:
    kernel = math.prod(module.kernel_size)
    if isinstance(module, nn.ConvTranspose2d):
        spatial = inputs[0].shape[-2] * inputs[0].shape[-1]
    else:
        spatial = output.shape[-2] * output.shape[-1]
    return kernel * (module.in_channels // module.groups) * module.out_channels * spatial * output.shape[0]


def count_macs(model: nn.Module, example: torch.Tensor) -> int:
    """Multiply-accumulates of one forward pass, accumulated analytically per layer"""
    total = 0

    def on_conv(module, inputs, output):
        nonlocal total
        total += _conv_macs(module, inputs, output)

    def on_linear(module, inputs, output):
        nonlocal total
        total += module.in_features * module.out_features * (output.numel() // module.out_features)

    def on_memory(module, inputs, output):
        nonlocal total
        features = inputs[0]
        locations = features.shape[0]
        if module.addressing != "global":
            locations *= features.shape[-2] * features.shape[-1]
        total += 2 * module.num_items * module.item_dim * locations

    handles = []
    for module in model.modules():
        if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
            handles.append(module.register_forward_hook(on_conv))
        elif isinstance(module, nn.Linear):
            handles.append(module.register_forward_hook(on_linear))
        elif isinstance(module, MemoryBank):
            handles.append(module.register_forward_hook(on_memory))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(example)
    finally:
        for handle in handles:
            handle.remove()
        model.train(was_training)
    return total


@torch.no_grad()
def measure_fps(model: nn.Module, example: torch.Tensor, passes: int = 100, warmup: int = 10) -> float:
    model.eval()
    for _ in range(warmup):
        model(example)
    if example.is_cuda:
        torch.cuda.synchronize()
    start = time.perf_counter()
    for _ in range(passes):
        model(example)
    if example.is_cuda:
        torch.cuda.synchronize()
    return passes / (time.perf_counter() - start)


def efficiency_report(generator: Union[MemoryGenerator, str, Path], input_shape: Tuple[int, int, int],
                      fps_passes: int = 100) -> EfficiencyReport:
    """Parameters of the inference path, GMACs of one C x H x W prediction and, optionally, FPS.

    ``generator`` may be a checkpoint path, in which case its generator is loaded first.
    """
    if not isinstance(generator, nn.Module):
        generator = load_checkpoint(generator, resolve_device("auto"))[0].generator
    channels, height, width = input_shape
    device = next(generator.parameters()).device
    example = torch.zeros(1, generator.T, channels, height, width, device=device)
    parameters = count_parameters(generator)
    fps = measure_fps(generator, example, passes=max(fps_passes, 100)) if fps_passes > 0 else None
    return EfficiencyReport(
        parameters=parameters,
        parameters_m=parameters / 1e6,
        gmacs=count_macs(generator, example) / 1e9,
        fps=fps,
    )


def write_series_csv(series: AnomalyScoreSeries, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({
        "frame_index": series.frame_index,
        "psnr": series.psnr,
        "anomaly_score": series.anomaly,
        "label": series.labels if series.labels is not None else [None] * len(series.psnr),
    }).to_csv(path, index=False)
    return path


def plot_series(series: AnomalyScoreSeries, path: Union[str, Path]) -> Path:
    """Anomaly curve with ground-truth abnormal frames shaded"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.plot(series.frame_index, series.anomaly, color="tab:red", linewidth=1.2, label="anomaly score")
    if series.labels:
        for index, label in zip(series.frame_index, series.labels):
            if label:
                ax.axvspan(index - 0.5, index + 0.5, color="tab:orange", alpha=0.25, linewidth=0)
    ax.set_ylim(-0.02, 1.02)
    ax.set_xlabel("frame")
    ax.set_ylabel("score")
    ax.set_title(series.video_id)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_roc(scores: np.ndarray, labels: np.ndarray, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fpr, tpr, _ = roc_curve(labels, scores)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(fpr, tpr, color="tab:blue")
    ax.plot([0, 1], [0, 1], color="grey", linestyle="--", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


@torch.no_grad()
def save_difference_maps(generator: MemoryGenerator, video: VideoEntry, series: AnomalyScoreSeries, k: int,
                         T: int, image_size: int, output_dir: Union[str, Path]) -> List[Path]:
    """|v_hat - v| as grayscale images for the ``k`` highest-scoring frames of a video"""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    device = next(generator.parameters()).device
    generator.eval()
    order = np.argsort(-np.asarray(series.anomaly), kind="stable")[:k]
    paths = []
    for position in order:
        frame = series.frame_index[int(position)]
        clip = sample_clip(video, frame - T, T, image_size)
        predicted = generator(clip.input_tensor[None].to(device)).frame[0]
        difference = ((predicted - clip.target.pixels.to(device)).abs().mean(dim=0) / 2).clamp(0, 1)
        image = Image.fromarray((difference.cpu().numpy() * 255).round().astype(np.uint8))
        path = output_dir / f"{video.video_id}_{frame:06d}_diff.png"
        image.save(path)
        paths.append(path)
    return paths


def evaluate(checkpoint: Union[str, Path], manifest: DatasetManifest, output_dir: Union[str, Path],
             plots: bool = False, difference_maps: int = 0, fps_passes: int = 100,
             device: Optional[torch.device] = None) -> Dict[str, object]:
    """Score a test manifest and write per-video CSVs, a summary JSON and optional figures"""
    output_dir = Path(output_dir)
    device = device or resolve_device("auto")
    with start_action(action_type="scoring:evaluate", checkpoint=str(checkpoint), output_dir=str(output_dir)):
        state, cfg = load_checkpoint(checkpoint, device)
        dump_config(cfg, output_dir / RESOLVED_CONFIG)
        series, auc = score_manifest(state.generator, manifest, cfg.T, cfg.image_size, device,
                                     cfg.anomaly_orientation, cfg.batch_size, 0)
        videos = {video.video_id: video for video in manifest.videos}
        for s in series:
            write_series_csv(s, output_dir / "videos" / f"{s.video_id}.csv")
            if plots:
                plot_series(s, output_dir / "plots" / f"{s.video_id}.png")
            if difference_maps > 0:
                save_difference_maps(state.generator, videos[s.video_id], s, difference_maps, cfg.T,
                                     cfg.image_size, output_dir / "difference_maps")
        per_video = per_video_auc(series)
        defined = [value for value in per_video.values() if value is not None]
        if plots and auc is not None:
            plot_roc(*pooled_scores(series), output_dir / "plots" / "roc.png")
        efficiency = efficiency_report(state.generator, (cfg.network_config.channels, cfg.image_size, cfg.image_size),
                                       fps_passes)
        summary = {
            "auc": auc,
            "per_video_auc": per_video,
            "mean_per_video_auc": float(np.mean(defined)) if defined else None,
            "scored_frames": int(sum(len(s.anomaly) for s in series)),
            "orientation": cfg.anomaly_orientation,
            "efficiency": efficiency.model_dump(),
        }
        (output_dir / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
        return summary
