"""Frame directories, dataset manifests and clip sampling.

On-disk layout::

    <root>/<video_id>/000000.png, 000001.png, ...
    <root>/<video_id>.labels.txt          (VAD-test only, one 0/1 per frame)
"""
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch
from eliot import start_action
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch.utils.data import Dataset
from torchvision.transforms import InterpolationMode
from torchvision.transforms.v2 import functional as TF

from zxvad.errors import ClipRangeError, FrameDecodeError, ManifestError, ValueRangeError

FRAME_SUFFIXES = (".png", ".jpg", ".jpeg")
LABEL_SUFFIX = ".labels.txt"
DEFAULT_SIZE = 256


class DatasetKind(str, Enum):
    VAD_TRAIN = "vad-train"
    VAD_TEST = "vad-test"
    TI = "ti"


@dataclass(frozen=True)
class Frame:
    """A normalized C x H x W frame in [-1, 1]"""
    pixels: torch.Tensor
    source_id: str = ""
    index: int = 0


@dataclass(frozen=True)
class Clip:
    """T consecutive input frames and the frame that follows them"""
    inputs: Tuple[Frame, ...]
    target: Frame

    @property
    def input_tensor(self) -> torch.Tensor:
        return torch.stack([frame.pixels for frame in self.inputs])


class VideoEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    video_id: str = Field(..., description="Video identifier (directory name)")
    frame_directory: Path = Field(..., description="Directory holding the numbered frames")
    frame_count: int = Field(..., ge=0, description="Number of frames L_v / L_u")
    labels: Optional[List[int]] = Field(None, description="Per-frame labels, 1 = abnormal")
    suffix: str = Field(".png", description="Image file suffix of the frames")

    @model_validator(mode="after")
    def _check_labels(self) -> "VideoEntry":
        if self.labels is not None:
            if len(self.labels) != self.frame_count:
                raise ValueError(
                    f"video {self.video_id}: {len(self.labels)} labels for {self.frame_count} frames"
                )
            if any(label not in (0, 1) for label in self.labels):
                raise ValueError(f"video {self.video_id}: labels must be 0 or 1")
        return self

    def frame_path(self, index: int) -> Path:
        return self.frame_directory / f"{index:06d}{self.suffix}"

    @property
    def abnormal_frames(self) -> List[int]:
        return [i for i, label in enumerate(self.labels or []) if label == 1]


class DatasetManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: DatasetKind
    videos: List[VideoEntry] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_kind(self) -> "DatasetManifest":
        for video in self.videos:
            if self.kind == DatasetKind.VAD_TEST and video.labels is None:
                raise ValueError(f"VAD-test video {video.video_id} carries no labels")
            if self.kind != DatasetKind.VAD_TEST and video.labels is not None:
                raise ValueError(f"{self.kind.value} video {video.video_id} must not carry labels")
        return self

    @property
    def total_frames(self) -> int:
        return sum(video.frame_count for video in self.videos)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DatasetManifest":
        path = Path(path)
        try:
            return cls.model_validate_json(path.read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise ManifestError(f"Manifest not found: {path}") from e
        except ValueError as e:
            raise ManifestError(f"Invalid manifest {path}: {e}") from e


def load_and_resize(path: Union[str, Path], size: int = DEFAULT_SIZE) -> torch.Tensor:
    """Decode an image into a float 3 x size x size tensor with values in [0, 255]"""
    path = Path(path)
    try:
        with Image.open(path) as image:
            image.load()
            rgb = image.convert("RGB")
    except (FileNotFoundError, UnidentifiedImageError, OSError) as e:
        raise FrameDecodeError(str(path), str(e)) from e
    raw = TF.pil_to_tensor(rgb).to(torch.float32)
    if raw.shape[-2:] != (size, size):
        raw = TF.resize(raw, [size, size], interpolation=InterpolationMode.BILINEAR, antialias=True)
        raw = raw.clamp(0.0, 255.0)
    return raw


def normalize_frame(raw: torch.Tensor, source_id: str = "", index: int = 0) -> Frame:
    """Map [0, 255] pixels onto [-1, 1] with 2 * raw / 255 - 1"""
    if raw.numel() and (raw.min() < 0 or raw.max() > 255):
        raise ValueRangeError(
            f"raw frame values must lie in [0, 255], got [{raw.min().item()}, {raw.max().item()}]"
        )
    return Frame(pixels=raw.to(torch.float32) * (2.0 / 255.0) - 1.0, source_id=source_id, index=index)


def denormalize_frame(pixels: torch.Tensor) -> torch.Tensor:
    return (pixels + 1.0) * (255.0 / 2.0)


def load_frame(video: VideoEntry, index: int, size: int = DEFAULT_SIZE) -> Frame:
    raw = load_and_resize(video.frame_path(index), size)
    return normalize_frame(raw, source_id=video.video_id, index=index)


def sample_clip(video: VideoEntry, t: int, T: int = 4, size: int = DEFAULT_SIZE) -> Clip:
    """Frames t..t+T-1 as inputs and frame t+T as the prediction target"""
    if t < 0 or t + T >= video.frame_count:
        raise ClipRangeError(
            f"clip start {t} with T={T} does not fit video {video.video_id} of {video.frame_count} frames"
        )
    inputs = tuple(load_frame(video, t + offset, size) for offset in range(T))
    return Clip(inputs=inputs, target=load_frame(video, t + T, size))


def clip_starts(video: VideoEntry, T: int) -> range:
    """Every valid clip start of a video: frame_count - T of them"""
    return range(max(video.frame_count - T, 0))


def parse_labels(text: str) -> List[int]:
    return [int(token) for token in text.split()]


def _frame_files(video_dir: Path) -> List[Path]:
    return sorted(p for p in video_dir.iterdir() if p.is_file() and p.suffix.lower() in FRAME_SUFFIXES)


def build_manifest(root: Union[str, Path], kind: Union[DatasetKind, str]) -> DatasetManifest:
    """Scan ``root`` for per-video frame directories (and label files for VAD-test)"""
    root = Path(root)
    kind = DatasetKind(kind)
    with start_action(action_type="ingest:build_manifest", root=str(root), kind=kind.value) as action:
        if not root.is_dir():
            raise ManifestError(f"Dataset root is not a directory: {root}")
        videos: List[VideoEntry] = []
        for video_dir in sorted(p for p in root.iterdir() if p.is_dir()):
            files = _frame_files(video_dir)
            if not files:
                action.log(message_type="warning:empty_video_dir", video_dir=str(video_dir))
                continue
            suffix = files[0].suffix
            expected = [f"{i:06d}{suffix}" for i in range(len(files))]
            if [p.name for p in files] != expected:
                raise ManifestError(f"Frames of {video_dir} are not numbered 000000..{len(files) - 1:06d}")
            labels = None
            if kind == DatasetKind.VAD_TEST:
                label_file = root / f"{video_dir.name}{LABEL_SUFFIX}"
                if not label_file.is_file():
                    raise ManifestError(f"Missing label file for VAD-test video {video_dir.name}: {label_file}")
                try:
                    labels = parse_labels(label_file.read_text(encoding="utf-8"))
                except ValueError as e:
                    raise ManifestError(f"Unparseable label file {label_file}: {e}") from e
            try:
                videos.append(VideoEntry(
                    video_id=video_dir.name,
                    frame_directory=video_dir,
                    frame_count=len(files),
                    labels=labels,
                    suffix=suffix,
                ))
            except ValueError as e:
                raise ManifestError(str(e)) from e
        action.add_success_fields(videos=len(videos))
        return DatasetManifest(kind=kind, videos=videos)


class ClipDataset(Dataset):
    """Every (video, start) window of a manifest as a map-style dataset.

    Items are dictionaries with ``inputs`` (T x C x H x W), ``target`` (C x H x W),
    ``video`` (index into the manifest) and ``start``.
    """

    def __init__(self, manifest: DatasetManifest, T: int = 4, size: int = DEFAULT_SIZE,
                 videos: Optional[Sequence[int]] = None):
        self.manifest = manifest
        self.T = T
        self.size = size
        chosen = range(len(manifest.videos)) if videos is None else videos
        self.windows: List[Tuple[int, int]] = [
            (v, t) for v in chosen for t in clip_starts(manifest.videos[v], T)
        ]

    def __len__(self) -> int:
        return len(self.windows)

    def __getitem__(self, item: int) -> Dict[str, torch.Tensor]:
        video_index, start = self.windows[item]
        clip = sample_clip(self.manifest.videos[video_index], start, self.T, self.size)
        return {
            "inputs": clip.input_tensor,
            "target": clip.target.pixels,
            "video": torch.tensor(video_index),
            "start": torch.tensor(start),
        }

