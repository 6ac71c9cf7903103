"""Synthetic shape videos for desk-scale end-to-end runs.

Normal videos show a few simple shapes drifting linearly (wrapping at the borders).
Test videos additionally contain a bright foreign shape that jumps around during the
anomaly span; the task-irrelevant donor set uses yet other shape kinds.
"""
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
from eliot import start_action
from PIL import Image, ImageDraw
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from zxvad.ingest import LABEL_SUFFIX, DatasetKind, DatasetManifest, build_manifest

ShapeKind = Literal["circle", "square", "triangle", "star", "cross", "diamond"]


class ToySpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    resolution: int = Field(64, ge=16)
    video_length: int = Field(80, ge=2)
    train_videos: int = Field(20, ge=1)
    test_videos: int = Field(10, ge=1)
    ti_videos: int = Field(10, ge=0)
    ti_length: int = Field(20, ge=1)
    shapes_per_video: int = Field(2, ge=1)
    normal_shapes: Tuple[ShapeKind, ...] = ("circle", "square")
    anomaly_shapes: Tuple[ShapeKind, ...] = ("star", "triangle")
    ti_shapes: Tuple[ShapeKind, ...] = ("cross", "diamond")
    anomaly_start: int = Field(20, ge=0)
    anomaly_end: int = Field(40, ge=1)
    seed: int = 0

    @field_validator("normal_shapes", "anomaly_shapes", "ti_shapes", mode="before")
    @classmethod
    def _split(cls, value):
        if isinstance(value, str):
            return tuple(part.strip() for part in value.split(",") if part.strip())
        return value

    @model_validator(mode="after")
    def _check_span(self) -> "ToySpec":
        if not self.anomaly_start < self.anomaly_end <= self.video_length:
            raise ValueError(f"anomaly span [{self.anomaly_start}, {self.anomaly_end}) must lie inside "
                             f"a video of {self.video_length} frames")
        if set(self.anomaly_shapes) & set(self.normal_shapes):
            raise ValueError("anomaly shapes must differ from normal shapes")
        return self

    def labels(self) -> List[int]:
        return [int(self.anomaly_start <= i < self.anomaly_end) for i in range(self.video_length)]


@dataclass(frozen=True)
class ToyCorpus:
    root: Path
    train: Path
    test: Path
    ti: Path


@dataclass
class _Mover:
    kind: str
    x: float
    y: float
    vx: float
    vy: float
    size: float
    color: Tuple[int, int, int]


def _polygon(kind: str, cx: float, cy: float, r: float) -> List[Tuple[float, float]]:
    if kind == "triangle":
        angles = np.deg2rad([-90, 30, 150])
        return [(cx + r * np.cos(a), cy + r * np.sin(a)) for a in angles]
    if kind == "diamond":
        return [(cx, cy - r), (cx + r, cy), (cx, cy + r), (cx - r, cy)]
    if kind == "star":
        points = []
        for i in range(10):
            radius = r if i % 2 == 0 else r * 0.45
            angle = np.deg2rad(-90 + 36 * i)
            points.append((cx + radius * np.cos(angle), cy + radius * np.sin(angle)))
        return points
    raise ValueError(f"{kind} is not a polygon shape")


def _draw(draw: ImageDraw.ImageDraw, kind: str, cx: float, cy: float, r: float, color: Tuple[int, int, int]) -> None:
    box = [cx - r, cy - r, cx + r, cy + r]
    if kind == "circle":
        draw.ellipse(box, fill=color)
    elif kind == "square":
        draw.rectangle(box, fill=color)
    elif kind == "cross":
        arm = r / 3
        draw.rectangle([cx - r, cy - arm, cx + r, cy + arm], fill=color)
        draw.rectangle([cx - arm, cy - r, cx + arm, cy + r], fill=color)
    else:
        draw.polygon(_polygon(kind, cx, cy, r), fill=color)


def _draw_wrapped(draw: ImageDraw.ImageDraw, mover: _Mover, size: int) -> None:
    x, y = mover.x % size, mover.y % size
    for dx in (-size, 0, size):
        for dy in (-size, 0, size):
            _draw(draw, mover.kind, x + dx, y + dy, mover.size, mover.color)


def _movers(rng: np.random.Generator, kinds: Tuple[str, ...], count: int, resolution: int) -> List[_Mover]:
    movers = []
    for _ in range(count):
        speed = rng.uniform(0.5, 1.5)
        angle = rng.uniform(0, 2 * np.pi)
        movers.append(_Mover(
            kind=str(kinds[int(rng.integers(len(kinds)))]),
            x=float(rng.uniform(0, resolution)),
            y=float(rng.uniform(0, resolution)),
            vx=float(speed * np.cos(angle)),
            vy=float(speed * np.sin(angle)),
            size=float(rng.uniform(0.07, 0.11) * resolution),
            color=tuple(int(c) for c in rng.integers(60, 160, size=3)),
        ))
    return movers


def _render_video(directory: Path, length: int, resolution: int, movers: List[_Mover],
                  rng: np.random.Generator, anomaly: Optional[Tuple[str, int, int]] = None) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    background = tuple(int(c) for c in rng.integers(10, 40, size=3))
    for t in range(length):
        image = Image.new("RGB", (resolution, resolution), background)
        draw = ImageDraw.Draw(image)
        for mover in movers:
            _draw_wrapped(draw, replace(mover, x=mover.x + t * mover.vx, y=mover.y + t * mover.vy), resolution)
        if anomaly is not None and anomaly[1] <= t < anomaly[2]:
            r = 0.14 * resolution
            cx, cy = rng.uniform(r, resolution - r, size=2)
            _draw(draw, anomaly[0], float(cx), float(cy), r, (255, 255, 230))
        image.save(directory / f"{t:06d}.png")


def generate_toy_dataset(spec: ToySpec, root: Union[str, Path]) -> ToyCorpus:
    """Write train / test / TI frame directories, test label files and the three manifests"""
    root = Path(root)
    with start_action(action_type="toybench:generate_toy_dataset", root=str(root), seed=spec.seed):
        splits = (("train", spec.train_videos, spec.normal_shapes, spec.video_length),
                  ("test", spec.test_videos, spec.normal_shapes, spec.video_length),
                  ("ti", spec.ti_videos, spec.ti_shapes, spec.ti_length))
        for split_id, (split, count, kinds, length) in enumerate(splits):
            for index in range(count):
                rng = np.random.default_rng([spec.seed, split_id, index])
                movers = _movers(rng, kinds, spec.shapes_per_video, spec.resolution)
                anomaly = None
                if split == "test":
                    kind = spec.anomaly_shapes[int(rng.integers(len(spec.anomaly_shapes)))]
                    anomaly = (kind, spec.anomaly_start, spec.anomaly_end)
                video_id = f"{split}_{index:03d}"
                _render_video(root / split / video_id, length, spec.resolution, movers, rng, anomaly)
                if split == "test":
                    (root / split / f"{video_id}{LABEL_SUFFIX}").write_text(
                        "\n".join(str(label) for label in spec.labels()) + "\n", encoding="utf-8")

        paths = {}
        for split, kind in (("train", DatasetKind.VAD_TRAIN), ("test", DatasetKind.VAD_TEST), ("ti", DatasetKind.TI)):
            split_dir = root / split
            split_dir.mkdir(parents=True, exist_ok=True)
            manifest: DatasetManifest = build_manifest(split_dir, kind)
            paths[split] = manifest.save(root / f"{split}.manifest.json")
        return ToyCorpus(root=root, train=paths["train"], test=paths["test"], ti=paths["ti"])
